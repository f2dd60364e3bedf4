// Checkpoint container: a flat list of named little-endian arrays.
//
//   "EM3RF" | version u32 | entry count u32
//   per entry: name length u32 | UTF-8 name | dtype u8 | rank u32 |
//              extents u64 x rank | payload (little-endian)

#ifndef EM3RF_TENSOR_CHECKPOINT_HPP
#define EM3RF_TENSOR_CHECKPOINT_HPP

#include "em3rf/tensor/parameters.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace em3rf::tensor {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct NamedArray {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // widened; narrowed on write for f32
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

/// Entries of the store under `prefix`.
template <typename Scalar>
std::vector<NamedArray> export_store(const ParameterStore<Scalar>& store, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : store.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    NamedArray a;
    a.name = name;
    a.dtype = std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
    a.shape = t.shape();
    a.values.assign(t.values().begin(), t.values().end());
    out.push_back(std::move(a));
  }
  return out;
}

/// Copies matching entries into an already-built store. Returns the number
/// of parameters loaded; a shape mismatch throws.
template <typename Scalar>
std::size_t import_store(ParameterStore<Scalar>& store, const std::vector<NamedArray>& entries,
                         const std::string& prefix = "") {
  std::size_t loaded = 0;
  for (const auto& e : entries) {
    if (e.name.rfind(prefix, 0) != 0 || !store.contains(e.name)) continue;
    Tensor<Scalar> t = store.at(e.name);
    if (t.shape() != e.shape) {
      throw CheckpointError("checkpoint entry " + e.name + " has shape " + to_string(e.shape) + ", model expects " +
                            to_string(t.shape()));
    }
    for (std::size_t i = 0; i < e.values.size(); ++i) t.values()[i] = static_cast<Scalar>(e.values[i]);
    ++loaded;
  }
  return loaded;
}

}  // namespace em3rf::tensor

#endif  // EM3RF_TENSOR_CHECKPOINT_HPP
