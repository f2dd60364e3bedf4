#include "em3rf/tensor/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace em3rf::tensor {

namespace {

constexpr char kMagic[5] = {'E', 'M', '3', 'R', 'F'};

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw CheckpointError("checkpoint truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (static_cast<Index>(e.values.size()) != numel(e.shape)) {
      throw CheckpointError("entry " + e.name + ": payload does not match shape");
    }
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (Index d : e.shape) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    for (double v : e.values) {
      if (e.dtype == DType::f32) {
        put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[5];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not an EM3RF checkpoint");
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(is);
  std::vector<NamedArray> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray e;
    const auto len = get_le<std::uint32_t>(is);
    e.name.resize(len);
    if (!is.read(e.name.data(), len)) throw CheckpointError("checkpoint truncated in entry name");
    const auto tag = get_le<std::uint8_t>(is);
    if (tag > 1) throw CheckpointError("entry " + e.name + ": unknown dtype tag " + std::to_string(tag));
    e.dtype = static_cast<DType>(tag);
    const auto rank = get_le<std::uint32_t>(is);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<Index>(get_le<std::uint64_t>(is)));
    const auto n = static_cast<std::size_t>(numel(e.shape));
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      e.values[i] = e.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(is)))
                                          : std::bit_cast<double>(get_le<std::uint64_t>(is));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace em3rf::tensor
