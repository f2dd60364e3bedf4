// Named parameter stores and the Adam optimizer.

#ifndef EM3RF_TENSOR_PARAMETERS_HPP
#define EM3RF_TENSOR_PARAMETERS_HPP

#include "em3rf/tensor/tensor.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace em3rf::tensor {

/// Ordered collection of trainable tensors addressed by name
/// ("encoder/geo/block0/q" and so on).
template <typename Scalar>
class ParameterStore {
 public:
  /// Registers a parameter; re-registering a name returns the existing one.
  Tensor<Scalar> add(const std::string& name, const Shape& shape, std::vector<Scalar> init) {
    if (auto it = index_.find(name); it != index_.end()) return entries_[it->second].second;
    auto t = Tensor<Scalar>::from_data(shape, std::move(init), true);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, t);
    return t;
  }

  /// Glorot-uniform initialization with fan_in/fan_out taken from the last two extents.
  template <typename Rng>
  Tensor<Scalar> add_glorot(const std::string& name, const Shape& shape, Rng& rng) {
    const Index fan_out = shape.size() >= 2 ? shape[shape.size() - 2] : 1;
    const Index fan_in = shape.back();
    const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<Scalar> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = Scalar(u(rng));
    return add(name, shape, std::move(v));
  }

  Tensor<Scalar> add_constant(const std::string& name, const Shape& shape, Scalar value) {
    return add(name, shape, std::vector<Scalar>(static_cast<std::size_t>(numel(shape)), value));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<Scalar> at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor<Scalar>>>& entries() const { return entries_; }

  std::vector<Tensor<Scalar>> tensors() const {
    std::vector<Tensor<Scalar>> out;
    for (const auto& [_, t] : entries_) out.push_back(t);
    return out;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor<Scalar>>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam state for one parameter tensor.
template <typename Scalar>
struct AdamMoments {
  std::vector<Scalar> m;
  std::vector<Scalar> v;
};

/// One Adam update of `param` in place. `step` is the 1-based step count
/// used for bias correction.
template <typename Scalar>
void adam_step(std::vector<Scalar>& param, const std::vector<Scalar>& grad, AdamMoments<Scalar>& state,
               long step, const AdamConfig& cfg) {
  if (state.m.size() != param.size()) {
    state.m.assign(param.size(), Scalar(0));
    state.v.assign(param.size(), Scalar(0));
  }
  if (grad.size() != param.size()) throw ShapeError("adam_step: gradient size mismatch");
  const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = Scalar(m);
    state.v[i] = Scalar(v);
    param[i] = Scalar(param[i] - cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps));
  }
}

/// Adam over every tensor of a ParameterStore.
template <typename Scalar>
class Adam {
 public:
  Adam(ParameterStore<Scalar>& store, AdamConfig cfg) : store_(&store), cfg_(cfg) {}

  void step() {
    ++t_;
    for (const auto& [name, tensor] : store_->entries()) {
      Tensor<Scalar> p = tensor;
      adam_step(p.values(), p.grad(), moments_[name], t_, cfg_);
    }
  }

  void zero_grad() { store_->zero_grad(); }

  long steps_taken() const { return t_; }
  void set_steps_taken(long t) { t_ = t; }
  AdamConfig& config() { return cfg_; }
  std::map<std::string, AdamMoments<Scalar>>& moments() { return moments_; }

 private:
  ParameterStore<Scalar>* store_;
  AdamConfig cfg_;
  long t_ = 0;
  std::map<std::string, AdamMoments<Scalar>> moments_;
};

/// Global L2 gradient norm clipping; returns the pre-clip norm.
template <typename Scalar>
double clip_grad_norm(ParameterStore<Scalar>& store, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : store.entries())
    for (Scalar g : t.grad()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double f = max_norm / norm;
    for (auto& [_, t] : store.entries()) {
      Tensor<Scalar> tt = t;
      for (auto& g : tt.mutable_grad()) g = Scalar(g * f);
    }
  }
  return norm;
}

}  // namespace em3rf::tensor

#endif  // EM3RF_TENSOR_PARAMETERS_HPP
