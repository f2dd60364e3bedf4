// Differentiable operations on Tensor.
//
// Shapes must agree exactly. The only implicit expansion is along leading
// batch axes (add_rowwise, mul_rowwise, scale_last); anything else needs an
// explicit reshape.

#ifndef EM3RF_TENSOR_OPS_HPP
#define EM3RF_TENSOR_OPS_HPP

#include "em3rf/tensor/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

namespace em3rf::tensor {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapMatrix = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMapMatrix = Eigen::Map<const RowMatrix<Scalar>>;

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError(std::string(op) + ": axis out of range");
  return a;
}

template <typename Scalar>
Node<Scalar>& parent(Node<Scalar>& self, std::size_t i) {
  return *self.parents[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  return make_result<Scalar>("add", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = detail::parent(self, k);
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return make_result<Scalar>("sub", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  return make_result<Scalar>("mul", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "div");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.values()[i];
  return make_result<Scalar>("div", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        pb.grad[i] -= self.grad[i] * self.value[i] / pb.value[i];
      }
    }
  });
}

/// Cellwise min/max; at ties the gradient is split evenly between inputs.
template <typename Scalar>
Tensor<Scalar> minimum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "minimum");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], b.values()[i]);
  return make_result<Scalar>("minimum", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar x = pa.value[i], y = pb.value[i];
      const Scalar wa = x < y ? Scalar(1) : (x > y ? Scalar(0) : Scalar(0.5));
      if (pa.requires_grad) pa.grad[i] += wa * self.grad[i];
      if (pb.requires_grad) pb.grad[i] += (Scalar(1) - wa) * self.grad[i];
    }
  });
}

template <typename Scalar>
Tensor<Scalar> maximum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "maximum");
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], b.values()[i]);
  return make_result<Scalar>("maximum", a.shape(), std::move(out), {a, b}, [](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const Scalar x = pa.value[i], y = pb.value[i];
      const Scalar wa = x > y ? Scalar(1) : (x < y ? Scalar(0) : Scalar(0.5));
      if (pa.requires_grad) pa.grad[i] += wa * self.grad[i];
      if (pb.requires_grad) pb.grad[i] += (Scalar(1) - wa) * self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise unary

/// y = f(x) with dy/dx = df(x, y).
template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary(const Tensor<Scalar>& a, const char* name, F f, DF df) {
  std::vector<Scalar> out(a.values().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.values()[i]);
  return make_result<Scalar>(name, a.shape(), std::move(out), {a}, [df](Node<Scalar>& self) {
    auto& p = detail::parent(self, 0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  return unary(a, "scale", [c](Scalar x) { return c * x; }, [c](Scalar, Scalar) { return c; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  return unary(a, "add_scalar", [c](Scalar x) { return x + c; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& a) {
  return scale(a, Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return unary(
      a, "relu", [](Scalar x) { return x > Scalar(0) ? x : Scalar(0); },
      [](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> leaky_relu(const Tensor<Scalar>& a, Scalar slope = Scalar(0.2)) {
  return unary(
      a, "leaky_relu", [slope](Scalar x) { return x > Scalar(0) ? x : slope * x; },
      [slope](Scalar x, Scalar) { return x > Scalar(0) ? Scalar(1) : slope; });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  return unary(
      a, "sigmoid",
      [](Scalar x) {
        return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a) {
  return unary(
      a, "tanh", [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

/// x * sigmoid(x)
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& a) {
  return unary(
      a, "silu", [](Scalar x) { return x / (Scalar(1) + std::exp(-x)); },
      [](Scalar x, Scalar) {
        const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
        return s * (Scalar(1) + x * (Scalar(1) - s));
      });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  return unary(
      a, "exp", [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  return unary(
      a, "log", [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& a) {
  return unary(
      a, "sqrt", [](Scalar x) { return std::sqrt(x); }, [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return unary(
      a, "square", [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return Scalar(2) * x; });
}

// ---------------------------------------------------------------------------
// Leading-batch expansion

/// out[..., j] = a[..., j] + b[j]
template <typename Scalar>
Tensor<Scalar> add_rowwise(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (b.rank() != 1 || a.rank() < 1 || a.dim(-1) != b.dim(0)) {
    throw ShapeError("add_rowwise: " + to_string(a.shape()) + " + " + to_string(b.shape()));
  }
  const Index n = b.dim(0);
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i % static_cast<std::size_t>(n)];
  return make_result<Scalar>("add_rowwise", a.shape(), std::move(out), {a, b}, [n](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % static_cast<std::size_t>(n)] += self.grad[i];
    }
  });
}

/// out[..., j] = a[..., j] * b[j]
template <typename Scalar>
Tensor<Scalar> mul_rowwise(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (b.rank() != 1 || a.rank() < 1 || a.dim(-1) != b.dim(0)) {
    throw ShapeError("mul_rowwise: " + to_string(a.shape()) + " * " + to_string(b.shape()));
  }
  const auto n = static_cast<std::size_t>(b.dim(0));
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i % n];
  return make_result<Scalar>("mul_rowwise", a.shape(), std::move(out), {a, b}, [n](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i % n];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % n] += self.grad[i] * pa.value[i];
    }
  });
}

/// out[..., j] = a[..., j] * s[...]: scales every trailing row of `a` by
/// the matching entry of `s`, whose shape is a.shape() without the last axis.
template <typename Scalar>
Tensor<Scalar> scale_last(const Tensor<Scalar>& a, const Tensor<Scalar>& s) {
  Shape expect(a.shape().begin(), a.shape().end() - 1);
  if (a.rank() < 1 || s.shape() != expect) {
    throw ShapeError("scale_last: " + to_string(a.shape()) + " by " + to_string(s.shape()));
  }
  const auto d = static_cast<std::size_t>(a.dim(-1));
  std::vector<Scalar> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s.values()[i / d];
  return make_result<Scalar>("scale_last", a.shape(), std::move(out), {a, s}, [d](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& ps = detail::parent(self, 1);
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * ps.value[i / d];
    }
    if (ps.requires_grad) {
      ps.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ps.grad[i / d] += self.grad[i] * pa.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Scalar s = 0;
  for (Scalar v : a.values()) s += v;
  return make_result<Scalar>("sum", {}, {s}, {a}, [](Node<Scalar>& self) {
    auto& p = detail::parent(self, 0);
    p.ensure_grad();
    for (auto& g : p.grad) g += self.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(std::max<Index>(a.size(), 1)));
}

/// Sums out one axis (the axis is removed from the shape).
template <typename Scalar>
Tensor<Scalar> sum_axis(const Tensor<Scalar>& a, int axis) {
  const int ax = detail::normalize_axis(axis, a.rank(), "sum_axis");
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const Index len = a.dim(ax);
  Shape shape = a.shape();
  shape.erase(shape.begin() + ax);
  std::vector<Scalar> out(static_cast<std::size_t>(outer * inner), Scalar(0));
  const Scalar* x = a.data();
  for (Index o = 0; o < outer; ++o)
    for (Index l = 0; l < len; ++l)
      for (Index i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
  return make_result<Scalar>("sum_axis", std::move(shape), std::move(out), {a},
                             [outer, inner, len](Node<Scalar>& self) {
                               auto& p = detail::parent(self, 0);
                               p.ensure_grad();
                               for (Index o = 0; o < outer; ++o)
                                 for (Index l = 0; l < len; ++l)
                                   for (Index i = 0; i < inner; ++i)
                                     p.grad[(o * len + l) * inner + i] += self.grad[o * inner + i];
                             });
}

template <typename Scalar>
Tensor<Scalar> mean_axis(const Tensor<Scalar>& a, int axis) {
  const int ax = detail::normalize_axis(axis, a.rank(), "mean_axis");
  return scale(sum_axis(a, ax), Scalar(1) / static_cast<Scalar>(a.dim(ax)));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, const Shape& shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  return make_result<Scalar>("reshape", shape, a.values(), {a}, [](Node<Scalar>& self) {
    auto& p = detail::parent(self, 0);
    p.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// General axis permutation: out.shape[i] = a.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute: rank mismatch");
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Index> in_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.dim(i + 1);
  for (int i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  // Source offset for each destination element.
  std::vector<Index> src(static_cast<std::size_t>(a.size()));
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  for (Index flat = 0; flat < a.size(); ++flat) {
    Index off = 0;
    for (int i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[flat] = off;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<Scalar> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = a.values()[src[i]];
  return make_result<Scalar>("permute", std::move(out_shape), std::move(out), {a},
                             [src = std::move(src)](Node<Scalar>& self) {
                               auto& p = detail::parent(self, 0);
                               p.ensure_grad();
                               for (std::size_t i = 0; i < src.size(); ++i) p.grad[src[i]] += self.grad[i];
                             });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects rank 2");
  return permute(a, {1, 0});
}

/// Concatenation along `axis`; all other extents must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts.front().rank();
  const int ax = detail::normalize_axis(axis, r, "concat");
  Shape shape = parts.front().shape();
  shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    const Index len = s[ax];
    s[ax] = 0;
    Shape ref = shape;
    ref[ax] = 0;
    if (s != ref) throw ShapeError("concat: extents disagree off the concat axis");
    shape[ax] += len;
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[i];
  for (int i = ax + 1; i < r; ++i) inner *= shape[i];
  std::vector<Index> lens;
  for (const auto& p : parts) lens.push_back(p.dim(ax));
  const Index total = shape[ax];
  std::vector<Scalar> out(static_cast<std::size_t>(numel(shape)));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Scalar* x = parts[k].data();
    for (Index o = 0; o < outer; ++o)
      std::copy_n(x + o * lens[k] * inner, lens[k] * inner, out.begin() + (o * total + offset) * inner);
    offset += lens[k];
  }
  return make_result<Scalar>("concat", std::move(shape), std::move(out), parts,
                             [outer, inner, total, lens](Node<Scalar>& self) {
                               Index off = 0;
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 auto& p = detail::parent(self, k);
                                 if (p.requires_grad) {
                                   p.ensure_grad();
                                   for (Index o = 0; o < outer; ++o)
                                     for (Index j = 0; j < lens[k] * inner; ++j)
                                       p.grad[o * lens[k] * inner + j] += self.grad[(o * total + off) * inner + j];
                                 }
                                 off += lens[k];
                               }
                             });
}

/// Contiguous range [start, start + length) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, int axis, Index start, Index length) {
  const int ax = detail::normalize_axis(axis, a.rank(), "slice");
  if (start < 0 || length < 0 || start + length > a.dim(ax)) throw ShapeError("slice: range out of bounds");
  Index outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.dim(i);
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const Index len = a.dim(ax);
  Shape shape = a.shape();
  shape[ax] = length;
  std::vector<Scalar> out(static_cast<std::size_t>(numel(shape)));
  for (Index o = 0; o < outer; ++o)
    std::copy_n(a.data() + (o * len + start) * inner, length * inner, out.begin() + o * length * inner);
  return make_result<Scalar>("slice", std::move(shape), std::move(out), {a},
                             [outer, inner, len, start, length](Node<Scalar>& self) {
                               auto& p = detail::parent(self, 0);
                               p.ensure_grad();
                               for (Index o = 0; o < outer; ++o)
                                 for (Index j = 0; j < length * inner; ++j)
                                   p.grad[(o * len + start) * inner + j] += self.grad[o * length * inner + j];
                             });
}

/// Rows of `a` (axis 0) selected by `index`.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& a, std::vector<Index> index) {
  if (a.rank() < 1) throw ShapeError("gather_rows: rank 0 input");
  const Index row = a.size() / std::max<Index>(a.dim(0), 1);
  Shape shape = a.shape();
  shape[0] = static_cast<Index>(index.size());
  std::vector<Scalar> out(static_cast<std::size_t>(numel(shape)));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.dim(0)) throw ShapeError("gather_rows: index out of range");
    std::copy_n(a.data() + index[i] * row, row, out.begin() + static_cast<Index>(i) * row);
  }
  return make_result<Scalar>("gather_rows", std::move(shape), std::move(out), {a},
                             [row, index = std::move(index)](Node<Scalar>& self) {
                               auto& p = detail::parent(self, 0);
                               p.ensure_grad();
                               for (std::size_t i = 0; i < index.size(); ++i)
                                 for (Index j = 0; j < row; ++j)
                                   p.grad[index[i] * row + j] += self.grad[static_cast<Index>(i) * row + j];
                             });
}

// ---------------------------------------------------------------------------
// Products

/// [m,k] x [k,n] -> [m,n]
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  detail::MapMatrix<Scalar>(out.data(), m, n).noalias() =
      detail::ConstMapMatrix<Scalar>(a.data(), m, k) * detail::ConstMapMatrix<Scalar>(b.data(), k, n);
  return make_result<Scalar>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    detail::ConstMapMatrix<Scalar> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::MapMatrix<Scalar>(pa.grad.data(), m, k).noalias() +=
          g * detail::ConstMapMatrix<Scalar>(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::MapMatrix<Scalar>(pb.grad.data(), k, n).noalias() +=
          detail::ConstMapMatrix<Scalar>(pa.value.data(), m, k).transpose() * g;
    }
  });
}

/// [m,k] x [n,k]ᵀ -> [m,n]
template <typename Scalar>
Tensor<Scalar> matmul_bt(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_bt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "ᵀ");
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  detail::MapMatrix<Scalar>(out.data(), m, n).noalias() =
      detail::ConstMapMatrix<Scalar>(a.data(), m, k) * detail::ConstMapMatrix<Scalar>(b.data(), n, k).transpose();
  return make_result<Scalar>("matmul_bt", {m, n}, std::move(out), {a, b}, [m, k, n](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    detail::ConstMapMatrix<Scalar> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::MapMatrix<Scalar>(pa.grad.data(), m, k).noalias() +=
          g * detail::ConstMapMatrix<Scalar>(pb.value.data(), n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::MapMatrix<Scalar>(pb.grad.data(), n, k).noalias() +=
          g.transpose() * detail::ConstMapMatrix<Scalar>(pa.value.data(), m, k);
    }
  });
}

/// Batched [B,m,k] x [B,k,n] -> [B,m,n]
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<Scalar> out(static_cast<std::size_t>(bs * m * n));
  for (Index i = 0; i < bs; ++i) {
    detail::MapMatrix<Scalar>(out.data() + i * m * n, m, n).noalias() =
        detail::ConstMapMatrix<Scalar>(a.data() + i * m * k, m, k) *
        detail::ConstMapMatrix<Scalar>(b.data() + i * k * n, k, n);
  }
  return make_result<Scalar>("bmm", {bs, m, n}, std::move(out), {a, b}, [bs, m, k, n](Node<Scalar>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    for (Index i = 0; i < bs; ++i) {
      detail::ConstMapMatrix<Scalar> g(self.grad.data() + i * m * n, m, n);
      if (pa.requires_grad) {
        detail::MapMatrix<Scalar>(pa.grad.data() + i * m * k, m, k).noalias() +=
            g * detail::ConstMapMatrix<Scalar>(pb.value.data() + i * k * n, k, n).transpose();
      }
      if (pb.requires_grad) {
        detail::MapMatrix<Scalar>(pb.grad.data() + i * k * n, k, n).noalias() +=
            detail::ConstMapMatrix<Scalar>(pa.value.data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
}

/// Mixes the channel axis of x[B, Cin, D] with w[Cout, Cin]:
/// out[b, o, d] = sum_c w[o, c] x[b, c, d]. The trailing axis is untouched,
/// so any linear map acting on it commutes with this op.
template <typename Scalar>
Tensor<Scalar> channel_mix(const Tensor<Scalar>& x, const Tensor<Scalar>& w) {
  if (x.rank() != 3 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("channel_mix: " + to_string(x.shape()) + " with weights " + to_string(w.shape()));
  }
  const Index bs = x.dim(0), cin = x.dim(1), d = x.dim(2), cout = w.dim(0);
  // Gather x into a [Cin, B*D] matrix so the product is one GEMM.
  auto gather = [bs, d](const Scalar* src, Index channels, Scalar* dst) {
    for (Index b = 0; b < bs; ++b)
      for (Index c = 0; c < channels; ++c)
        for (Index k = 0; k < d; ++k) dst[c * bs * d + b * d + k] = src[(b * channels + c) * d + k];
  };
  auto scatter_add = [bs, d](const Scalar* src, Index channels, Scalar* dst) {
    for (Index b = 0; b < bs; ++b)
      for (Index c = 0; c < channels; ++c)
        for (Index k = 0; k < d; ++k) dst[(b * channels + c) * d + k] += src[c * bs * d + b * d + k];
  };
  std::vector<Scalar> xt(static_cast<std::size_t>(cin * bs * d));
  gather(x.data(), cin, xt.data());
  detail::RowMatrix<Scalar> yt =
      detail::ConstMapMatrix<Scalar>(w.data(), cout, cin) * detail::ConstMapMatrix<Scalar>(xt.data(), cin, bs * d);
  std::vector<Scalar> out(static_cast<std::size_t>(bs * cout * d));
  for (Index b = 0; b < bs; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index k = 0; k < d; ++k) out[(b * cout + o) * d + k] = yt(o, b * d + k);
  return make_result<Scalar>(
      "channel_mix", {bs, cout, d}, std::move(out), {x, w},
      [bs, cin, d, cout, gather, scatter_add, xt = std::move(xt)](Node<Scalar>& self) {
        auto& px = detail::parent(self, 0);
        auto& pw = detail::parent(self, 1);
        std::vector<Scalar> gt(static_cast<std::size_t>(cout * bs * d));
        gather(self.grad.data(), cout, gt.data());
        detail::ConstMapMatrix<Scalar> g(gt.data(), cout, bs * d);
        if (pw.requires_grad) {
          pw.ensure_grad();
          detail::MapMatrix<Scalar>(pw.grad.data(), cout, cin).noalias() +=
              g * detail::ConstMapMatrix<Scalar>(xt.data(), cin, bs * d).transpose();
        }
        if (px.requires_grad) {
          px.ensure_grad();
          detail::RowMatrix<Scalar> gx = detail::ConstMapMatrix<Scalar>(pw.value.data(), cout, cin).transpose() * g;
          scatter_add(gx.data(), cin, px.grad.data());
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and attention helpers

/// Softmax over the last axis.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a) {
  const Index d = a.dim(-1);
  const Index rows = a.size() / d;
  std::vector<Scalar> out(a.values().size());
  for (Index r = 0; r < rows; ++r) {
    const Scalar* x = a.data() + r * d;
    Scalar* y = out.data() + r * d;
    const Scalar mx = *std::max_element(x, x + d);
    Scalar z = 0;
    for (Index j = 0; j < d; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (Index j = 0; j < d; ++j) y[j] /= z;
  }
  return make_result<Scalar>("softmax", a.shape(), std::move(out), {a}, [rows, d](Node<Scalar>& self) {
    auto& p = detail::parent(self, 0);
    p.ensure_grad();
    for (Index r = 0; r < rows; ++r) {
      const Scalar* y = self.value.data() + r * d;
      const Scalar* g = self.grad.data() + r * d;
      Scalar dot = 0;
      for (Index j = 0; j < d; ++j) dot += g[j] * y[j];
      for (Index j = 0; j < d; ++j) p.grad[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Layer normalization over the last axis with affine gamma/beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& a, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  const Index d = a.dim(-1);
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) throw ShapeError("layer_norm: affine shape");
  const Index rows = a.size() / d;
  std::vector<Scalar> xhat(a.values().size());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const Scalar* x = a.data() + r * d;
    Scalar mu = 0, var = 0;
    for (Index j = 0; j < d; ++j) mu += x[j];
    mu /= Scalar(d);
    for (Index j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= Scalar(d);
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    for (Index j = 0; j < d; ++j) xhat[r * d + j] = (x[j] - mu) * inv_std[r];
  }
  std::vector<Scalar> out(xhat.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xhat[i] * gamma.values()[i % d] + beta.values()[i % d];
  }
  return make_result<Scalar>(
      "layer_norm", a.shape(), std::move(out), {a, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Scalar>& self) {
        auto& px = detail::parent(self, 0);
        auto& pg = detail::parent(self, 1);
        auto& pb = detail::parent(self, 2);
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (Index r = 0; r < rows; ++r) {
          const Scalar* g = self.grad.data() + r * d;
          const Scalar* xh = xhat.data() + r * d;
          Scalar sum_gy = 0, sum_gy_xh = 0;
          for (Index j = 0; j < d; ++j) {
            const Scalar gy = g[j] * pg.value[j];
            sum_gy += gy;
            sum_gy_xh += gy * xh[j];
            if (pg.requires_grad) pg.grad[j] += g[j] * xh[j];
            if (pb.requires_grad) pb.grad[j] += g[j];
          }
          if (px.requires_grad) {
            for (Index j = 0; j < d; ++j) {
              const Scalar gy = g[j] * pg.value[j];
              px.grad[r * d + j] += inv_std[r] * (gy - sum_gy / Scalar(d) - xh[j] * sum_gy_xh / Scalar(d));
            }
          }
        }
      });
}

/// Mean binary cross-entropy between sigmoid(logits) and fixed 0/1 targets.
template <typename Scalar>
Tensor<Scalar> bce_with_logits(const Tensor<Scalar>& logits, std::vector<Scalar> targets,
                               std::vector<Scalar> weights = {}) {
  if (static_cast<Index>(targets.size()) != logits.size()) throw ShapeError("bce_with_logits: target count");
  if (weights.empty()) weights.assign(targets.size(), Scalar(1));
  Scalar total = 0, wsum = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Scalar x = logits.values()[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x * y
    total += weights[i] * (std::log1p(std::exp(-std::abs(x))) + std::max(x, Scalar(0)) - x * targets[i]);
    wsum += weights[i];
  }
  wsum = std::max(wsum, std::numeric_limits<Scalar>::min());
  return make_result<Scalar>("bce_with_logits", {}, {total / wsum}, {logits},
                             [targets = std::move(targets), weights = std::move(weights), wsum](Node<Scalar>& self) {
                               auto& p = detail::parent(self, 0);
                               p.ensure_grad();
                               for (std::size_t i = 0; i < targets.size(); ++i) {
                                 const Scalar x = p.value[i];
                                 const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-x));
                                 p.grad[i] += self.grad[0] * weights[i] * (s - targets[i]) / wsum;
                               }
                             });
}

// ---------------------------------------------------------------------------
// Layers

/// x[..., in] W[out, in]ᵀ + b[out]
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  const Index in = x.dim(-1);
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  const Index rows = x.size() / in;
  Tensor<Scalar> y = add_rowwise(matmul_bt(reshape(x, {rows, in}), w), b);
  lead.push_back(w.dim(0));
  return reshape(y, lead);
}

}  // namespace em3rf::tensor

#endif  // EM3RF_TENSOR_OPS_HPP
