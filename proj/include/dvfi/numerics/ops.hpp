#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "dvfi/numerics/tensor.hpp"

namespace dvfi::nn {

namespace detail {

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;

template <typename S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;

} // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  return detail::make_op<S>("add", a.shape(), a.value() + b.value(), {a, b},
                            [](const Node<S>& self) {
                              self.parents[0]->accumulate(self.grad);
                              self.parents[1]->accumulate(self.grad);
                            });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  return detail::make_op<S>("sub", a.shape(), a.value() - b.value(), {a, b},
                            [](const Node<S>& self) {
                              self.parents[0]->accumulate(self.grad);
                              self.parents[1]->accumulate(-self.grad);
                            });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  return detail::make_op<S>("mul", a.shape(), a.value() * b.value(), {a, b},
                            [av = a.value(), bv = b.value()](const Node<S>& self) {
                              self.parents[0]->accumulate(self.grad * bv);
                              self.parents[1]->accumulate(self.grad * av);
                            });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "div");
  return detail::make_op<S>("div", a.shape(), a.value() / b.value(), {a, b},
                            [av = a.value(), bv = b.value()](const Node<S>& self) {
                              self.parents[0]->accumulate(self.grad / bv);
                              self.parents[1]->accumulate(-self.grad * av / bv.square());
                            });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <typename S>
Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  return detail::make_op<S>("scale", a.shape(), a.value() * c, {a},
                            [c](const Node<S>& self) { self.parents[0]->accumulate(self.grad * c); });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return detail::make_op<S>("add_scalar", a.shape(), a.value() + c, {a},
                            [](const Node<S>& self) { self.parents[0]->accumulate(self.grad); });
}

/// |x| with subgradient 0 at the kink.
template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  Vec<S> sign = a.value().sign();
  return detail::make_op<S>("abs", a.shape(), a.value().abs(), {a},
                            [sign](const Node<S>& self) { self.parents[0]->accumulate(self.grad * sign); });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  Vec<S> mask = (a.value() > S(0)).template cast<S>();
  return detail::make_op<S>("relu", a.shape(), a.value() * mask, {a},
                            [mask](const Node<S>& self) { self.parents[0]->accumulate(self.grad * mask); });
}

/// Exact (erf) GELU.
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  const S inv_sqrt2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  const Vec<S>& x = a.value();
  Vec<S> cdf = (x * inv_sqrt2).unaryExpr([](S v) { return S(0.5) * (S(1) + std::erf(v)); });
  Vec<S> dydx = cdf + x * inv_sqrt2pi * (S(-0.5) * x.square()).exp();
  return detail::make_op<S>("gelu", a.shape(), x * cdf, {a},
                            [dydx](const Node<S>& self) { self.parents[0]->accumulate(self.grad * dydx); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Vec<S> y = S(1) / (S(1) + (-a.value()).exp());
  Vec<S> dydx = y * (S(1) - y);
  return detail::make_op<S>("sigmoid", a.shape(), y, {a},
                            [dydx](const Node<S>& self) { self.parents[0]->accumulate(self.grad * dydx); });
}

// ---------------------------------------------------------------- reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  const Index n = a.numel();
  return detail::make_op<S>("sum", {1}, Vec<S>::Constant(1, a.value().sum()), {a},
                            [n](const Node<S>& self) {
                              self.parents[0]->accumulate(Vec<S>::Constant(n, self.grad[0]));
                            });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const Index n = a.numel();
  return detail::make_op<S>("mean", {1}, Vec<S>::Constant(1, a.value().mean()), {a},
                            [n](const Node<S>& self) {
                              self.parents[0]->accumulate(Vec<S>::Constant(n, self.grad[0] / S(n)));
                            });
}

// ---------------------------------------------------------------- layout

/// Same values under a new shape.
template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  return detail::make_op<S>("reshape", std::move(shape), a.value(), {a},
                            [](const Node<S>& self) { self.parents[0]->accumulate(self.grad); });
}

/// out[i] = in[indices[i]], or 0 where indices[i] < 0. Backward scatter-adds,
/// so repeated indices (upsampling) are fine.
template <typename S>
Tensor<S> gather(const Tensor<S>& a, std::shared_ptr<const std::vector<Index>> indices, Shape shape,
                 std::string op = "gather") {
  const auto& idx = *indices;
  if (numel(shape) != static_cast<Index>(idx.size()))
    throw ShapeError(op + ": index count " + std::to_string(idx.size()) + " does not fill shape " +
                     to_string(shape));
  const Vec<S>& in = a.value();
  Vec<S> out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= in.size()) throw ShapeError(op + ": index out of range");
    out[static_cast<Index>(i)] = idx[i] < 0 ? S(0) : in[idx[i]];
  }
  return detail::make_op<S>(std::move(op), std::move(shape), std::move(out), {a},
                            [indices](const Node<S>& self) {
                              Node<S>& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              if (p.grad.size() == 0) p.grad = Vec<S>::Zero(p.value.size());
                              const auto& ix = *indices;
                              for (std::size_t i = 0; i < ix.size(); ++i)
                                if (ix[i] >= 0) p.grad[ix[i]] += self.grad[static_cast<Index>(i)];
                            });
}

/// General axis permutation.
template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) throw ShapeError("permute: rank mismatch");
  Shape out(in.size());
  std::vector<Index> in_stride(in.size(), 1);
  for (int i = static_cast<int>(in.size()) - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * in[i + 1];
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = in.at(perm[i]);
  auto idx = std::make_shared<std::vector<Index>>(numel(out));
  std::vector<Index> coord(out.size(), 0);
  for (Index flat = 0; flat < static_cast<Index>(idx->size()); ++flat) {
    Index src = 0;
    for (std::size_t d = 0; d < out.size(); ++d) src += coord[d] * in_stride[perm[d]];
    (*idx)[flat] = src;
    for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
      if (++coord[d] < out[d]) break;
      coord[d] = 0;
    }
  }
  return gather(a, std::move(idx), std::move(out), "permute");
}

/// Concatenation along `axis` (default: channel axis of NCHW).
template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis = 1) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out = parts[0].shape();
  const auto ax = static_cast<std::size_t>(axis);
  if (ax >= out.size()) throw ShapeError("concat: axis out of range");
  out[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < out.size(); ++d)
      if (d != ax && p.dim(d) != out[d])
        throw ShapeError("concat: dimension " + std::to_string(d) + " mismatch (" +
                         std::to_string(p.dim(d)) + " vs " + std::to_string(out[d]) + ")");
    out[ax] += p.dim(ax);
  }
  Index outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= out[d];
  for (std::size_t d = ax + 1; d < out.size(); ++d) inner *= out[d];

  Vec<S> value(numel(out));
  std::vector<Index> widths;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(ax) * inner;
    for (Index o = 0; o < outer; ++o)
      value.segment(o * out[ax] * inner + offset, w) = p.value().segment(o * w, w);
    widths.push_back(w);
    offset += w;
  }
  const Index row = out[ax] * inner;
  return detail::make_op<S>("concat", out, std::move(value), parts,
                            [widths, outer, row](const Node<S>& self) {
                              Index off = 0;
                              for (std::size_t k = 0; k < widths.size(); ++k) {
                                Node<S>& p = *self.parents[k];
                                if (p.requires_grad) {
                                  Vec<S> g(outer * widths[k]);
                                  for (Index o = 0; o < outer; ++o)
                                    g.segment(o * widths[k], widths[k]) = self.grad.segment(o * row + off, widths[k]);
                                  p.accumulate(g);
                                }
                                off += widths[k];
                              }
                            });
}

// ---------------------------------------------------------------- linear algebra

/// [M,K] x [K,N] -> [M,N]
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<S> out(m * n);
  detail::MapMat<S>(out.data(), m, n).noalias() =
      detail::ConstMapMat<S>(a.value().data(), m, k) * detail::ConstMapMat<S>(b.value().data(), k, n);
  return detail::make_op<S>("matmul", {m, n}, std::move(out), {a, b},
                            [m, k, n, av = a.value(), bv = b.value()](const Node<S>& self) {
                              detail::ConstMapMat<S> g(self.grad.data(), m, n);
                              if (self.parents[0]->requires_grad) {
                                Vec<S> ga(m * k);
                                detail::MapMat<S>(ga.data(), m, k).noalias() =
                                    g * detail::ConstMapMat<S>(bv.data(), k, n).transpose();
                                self.parents[0]->accumulate(ga);
                              }
                              if (self.parents[1]->requires_grad) {
                                Vec<S> gb(k * n);
                                detail::MapMat<S>(gb.data(), k, n).noalias() =
                                    detail::ConstMapMat<S>(av.data(), m, k).transpose() * g;
                                self.parents[1]->accumulate(gb);
                              }
                            });
}

/// Batched product: [B,M,K] x [B,K,N] -> [B,M,N], or with `transpose_b`
/// [B,M,K] x [B,N,K]^T -> [B,M,N].
template <typename S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: batch mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != k)
    throw ShapeError("bmm: inner dimension mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index br = transpose_b ? n : k, bc = transpose_b ? k : n;
  Vec<S> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    detail::ConstMapMat<S> A(a.value().data() + i * m * k, m, k);
    detail::ConstMapMat<S> B(b.value().data() + i * br * bc, br, bc);
    detail::MapMat<S> C(out.data() + i * m * n, m, n);
    if (transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A * B;
  }
  return detail::make_op<S>(
      "bmm", {batch, m, n}, std::move(out), {a, b},
      [=, av = a.value(), bv = b.value()](const Node<S>& self) {
        const bool need_a = self.parents[0]->requires_grad, need_b = self.parents[1]->requires_grad;
        Vec<S> ga = need_a ? Vec<S>(batch * m * k) : Vec<S>();
        Vec<S> gb = need_b ? Vec<S>(batch * br * bc) : Vec<S>();
        for (Index i = 0; i < batch; ++i) {
          detail::ConstMapMat<S> G(self.grad.data() + i * m * n, m, n);
          detail::ConstMapMat<S> A(av.data() + i * m * k, m, k);
          detail::ConstMapMat<S> B(bv.data() + i * br * bc, br, bc);
          if (need_a) {
            detail::MapMat<S> GA(ga.data() + i * m * k, m, k);
            if (transpose_b) GA.noalias() = G * B;
            else GA.noalias() = G * B.transpose();
          }
          if (need_b) {
            detail::MapMat<S> GB(gb.data() + i * br * bc, br, bc);
            if (transpose_b) GB.noalias() = G.transpose() * A;
            else GB.noalias() = A.transpose() * G;
          }
        }
        if (need_a) self.parents[0]->accumulate(ga);
        if (need_b) self.parents[1]->accumulate(gb);
      });
}

/// x[..., in] W[in, out] + b[out]. `bias` may be undefined.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias = {}) {
  if (weight.rank() != 2 || x.shape().back() != weight.dim(0))
    throw ShapeError("linear: input features " + std::to_string(x.shape().back()) +
                     " do not match weight " + to_string(weight.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(1)))
    throw ShapeError("linear: bias shape " + to_string(bias.shape()));
  const Index in = weight.dim(0), out = weight.dim(1), rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out;
  Vec<S> value(rows * out);
  detail::MapMat<S> Y(value.data(), rows, out);
  Y.noalias() = detail::ConstMapMat<S>(x.value().data(), rows, in) *
                detail::ConstMapMat<S>(weight.value().data(), in, out);
  if (has_bias) Y.rowwise() += bias.value().matrix().transpose();
  std::vector<Tensor<S>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<S>(
      "linear", std::move(shape), std::move(value), std::move(inputs),
      [=, xv = x.value(), wv = weight.value()](const Node<S>& self) {
        detail::ConstMapMat<S> G(self.grad.data(), rows, out);
        if (self.parents[0]->requires_grad) {
          Vec<S> gx(rows * in);
          detail::MapMat<S>(gx.data(), rows, in).noalias() =
              G * detail::ConstMapMat<S>(wv.data(), in, out).transpose();
          self.parents[0]->accumulate(gx);
        }
        if (self.parents[1]->requires_grad) {
          Vec<S> gw(in * out);
          detail::MapMat<S>(gw.data(), in, out).noalias() =
              detail::ConstMapMat<S>(xv.data(), rows, in).transpose() * G;
          self.parents[1]->accumulate(gw);
        }
        if (has_bias && self.parents[2]->requires_grad)
          self.parents[2]->accumulate(G.colwise().sum().transpose().array());
      });
}

// ---------------------------------------------------------------- normalization

/// Softmax over the last axis. `mask`, if given, is added to the logits
/// before normalization and is broadcast by repeating it over the flat
/// value index (its size must divide the tensor size).
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, std::shared_ptr<const Vec<S>> mask = nullptr) {
  const Index cols = a.shape().back(), rows = a.numel() / cols;
  if (mask && (mask->size() == 0 || a.numel() % mask->size() != 0))
    throw ShapeError("softmax: mask size does not divide input size");
  Vec<S> y(a.numel());
  for (Index r = 0; r < rows; ++r) {
    auto row = y.segment(r * cols, cols);
    row = a.value().segment(r * cols, cols);
    if (mask) {
      const Index off = (r * cols) % mask->size();
      row += mask->segment(off, cols);
    }
    // scalar exp so masked logits underflow to exactly 0
    row = (row - row.maxCoeff()).unaryExpr([](S v) { return std::exp(v); });
    row /= row.sum();
  }
  return detail::make_op<S>("softmax", a.shape(), y, {a}, [rows, cols, y](const Node<S>& self) {
    Vec<S> g(rows * cols);
    for (Index r = 0; r < rows; ++r) {
      auto yr = y.segment(r * cols, cols);
      auto gr = self.grad.segment(r * cols, cols);
      g.segment(r * cols, cols) = yr * (gr - (gr * yr).sum());
    }
    self.parents[0]->accumulate(g);
  });
}

/// Normalizes each last-axis vector to zero mean and unit (biased)
/// variance, then applies the optional affine `gamma`, `beta`.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma = {}, const Tensor<S>& beta = {},
                     S eps = S(1e-5)) {
  const Index d = x.shape().back(), rows = x.numel() / d;
  const bool affine = gamma.defined();
  if (affine && (gamma.numel() != d || !beta.defined() || beta.numel() != d))
    throw ShapeError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  Vec<S> xhat(x.numel()), inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    auto xr = x.value().segment(r * d, d);
    const S mu = xr.mean();
    const S var = (xr - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    xhat.segment(r * d, d) = (xr - mu) * inv_std[r];
  }
  Vec<S> y = xhat;
  if (affine)
    for (Index r = 0; r < rows; ++r)
      y.segment(r * d, d) = xhat.segment(r * d, d) * gamma.value() + beta.value();
  std::vector<Tensor<S>> inputs{x};
  if (affine) {
    inputs.push_back(gamma);
    inputs.push_back(beta);
  }
  Vec<S> gv = affine ? gamma.value() : Vec<S>::Ones(d);
  return detail::make_op<S>(
      "layer_norm", x.shape(), std::move(y), std::move(inputs),
      [=](const Node<S>& self) {
        Vec<S> gx(rows * d), ggamma = Vec<S>::Zero(d), gbeta = Vec<S>::Zero(d);
        for (Index r = 0; r < rows; ++r) {
          auto gr = self.grad.segment(r * d, d);
          auto xh = xhat.segment(r * d, d);
          ggamma += gr * xh;
          gbeta += gr;
          Vec<S> gxh = gr * gv;
          gx.segment(r * d, d) = inv_std[r] * (gxh - gxh.mean() - xh * (gxh * xh).mean());
        }
        self.parents[0]->accumulate(gx);
        if (affine) {
          self.parents[1]->accumulate(ggamma);
          self.parents[2]->accumulate(gbeta);
        }
      });
}

} // namespace dvfi::nn
