#pragma once

// Shared test helpers: seeded generators, a central finite-difference
// gradient checker, and slow reference implementations used as oracles.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dvfi/image.hpp"
#include "dvfi/numerics.hpp"

namespace dvfi::test {

using nn::Index;
using nn::Shape;
using T = nn::Tensor<double>;
using V = nn::Vec<double>;

struct Gen {
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = -1, double hi = 1) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  Index integer(Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }
  V vec(Index n, double lo = -1, double hi = 1) {
    V v(n);
    for (Index i = 0; i < n; ++i) v[i] = uniform(lo, hi);
    return v;
  }
  T tensor(Shape shape, bool requires_grad = true, double lo = -1, double hi = 1) {
    const Index n = nn::numel(shape);
    return T::from(std::move(shape), vec(n, lo, hi), requires_grad);
  }
  Image image(int w, int h, int channels = 3) {
    Image img(w, h, channels);
    for (auto& p : img.data) p = static_cast<std::uint8_t>(integer(0, 255));
    return img;
  }

  std::mt19937_64 rng;
};

// Max over inputs of |analytic - numeric|_inf / max(|numeric|_inf, 1e-8).
// The output is reduced with fixed random weights so every output element
// contributes to the checked gradient.
inline double gradient_error(const std::function<T(const std::vector<T>&)>& f, const std::vector<T>& inputs,
                             std::uint64_t seed = 99, double eps = 1e-5) {
  Gen gen(seed);
  T probe = f(inputs);
  const T weights = T::from(probe.shape(), gen.vec(probe.numel()), false);
  auto loss_of = [&](const std::vector<T>& xs) { return nn::sum(nn::mul(f(xs), weights)); };

  for (const auto& x : inputs) const_cast<T&>(x).zero_grad();
  nn::backward(loss_of(inputs));

  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    T& x = const_cast<T&>(inputs[k]);
    const V analytic = x.has_grad() ? x.grad() : V::Zero(x.numel());
    V numeric(x.numel());
    for (Index i = 0; i < x.numel(); ++i) {
      const double saved = x.value()[i];
      x.mutable_value()[i] = saved + eps;
      const double up = loss_of(inputs).item();
      x.mutable_value()[i] = saved - eps;
      const double down = loss_of(inputs).item();
      x.mutable_value()[i] = saved;
      numeric[i] = (up - down) / (2 * eps);
    }
    const double err = (analytic - numeric).abs().maxCoeff() / std::max(numeric.abs().maxCoeff(), 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

// Direct-summation convolution (zero padding, NCHW, weight [O,C,kh,kw]).
inline V naive_conv(const T& in, const T& w, const V* bias, Index stride, Index pad) {
  const Index n = in.dim(0), c = in.dim(1), h = in.dim(2), wd = in.dim(3);
  const Index o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  V out = V::Zero(n * o * ho * wo);
  for (Index b = 0; b < n; ++b)
    for (Index oc = 0; oc < o; ++oc)
      for (Index y = 0; y < ho; ++y)
        for (Index x = 0; x < wo; ++x) {
          double acc = bias ? (*bias)[oc] : 0.0;
          for (Index ic = 0; ic < c; ++ic)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j) {
                const Index yy = y * stride - pad + i, xx = x * stride - pad + j;
                if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
                acc += in.at({b, ic, yy, xx}) * w.at({oc, ic, i, j});
              }
          out[((b * o + oc) * ho + y) * wo + x] = acc;
        }
  return out;
}

// Bilinear value of channel plane (b, ch) at real (y, x), zero outside.
inline double bilinear_at(const T& in, Index b, Index ch, double y, double x) {
  const Index h = in.dim(2), w = in.dim(3);
  const double y0 = std::floor(y), x0 = std::floor(x);
  double acc = 0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const Index yy = static_cast<Index>(y0) + dy, xx = static_cast<Index>(x0) + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const double wy = dy ? y - y0 : 1 - (y - y0), wx = dx ? x - x0 : 1 - (x - x0);
      acc += wy * wx * in.at({b, ch, yy, xx});
    }
  return acc;
}

// Full-grid attention of token (b, p) over every token q, with pairs
// outside p's window masked. Two tokens share a window when their rolled
// coordinates fall in one window and rolling does not wrap between them.
inline V dense_window_attention(const T& x, Index h, Index w, Index win, Index shift, Index heads,
                                const nn::AttentionWeights<double>& aw) {
  const Index n = x.dim(0), len = x.dim(1), d = x.dim(2), hd = d / heads;
  auto proj = [&](const V& in, Index rows, const T& W, const T& bias, Index out_dim, Index col0) {
    V out(rows * out_dim);
    for (Index r = 0; r < rows; ++r)
      for (Index o = 0; o < out_dim; ++o) {
        double acc = bias.value()[col0 + o];
        for (Index i = 0; i < d; ++i) acc += in[r * d + i] * W.at({i, col0 + o});
        out[r * out_dim + o] = acc;
      }
    return out;
  };
  auto attends = [&](Index p, Index q) {
    const Index py = p / w, px = p % w, qy = q / w, qx = q % w;
    const Index rpy = (py - shift + h) % h, rpx = (px - shift + w) % w;
    const Index rqy = (qy - shift + h) % h, rqx = (qx - shift + w) % w;
    return rpy / win == rqy / win && rpx / win == rqx / win && rpy - rqy == py - qy && rpx - rqx == px - qx;
  };
  V out(n * len * d);
  for (Index b = 0; b < n; ++b) {
    const V xb = x.value().segment(b * len * d, len * d);
    const V q = proj(xb, len, aw.qkv_weight, aw.qkv_bias, d, 0);
    const V k = proj(xb, len, aw.qkv_weight, aw.qkv_bias, d, d);
    const V v = proj(xb, len, aw.qkv_weight, aw.qkv_bias, d, 2 * d);
    V ctx = V::Zero(len * d);
    for (Index hh = 0; hh < heads; ++hh)
      for (Index p = 0; p < len; ++p) {
        std::vector<double> logits(len, -INFINITY);
        double top = -INFINITY;
        for (Index s = 0; s < len; ++s) {
          if (!attends(p, s)) continue;
          double dot = 0;
          for (Index e = 0; e < hd; ++e) dot += q[p * d + hh * hd + e] * k[s * d + hh * hd + e];
          logits[s] = dot / std::sqrt(static_cast<double>(hd));
          top = std::max(top, logits[s]);
        }
        double z = 0;
        for (Index s = 0; s < len; ++s) z += std::isfinite(logits[s]) ? std::exp(logits[s] - top) : 0.0;
        for (Index s = 0; s < len; ++s) {
          if (!std::isfinite(logits[s])) continue;
          const double a = std::exp(logits[s] - top) / z;
          for (Index e = 0; e < hd; ++e) ctx[p * d + hh * hd + e] += a * v[s * d + hh * hd + e];
        }
      }
    out.segment(b * len * d, len * d) = proj(ctx, len, aw.proj_weight, aw.proj_bias, d, 0);
  }
  return out;
}

inline nn::AttentionWeights<double> random_attention(Gen& gen, Index d) {
  return {gen.tensor({d, 3 * d}), gen.tensor({3 * d}), gen.tensor({d, d}), gen.tensor({d})};
}

} // namespace dvfi::test
