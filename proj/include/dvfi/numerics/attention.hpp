#pragma once

#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "dvfi/numerics/ops.hpp"

namespace dvfi::nn {

/// Projection weights of one multi-head window attention layer.
/// Linear weights are stored [in, out].
template <typename S>
struct AttentionWeights {
  Tensor<S> qkv_weight;  // [D, 3D], column blocks q | k | v
  Tensor<S> qkv_bias;    // [3D]
  Tensor<S> proj_weight; // [D, D]
  Tensor<S> proj_bias;   // [D]
};

template <typename S>
AttentionWeights<S> attention_weights(const ParamStore<S>& params, const std::string& prefix) {
  return {params.at(prefix + ".qkv.weight"), params.at(prefix + ".qkv.bias"), params.at(prefix + ".proj.weight"),
          params.at(prefix + ".proj.bias")};
}

/// Additive logit mask value for positions outside the attended region.
template <typename S>
constexpr S masked_logit() {
  return S(-1e30);
}

/// Region mask for shifted windows: [num_windows, T, T] with 0 where both
/// tokens come from the same pre-roll region and masked_logit() elsewhere.
template <typename S>
Vec<S> shifted_window_mask(Index height, Index width, Index window, Index shift) {
  const Index nwh = height / window, nww = width / window, t = window * window;
  auto region = [&](Index y, Index x) {
    auto label = [&](Index v, Index extent) { return v < extent - window ? 0 : (v < extent - shift ? 1 : 2); };
    return label(y, height) * 3 + label(x, width);
  };
  Vec<S> mask(nwh * nww * t * t);
  for (Index wy = 0; wy < nwh; ++wy)
    for (Index wx = 0; wx < nww; ++wx) {
      const Index win = wy * nww + wx;
      for (Index a = 0; a < t; ++a)
        for (Index b = 0; b < t; ++b) {
          const int ra = region(wy * window + a / window, wx * window + a % window);
          const int rb = region(wy * window + b / window, wx * window + b % window);
          mask[(win * t + a) * t + b] = ra == rb ? S(0) : masked_logit<S>();
        }
    }
  return mask;
}

/// Multi-head self-attention restricted to non-overlapping windows of a
/// height x width token grid, optionally cyclically shifted by `shift`
/// (0 or window/2) with cross-region pairs masked out.
///
/// `x` is [N, height*width, D]; returns the same shape. If `probs` is given
/// it receives the attention probabilities [N*heads*num_windows, T, T].
template <typename S>
Tensor<S> window_attention(const Tensor<S>& x, Index height, Index width, Index window, Index shift, Index heads,
                           const AttentionWeights<S>& weights, Tensor<S>* probs = nullptr) {
  if (x.rank() != 3) throw ShapeError("window_attention: input must be [N,L,D], got " + to_string(x.shape()));
  const Index n = x.dim(0), len = x.dim(1), d = x.dim(2);
  if (len != height * width)
    throw ShapeError("window_attention: L=" + std::to_string(len) + " != " + std::to_string(height) + "x" +
                     std::to_string(width));
  if (window < 1 || height % window != 0 || width % window != 0)
    throw ShapeError("window_attention: grid " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by window " + std::to_string(window));
  if (shift != 0 && (window % 2 != 0 || shift != window / 2))
    throw ValidationError("window_attention: shift must be 0 or window/2");
  if (heads < 1 || d % heads != 0)
    throw ShapeError("window_attention: dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));

  const Index nwh = height / window, nww = width / window, nw = nwh * nww, t = window * window, hd = d / heads;

  // roll by -shift and partition into windows: [N*nW, T, D]
  auto part = std::make_shared<std::vector<Index>>(n * len * d);
  // rolled grid position of each original token, for the inverse map
  std::vector<Index> token_slot(len);
  {
    Index k = 0;
    for (Index b = 0; b < n; ++b)
      for (Index wy = 0; wy < nwh; ++wy)
        for (Index wx = 0; wx < nww; ++wx)
          for (Index ty = 0; ty < window; ++ty)
            for (Index tx = 0; tx < window; ++tx) {
              const Index sy = (wy * window + ty + shift) % height, sx = (wx * window + tx + shift) % width;
              if (b == 0) token_slot[sy * width + sx] = (wy * nww + wx) * t + ty * window + tx;
              for (Index e = 0; e < d; ++e) (*part)[k++] = (b * len + sy * width + sx) * d + e;
            }
  }
  Tensor<S> xw = gather(x, part, {n * nw, t, d}, "window_partition");
  Tensor<S> qkv = linear(xw, weights.qkv_weight, weights.qkv_bias); // [N*nW, T, 3D]

  // split heads, batch order (n, head, window) so the window mask repeats
  auto split = [&](Index which) {
    auto idx = std::make_shared<std::vector<Index>>(n * heads * nw * t * hd);
    Index k = 0;
    for (Index b = 0; b < n; ++b)
      for (Index hh = 0; hh < heads; ++hh)
        for (Index win = 0; win < nw; ++win)
          for (Index i = 0; i < t; ++i)
            for (Index e = 0; e < hd; ++e)
              (*idx)[k++] = ((b * nw + win) * t + i) * 3 * d + which * d + hh * hd + e;
    return gather(qkv, std::move(idx), {n * heads * nw, t, hd}, "split_heads");
  };
  Tensor<S> q = split(0), kt = split(1), v = split(2);

  Tensor<S> logits = scale(bmm(q, kt, true), S(1) / std::sqrt(S(hd)));
  std::shared_ptr<const Vec<S>> mask;
  if (shift > 0) mask = std::make_shared<const Vec<S>>(shifted_window_mask<S>(height, width, window, shift));
  Tensor<S> attn = softmax(logits, mask);
  if (probs) *probs = attn;
  Tensor<S> ctx = bmm(attn, v); // [N*heads*nW, T, hd]

  auto merge = std::make_shared<std::vector<Index>>(n * nw * t * d);
  {
    Index k = 0;
    for (Index b = 0; b < n; ++b)
      for (Index win = 0; win < nw; ++win)
        for (Index i = 0; i < t; ++i)
          for (Index hh = 0; hh < heads; ++hh)
            for (Index e = 0; e < hd; ++e) (*merge)[k++] = (((b * heads + hh) * nw + win) * t + i) * hd + e;
  }
  Tensor<S> y = linear(gather(ctx, merge, {n * nw, t, d}, "merge_heads"), weights.proj_weight, weights.proj_bias);

  auto unpart = std::make_shared<std::vector<Index>>(n * len * d);
  {
    Index k = 0;
    for (Index b = 0; b < n; ++b)
      for (Index p = 0; p < len; ++p)
        for (Index e = 0; e < d; ++e) (*unpart)[k++] = (b * nw * t + token_slot[p]) * d + e;
  }
  return gather(y, unpart, {n, len, d}, "window_reverse");
}

template <typename S>
Tensor<S> window_attention(const Tensor<S>& x, Index height, Index width, Index window, Index shift, Index heads,
                           const ParamStore<S>& params, const std::string& prefix) {
  return window_attention(x, height, width, window, shift, heads, attention_weights(params, prefix));
}

/// [N, H*W, C] tokens -> [N, C, H, W]
template <typename S>
Tensor<S> tokens_to_nchw(const Tensor<S>& x, Index height, Index width) {
  return permute(reshape(x, {x.dim(0), height, width, x.dim(2)}), {0, 3, 1, 2});
}

/// [N, C, H, W] -> [N, H*W, C] tokens
template <typename S>
Tensor<S> nchw_to_tokens(const Tensor<S>& x) {
  return reshape(permute(x, {0, 2, 3, 1}), {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

/// 2x2 spatial-to-channel downsample followed by layer norm and a bias-free
/// projection 4C -> 2C. Input [N, H*W, C], output [N, H*W/4, 2C].
template <typename S>
Tensor<S> patch_merging(const Tensor<S>& x, Index height, Index width, const Tensor<S>& norm_gamma,
                        const Tensor<S>& norm_beta, const Tensor<S>& reduction) {
  if (x.rank() != 3 || x.dim(1) != height * width)
    throw ShapeError("patch_merging: input " + to_string(x.shape()) + " is not a " + std::to_string(height) + "x" +
                     std::to_string(width) + " token grid");
  if (height % 2 != 0 || width % 2 != 0) throw ShapeError("patch_merging: odd grid size");
  const Index n = x.dim(0), c = x.dim(2), h2 = height / 2, w2 = width / 2;
  // channel blocks: (0,0), (1,0), (0,1), (1,1) as (dy, dx)
  constexpr Index dys[4] = {0, 1, 0, 1};
  constexpr Index dxs[4] = {0, 0, 1, 1};
  auto idx = std::make_shared<std::vector<Index>>(x.numel());
  Index k = 0;
  for (Index b = 0; b < n; ++b)
    for (Index y = 0; y < h2; ++y)
      for (Index xx = 0; xx < w2; ++xx)
        for (int q = 0; q < 4; ++q)
          for (Index e = 0; e < c; ++e)
            (*idx)[k++] = (b * height * width + (2 * y + dys[q]) * width + 2 * xx + dxs[q]) * c + e;
  Tensor<S> merged = gather(x, std::move(idx), {n, h2 * w2, 4 * c}, "patch_merge");
  return linear(layer_norm(merged, norm_gamma, norm_beta), reduction);
}

} // namespace dvfi::nn
