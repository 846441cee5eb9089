#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "dvfi/numerics/ops.hpp"

namespace dvfi::nn {

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + to_string(s));
}

/// Four-corner bilinear stencil with zero outside [0,H)x[0,W).
/// `index` is -1 for corners outside the image.
template <typename S>
struct BilinearTap {
  std::array<Index, 4> index;
  std::array<S, 4> weight;
  std::array<S, 4> d_dy;
  std::array<S, 4> d_dx;

  BilinearTap(S y, S x, Index height, Index width) {
    const S fy = std::floor(y), fx = std::floor(x);
    const S ly = y - fy, lx = x - fx;
    const auto y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
    const Index ys[4] = {y0, y0, y0 + 1, y0 + 1};
    const Index xs[4] = {x0, x0 + 1, x0, x0 + 1};
    weight = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
    d_dy = {-(1 - lx), -lx, 1 - lx, lx};
    d_dx = {-(1 - ly), 1 - ly, -ly, ly};
    for (int k = 0; k < 4; ++k) {
      const bool inside = ys[k] >= 0 && ys[k] < height && xs[k] >= 0 && xs[k] < width;
      index[k] = inside ? ys[k] * width + xs[k] : -1;
    }
  }

  S sample(const S* plane) const {
    S v = 0;
    for (int k = 0; k < 4; ++k)
      if (index[k] >= 0) v += weight[k] * plane[index[k]];
    return v;
  }
  // d sample / d y and d sample / d x
  std::pair<S, S> slope(const S* plane) const {
    S gy = 0, gx = 0;
    for (int k = 0; k < 4; ++k)
      if (index[k] >= 0) {
        gy += d_dy[k] * plane[index[k]];
        gx += d_dx[k] * plane[index[k]];
      }
    return {gy, gx};
  }
  void scatter(S* plane_grad, S g) const {
    for (int k = 0; k < 4; ++k)
      if (index[k] >= 0) plane_grad[index[k]] += weight[k] * g;
  }
};

} // namespace detail

/// Zero-padded 2-D cross-correlation, NCHW. `bias` may be undefined.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias = {},
                 Index stride = 1, Index padding = 0) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(weight.shape(), 4, "conv2d", "weight");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c)
    throw ShapeError("conv2d: input channels " + std::to_string(c) + " != weight channels " +
                     std::to_string(weight.dim(1)));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (kh > h + 2 * padding) throw ShapeError("conv2d: kernel height " + std::to_string(kh) + " exceeds padded height");
  if (kw > w + 2 * padding) throw ShapeError("conv2d: kernel width " + std::to_string(kw) + " exceeds padded width");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != o) throw ShapeError("conv2d: bias must have " + std::to_string(o) + " entries");

  const Index ho = (h + 2 * padding - kh) / stride + 1, wo = (w + 2 * padding - kw) / stride + 1;
  const Index rows = c * kh * kw, cols = ho * wo;

  // im2col index map into a single image (-1 = padding)
  auto cidx = std::make_shared<std::vector<Index>>(rows * cols);
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < kh; ++i)
      for (Index j = 0; j < kw; ++j) {
        const Index r = (ci * kh + i) * kw + j;
        for (Index y = 0; y < ho; ++y)
          for (Index x = 0; x < wo; ++x) {
            const Index iy = y * stride - padding + i, ix = x * stride - padding + j;
            (*cidx)[r * cols + y * wo + x] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? (ci * h + iy) * w + ix : -1;
          }
      }
  const Index plane = c * h * w;
  auto im2col = [cidx, rows, cols, plane](const Vec<S>& in, Index b) {
    detail::RowMat<S> m(rows, cols);
    const S* src = in.data() + b * plane;
    S* dst = m.data();
    for (Index k = 0; k < rows * cols; ++k) dst[k] = (*cidx)[k] < 0 ? S(0) : src[(*cidx)[k]];
    return m;
  };

  Vec<S> out(n * o * cols);
  detail::ConstMapMat<S> wm(weight.value().data(), o, rows);
  for (Index b = 0; b < n; ++b) {
    detail::MapMat<S> ob(out.data() + b * o * cols, o, cols);
    ob.noalias() = wm * im2col(input.value(), b);
    if (has_bias) ob.colwise() += bias.value().matrix();
  }

  std::vector<Tensor<S>> inputs{input, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<S>(
      "conv2d", {n, o, ho, wo}, std::move(out), std::move(inputs),
      [=, xv = input.value(), wv = weight.value()](const Node<S>& self) {
        detail::ConstMapMat<S> wm(wv.data(), o, rows);
        Node<S>& px = *self.parents[0];
        Node<S>& pw = *self.parents[1];
        Vec<S> gx = px.requires_grad ? Vec<S>::Zero(n * plane) : Vec<S>();
        Vec<S> gw = pw.requires_grad ? Vec<S>::Zero(o * rows) : Vec<S>();
        Vec<S> gb = Vec<S>::Zero(o);
        for (Index b = 0; b < n; ++b) {
          detail::ConstMapMat<S> g(self.grad.data() + b * o * cols, o, cols);
          if (pw.requires_grad)
            detail::MapMat<S>(gw.data(), o, rows).noalias() += g * im2col(xv, b).transpose();
          if (px.requires_grad) {
            detail::RowMat<S> gcol = wm.transpose() * g;
            S* dst = gx.data() + b * plane;
            const S* gc = gcol.data();
            for (Index k = 0; k < rows * cols; ++k)
              if ((*cidx)[k] >= 0) dst[(*cidx)[k]] += gc[k];
          }
          if (has_bias) gb += g.rowwise().sum().array();
        }
        px.accumulate(gx);
        pw.accumulate(gw);
        if (has_bias) self.parents[2]->accumulate(gb);
      });
}

/// [N, C*r*r, H, W] -> [N, C, H*r, W*r] with
/// out(n, c, h*r+i, w*r+j) = in(n, c*r*r + i*r + j, h, w).
template <typename S>
Tensor<S> pixel_shuffle(const Tensor<S>& input, Index r) {
  detail::require_rank(input.shape(), 4, "pixel_shuffle", "input");
  if (r < 1) throw ShapeError("pixel_shuffle: factor must be >= 1");
  const Index n = input.dim(0), cr = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (cr % (r * r) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by " +
                     std::to_string(r * r));
  const Index c = cr / (r * r);
  auto idx = std::make_shared<std::vector<Index>>(input.numel());
  Index k = 0;
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h * r; ++y)
        for (Index x = 0; x < w * r; ++x) {
          const Index src_c = ch * r * r + (y % r) * r + (x % r);
          (*idx)[k++] = ((b * cr + src_c) * h + y / r) * w + x / r;
        }
  return gather(input, std::move(idx), {n, c, h * r, w * r}, "pixel_shuffle");
}

/// Inverse rearrangement of pixel_shuffle.
template <typename S>
Tensor<S> pixel_unshuffle(const Tensor<S>& input, Index r) {
  detail::require_rank(input.shape(), 4, "pixel_unshuffle", "input");
  const Index n = input.dim(0), c = input.dim(1), hr = input.dim(2), wr = input.dim(3);
  if (r < 1 || hr % r != 0 || wr % r != 0)
    throw ShapeError("pixel_unshuffle: spatial size not divisible by " + std::to_string(r));
  const Index h = hr / r, w = wr / r;
  auto idx = std::make_shared<std::vector<Index>>(input.numel());
  Index k = 0;
  for (Index b = 0; b < n; ++b)
    for (Index oc = 0; oc < c * r * r; ++oc)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const Index ch = oc / (r * r), i = (oc % (r * r)) / r, j = oc % r;
          (*idx)[k++] = ((b * c + ch) * hr + y * r + i) * wr + x * r + j;
        }
  return gather(input, std::move(idx), {n, c * r * r, h, w}, "pixel_unshuffle");
}

/// Nearest-neighbour spatial upsampling by an integer factor.
template <typename S>
Tensor<S> upsample_nearest(const Tensor<S>& input, Index r) {
  detail::require_rank(input.shape(), 4, "upsample_nearest", "input");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  auto idx = std::make_shared<std::vector<Index>>(n * c * h * r * w * r);
  Index k = 0;
  for (Index p = 0; p < n * c; ++p)
    for (Index y = 0; y < h * r; ++y)
      for (Index x = 0; x < w * r; ++x) (*idx)[k++] = (p * h + y / r) * w + x / r;
  return gather(input, std::move(idx), {n, c, h * r, w * r}, "upsample_nearest");
}

/// Samples `input` [N,C,H,W] at pixel coordinates `grid` [N,Ho,Wo,2] (x, y),
/// bilinearly, with zero outside the image.
template <typename S>
Tensor<S> bilinear_sample(const Tensor<S>& input, const Tensor<S>& grid) {
  detail::require_rank(input.shape(), 4, "bilinear_sample", "input");
  detail::require_rank(grid.shape(), 4, "bilinear_sample", "grid");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (grid.dim(0) != n || grid.dim(3) != 2)
    throw ShapeError("bilinear_sample: grid must be [N,Ho,Wo,2], got " + to_string(grid.shape()));
  const Index ho = grid.dim(1), wo = grid.dim(2), pts = ho * wo;
  Vec<S> out(n * c * pts);
  const Vec<S>& iv = input.value();
  const Vec<S>& gv = grid.value();
  for (Index b = 0; b < n; ++b)
    for (Index p = 0; p < pts; ++p) {
      const detail::BilinearTap<S> tap(gv[(b * pts + p) * 2 + 1], gv[(b * pts + p) * 2], h, w);
      for (Index ch = 0; ch < c; ++ch) out[(b * c + ch) * pts + p] = tap.sample(iv.data() + (b * c + ch) * h * w);
    }
  return detail::make_op<S>(
      "bilinear_sample", {n, c, ho, wo}, std::move(out), {input, grid},
      [=](const Node<S>& self) {
        Node<S>& pi = *self.parents[0];
        Node<S>& pg = *self.parents[1];
        Vec<S> gi = Vec<S>::Zero(n * c * h * w), gg = Vec<S>::Zero(n * pts * 2);
        for (Index b = 0; b < n; ++b)
          for (Index p = 0; p < pts; ++p) {
            const detail::BilinearTap<S> tap(gv[(b * pts + p) * 2 + 1], gv[(b * pts + p) * 2], h, w);
            for (Index ch = 0; ch < c; ++ch) {
              const S g = self.grad[(b * c + ch) * pts + p];
              const Index plane = (b * c + ch) * h * w;
              tap.scatter(gi.data() + plane, g);
              const auto [sy, sx] = tap.slope(iv.data() + plane);
              gg[(b * pts + p) * 2] += g * sx;
              gg[(b * pts + p) * 2 + 1] += g * sy;
            }
          }
        pi.accumulate(gi);
        pg.accumulate(gg);
      });
}

/// Deformable convolution, stride 1, "same" output size. Tap k = i*kw + j
/// of output position (h, w) samples the input at
/// (h + i - kh/2 + dy, w + j - kw/2 + dx) where dx = offsets(n, 2k, h, w)
/// and dy = offsets(n, 2k+1, h, w).
template <typename S>
Tensor<S> deformable_conv2d(const Tensor<S>& input, const Tensor<S>& offsets, const Tensor<S>& weight,
                            const Tensor<S>& bias = {}) {
  detail::require_rank(input.shape(), 4, "deformable_conv2d", "input");
  detail::require_rank(offsets.shape(), 4, "deformable_conv2d", "offsets");
  detail::require_rank(weight.shape(), 4, "deformable_conv2d", "weight");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3), taps = kh * kw;
  if (weight.dim(1) != c)
    throw ShapeError("deformable_conv2d: input channels " + std::to_string(c) + " != weight channels " +
                     std::to_string(weight.dim(1)));
  if (offsets.dim(1) != 2 * taps)
    throw ShapeError("deformable_conv2d: offsets need " + std::to_string(2 * taps) + " channels, got " +
                     std::to_string(offsets.dim(1)));
  if (offsets.dim(0) != n || offsets.dim(2) != h || offsets.dim(3) != w)
    throw ShapeError("deformable_conv2d: offsets spatial shape " + to_string(offsets.shape()) +
                     " does not match input " + to_string(input.shape()));
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != o) throw ShapeError("deformable_conv2d: bias must have " + std::to_string(o) + " entries");

  const Index hw = h * w, rows = c * taps;
  auto make_taps = [=](const Vec<S>& off, Index b) {
    std::vector<detail::BilinearTap<S>> t;
    t.reserve(taps * hw);
    for (Index k = 0; k < taps; ++k) {
      const Index i = k / kw, j = k % kw;
      const S* dx = off.data() + (b * 2 * taps + 2 * k) * hw;
      const S* dy = dx + hw;
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
          t.emplace_back(S(y + i - kh / 2) + dy[y * w + x], S(x + j - kw / 2) + dx[y * w + x], h, w);
    }
    return t;
  };
  auto columns = [=](const Vec<S>& in, const std::vector<detail::BilinearTap<S>>& t, Index b) {
    detail::RowMat<S> m(rows, hw);
    for (Index ch = 0; ch < c; ++ch) {
      const S* plane = in.data() + (b * c + ch) * hw;
      for (Index k = 0; k < taps; ++k)
        for (Index p = 0; p < hw; ++p) m(ch * taps + k, p) = t[k * hw + p].sample(plane);
    }
    return m;
  };

  Vec<S> out(n * o * hw);
  detail::ConstMapMat<S> wm(weight.value().data(), o, rows);
  for (Index b = 0; b < n; ++b) {
    detail::MapMat<S> ob(out.data() + b * o * hw, o, hw);
    ob.noalias() = wm * columns(input.value(), make_taps(offsets.value(), b), b);
    if (has_bias) ob.colwise() += bias.value().matrix();
  }

  std::vector<Tensor<S>> inputs{input, offsets, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_op<S>(
      "deformable_conv2d", {n, o, h, w}, std::move(out), std::move(inputs),
      [=, xv = input.value(), ov = offsets.value(), wv = weight.value()](const Node<S>& self) {
        detail::ConstMapMat<S> wm(wv.data(), o, rows);
        Node<S>& px = *self.parents[0];
        Node<S>& po = *self.parents[1];
        Node<S>& pw = *self.parents[2];
        Vec<S> gx = Vec<S>::Zero(n * c * hw), go = Vec<S>::Zero(n * 2 * taps * hw);
        Vec<S> gw = Vec<S>::Zero(o * rows), gb = Vec<S>::Zero(o);
        for (Index b = 0; b < n; ++b) {
          const auto t = make_taps(ov, b);
          detail::ConstMapMat<S> g(self.grad.data() + b * o * hw, o, hw);
          if (pw.requires_grad)
            detail::MapMat<S>(gw.data(), o, rows).noalias() += g * columns(xv, t, b).transpose();
          if (has_bias) gb += g.rowwise().sum().array();
          if (!px.requires_grad && !po.requires_grad) continue;
          detail::RowMat<S> gcol = wm.transpose() * g;
          for (Index ch = 0; ch < c; ++ch) {
            const Index plane = (b * c + ch) * hw;
            for (Index k = 0; k < taps; ++k)
              for (Index p = 0; p < hw; ++p) {
                const S gv = gcol(ch * taps + k, p);
                const auto& tap = t[k * hw + p];
                tap.scatter(gx.data() + plane, gv);
                const auto [sy, sx] = tap.slope(xv.data() + plane);
                go[(b * 2 * taps + 2 * k) * hw + p] += gv * sx;
                go[(b * 2 * taps + 2 * k + 1) * hw + p] += gv * sy;
              }
          }
        }
        px.accumulate(gx);
        po.accumulate(go);
        pw.accumulate(gw);
        if (has_bias) self.parents[3]->accumulate(gb);
      });
}

} // namespace dvfi::nn
