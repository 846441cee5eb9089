#include "dvfi/backends.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numbers>
#include <numeric>

#include "dvfi/error.hpp"

namespace dvfi {

Image interpolate_fast(const Image& frame0, const Image& frame1) {
  require_same_geometry(frame0, frame1, "interpolate_fast");
  Image out = frame0;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<std::uint8_t>((frame0.data[i] + frame1.data[i] + 1) / 2);
  return out;
}

namespace {

struct Vector {
  int dy = 0, dx = 0;
};

int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

// SAD of frame0(p - d) against frame1(p + d) over the in-frame part of the
// block at (y0, x0). Fetches outside the frame are edge-clamped.
long block_sad(const Image& f0, const Image& f1, int y0, int x0, int block, Vector d, long bound) {
  const int ch = f0.channels;
  const int ys = std::max(y0, 0), ye = std::min(y0 + block, f0.height);
  const int xs = std::max(x0, 0), xe = std::min(x0 + block, f0.width);
  long sad = 0;
  for (int y = ys; y < ye; ++y) {
    const std::uint8_t* r0 = &f0.data[static_cast<std::size_t>(clampi(y - d.dy, 0, f0.height - 1)) * f0.width * ch];
    const std::uint8_t* r1 = &f1.data[static_cast<std::size_t>(clampi(y + d.dy, 0, f1.height - 1)) * f1.width * ch];
    for (int x = xs; x < xe; ++x) {
      const std::uint8_t* p0 = r0 + clampi(x - d.dx, 0, f0.width - 1) * ch;
      const std::uint8_t* p1 = r1 + clampi(x + d.dx, 0, f1.width - 1) * ch;
      for (int c = 0; c < ch; ++c) sad += std::abs(static_cast<int>(p0[c]) - static_cast<int>(p1[c]));
    }
    if (sad > bound) return sad;
  }
  return sad;
}

} // namespace

InterpolationResult interpolate_accurate(const Image& frame0, const Image& frame1, const BlockMatchConfig& cfg) {
  require_same_geometry(frame0, frame1, "interpolate_accurate");
  if (cfg.block < 2 || cfg.block % 2 != 0) throw ValidationError("block size must be even and >= 2");
  if (cfg.search < 0) throw ValidationError("search range must be >= 0");
  if (frame0.width < cfg.block || frame0.height < cfg.block) return {interpolate_fast(frame0, frame1), true};

  const int w = frame0.width, h = frame0.height, ch = frame0.channels, b = cfg.block, step = b / 2;
  std::vector<double> window(b);
  for (int i = 0; i < b; ++i) window[i] = std::pow(std::sin(std::numbers::pi * (i + 0.5) / b), 2);

  std::vector<double> acc(static_cast<std::size_t>(w) * h * ch, 0.0), wsum(static_cast<std::size_t>(w) * h, 0.0);
  for (int y0 = -step; y0 < h; y0 += step)
    for (int x0 = -step; x0 < w; x0 += step) {
      Vector best;
      long best_sad = std::numeric_limits<long>::max();
      int best_norm = 0;
      for (int dy = -cfg.search; dy <= cfg.search; ++dy)
        for (int dx = -cfg.search; dx <= cfg.search; ++dx) {
          const Vector d{dy, dx};
          const long sad = block_sad(frame0, frame1, y0, x0, b, d, best_sad);
          const int norm = dy * dy + dx * dx;
          if (sad < best_sad || (sad == best_sad && norm < best_norm)) {
            best = d;
            best_sad = sad;
            best_norm = norm;
          }
        }
      for (int y = std::max(y0, 0); y < std::min(y0 + b, h); ++y)
        for (int x = std::max(x0, 0); x < std::min(x0 + b, w); ++x) {
          const double wt = window[y - y0] * window[x - x0];
          const int ay = clampi(y - best.dy, 0, h - 1), ax = clampi(x - best.dx, 0, w - 1);
          const int by = clampi(y + best.dy, 0, h - 1), bx = clampi(x + best.dx, 0, w - 1);
          for (int c = 0; c < ch; ++c)
            acc[(static_cast<std::size_t>(y) * w + x) * ch + c] +=
                wt * 0.5 * (frame0.at(ax, ay, c) + frame1.at(bx, by, c));
          wsum[static_cast<std::size_t>(y) * w + x] += wt;
        }
    }

  Image out(w, h, ch);
  for (std::size_t p = 0; p < wsum.size(); ++p)
    for (int c = 0; c < ch; ++c)
      out.data[p * ch + c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc[p * ch + c] / wsum[p]), 0L, 255L));
  return {std::move(out), false};
}

void BackendProfile::record(double seconds) {
  std::lock_guard lock(mutex_);
  samples_.push_back(seconds);
}

std::vector<double> BackendProfile::samples() const {
  std::lock_guard lock(mutex_);
  return samples_;
}

double BackendProfile::measured_latency() const {
  std::lock_guard lock(mutex_);
  if (samples_.empty()) return 0.0;
  return std::accumulate(samples_.begin(), samples_.end(), 0.0) / static_cast<double>(samples_.size());
}

double measure_latency(Backend& backend, const Image& frame0, const Image& frame1, Image* out) {
  const auto start = std::chrono::steady_clock::now();
  Image result = backend(frame0, frame1);
  const auto stop = std::chrono::steady_clock::now();
  // steady_clock can report 0 for very fast calls on coarse clocks
  const double seconds = std::max(std::chrono::duration<double>(stop - start).count(), 1e-9);
  backend.profile().record(seconds);
  if (out) *out = std::move(result);
  return seconds;
}

Backend& BackendRegistry::add(std::string name, BackendKind kind, InterpolateFn fn) {
  if (backends_.count(name)) throw ValidationError("backend '" + name + "' already registered");
  auto backend = std::make_unique<Backend>(name, kind, std::move(fn));
  return *backends_.emplace(std::move(name), std::move(backend)).first->second;
}

Backend& BackendRegistry::get(const std::string& name) {
  auto it = backends_.find(name);
  if (it == backends_.end()) throw ValidationError("unknown backend '" + name + "'");
  return *it->second;
}

std::vector<std::string> BackendRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : backends_) out.push_back(name);
  return out;
}

BackendRegistry BackendRegistry::with_defaults(const BlockMatchConfig& cfg) {
  BackendRegistry reg;
  reg.add("blend", BackendKind::fast, interpolate_fast);
  reg.add("blockmatch", BackendKind::accurate,
          [cfg](const Image& a, const Image& b) { return interpolate_accurate(a, b, cfg).frame; });
  return reg;
}

} // namespace dvfi
