#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "dvfi/decision.hpp"
#include "dvfi/image.hpp"

namespace dvfi {

/// Pixelwise average of the two frames, rounded half up.
Image interpolate_fast(const Image& frame0, const Image& frame1);

struct BlockMatchConfig {
  int block = 16;
  /// Bound on each component of the symmetric half-vector, so motions of
  /// up to 2*search pixels between the outer frames are representable.
  int search = 12;
};

struct InterpolationResult {
  Image frame;
  bool fell_back = false; // frames smaller than a block: fast blend used
};

/// Bidirectional block matching on the middle-frame grid: for each block,
/// the half-vector d minimising SAD(frame0(p - d), frame1(p + d)) is chosen
/// (ties: smaller |d|, then row-major order), and the block is compensated
/// as the average of both fetches. Blocks overlap by half and are blended
/// with raised-cosine weights.
InterpolationResult interpolate_accurate(const Image& frame0, const Image& frame1, const BlockMatchConfig& cfg = {});

/// Rolling latency record of one backend.
class BackendProfile {
public:
  BackendProfile(std::string name, BackendKind kind) : name_(std::move(name)), kind_(kind) {}

  const std::string& name() const { return name_; }
  BackendKind kind() const { return kind_; }

  void record(double seconds);
  std::vector<double> samples() const;
  /// Mean of recorded samples; 0 before the first call.
  double measured_latency() const;

private:
  std::string name_;
  BackendKind kind_;
  mutable std::mutex mutex_;
  std::vector<double> samples_;
};

using InterpolateFn = std::function<Image(const Image&, const Image&)>;

class Backend {
public:
  Backend(std::string name, BackendKind kind, InterpolateFn fn)
      : fn_(std::move(fn)), profile_(std::move(name), kind) {}

  const std::string& name() const { return profile_.name(); }
  BackendKind kind() const { return profile_.kind(); }
  Image operator()(const Image& f0, const Image& f1) const { return fn_(f0, f1); }
  BackendProfile& profile() { return profile_; }
  const BackendProfile& profile() const { return profile_; }

private:
  InterpolateFn fn_;
  BackendProfile profile_;
};

/// Wall-clock seconds of one interpolation call, recorded into the
/// backend's profile. The interpolated frame is stored in `out` if given.
double measure_latency(Backend& backend, const Image& frame0, const Image& frame1, Image* out = nullptr);

/// Backends addressable by name.
class BackendRegistry {
public:
  Backend& add(std::string name, BackendKind kind, InterpolateFn fn);
  Backend& get(const std::string& name);
  bool contains(const std::string& name) const { return backends_.count(name) > 0; }
  std::vector<std::string> names() const;

  /// Registry with "blend" (fast) and "blockmatch" (accurate).
  static BackendRegistry with_defaults(const BlockMatchConfig& cfg = {});

private:
  std::map<std::string, std::unique_ptr<Backend>> backends_;
};

} // namespace dvfi
