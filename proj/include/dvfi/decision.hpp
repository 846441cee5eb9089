#pragma once

#include <memory>
#include <optional>
#include <string>

#include "dvfi/image.hpp"

namespace dvfi {

enum class BackendKind { fast, accurate };

inline const char* to_string(BackendKind k) { return k == BackendKind::fast ? "fast" : "accurate"; }

/// Outcome of routing one frame pair through the dynamic pipeline.
/// Invariant: chosen == fast exactly when predicted_score >= threshold,
/// unless the route was forced.
struct RoutingDecision {
  std::string pair_id;
  double predicted_score = 0;
  double threshold = 0;
  BackendKind chosen = BackendKind::fast;
  bool forced = false;
  std::shared_ptr<const Image> output;
  std::optional<double> psnr; // against the ground-truth middle, when known
  std::optional<double> ssim;
  double latency = 0; // seconds, assessment + interpolation
};

} // namespace dvfi
