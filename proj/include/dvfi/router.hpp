#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dvfi/backends.hpp"
#include "dvfi/dataset.hpp"
#include "dvfi/decision.hpp"
#include "dvfi/metrics.hpp"
#include "dvfi/training.hpp"
#include "json.hpp"

namespace dvfi {

/// Throws ValidationError unless 0 <= threshold <= 1.
void validate_threshold(double threshold);

/// Scores frame pairs with a trained model and sends each to the fast
/// backend when score >= threshold, to the accurate one otherwise.
class Router {
public:
  Router(const Checkpoint& model, BackendRegistry& backends, std::string fast = "blend",
         std::string accurate = "blockmatch");

  /// `ground_truth`, when given, fills in PSNR/SSIM of the output. The
  /// recorded latency covers assessment plus interpolation.
  RoutingDecision route(const Image& frame0, const Image& frame1, double threshold,
                        std::optional<BackendKind> force = std::nullopt, const Image* ground_truth = nullptr,
                        std::string pair_id = {});

  Backend& backend(BackendKind kind);

private:
  const Checkpoint& model_;
  BackendRegistry& backends_;
  std::string fast_, accurate_;
};

struct SweepRow {
  std::string label;                // "all-fast", "all-accurate" or "dynamic"
  std::optional<double> threshold;  // set for dynamic rows
  std::vector<SubsetReport> subsets;
  SubsetReport overall;
  std::vector<RoutingDecision> decisions;
};

struct SweepResult {
  SweepRow all_fast;
  SweepRow all_accurate;
  std::vector<SweepRow> rows; // one per threshold, in input order
};

/// Routes every record of an annotated manifest at each threshold. Each
/// pair is assessed and interpolated by both backends once; the rows are
/// assembled from those measurements. The static baselines carry no
/// assessment cost.
SweepResult sweep(const std::vector<DifficultyRecord>& records, const Checkpoint& model,
                  const std::vector<double>& thresholds, BackendRegistry& backends, int threads = 1,
                  const std::filesystem::path& base = {}, const std::string& fast = "blend",
                  const std::string& accurate = "blockmatch");

nlohmann::json to_json(const SweepRow& row);
nlohmann::json to_json(const SweepResult& result);

/// "start:stop:step" -> start, start+step, ... while < stop, then stop
/// itself. A single number yields just that value; commas list values.
std::vector<double> parse_threshold_spec(const std::string& spec);

} // namespace dvfi
