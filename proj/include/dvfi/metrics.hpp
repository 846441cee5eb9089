#pragma once

#include <span>
#include <string>
#include <vector>

#include "dvfi/decision.hpp"
#include "dvfi/image.hpp"
#include "json.hpp"

namespace dvfi {

/// PSNR value reported for identical images.
inline constexpr double kPsnrCap = 99.0;

/// 20*log10(255/sqrt(MSE)) over all channels jointly, capped at kPsnrCap.
double psnr(const Image& a, const Image& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
};

/// Mean SSIM of the luma planes over all fully-covered window positions.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});
double ssim(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b, const SsimParams& params = {});

/// Fraction of predictions whose absolute error is strictly below `tol`.
double tolerance_accuracy(std::span<const double> preds, std::span<const double> gts, double tol);

enum class Subset { Easy, Medium, Hard, Extreme };

const char* to_string(Subset s);
/// Throws ValidationError for anything but Easy/Medium/Hard/Extreme.
Subset parse_subset(const std::string& tag);

struct SubsetReport {
  std::string subset; // one of the Subset names, or "All" for the pooled row
  double psnr_mean = 0;
  double ssim_mean = 0;
  double routed_fast_fraction = 0;
  double latency_mean = 0;
  std::size_t n = 0;

  /// "PSNR/SSIM" with four decimals each.
  std::string formatted() const;
};

std::string format_quality(double psnr, double ssim);

/// Per-subset means in Easy..Extreme order; subsets without decisions are
/// omitted. `subset_tags[i]` labels `decisions[i]`.
std::vector<SubsetReport> build_report(std::span<const RoutingDecision> decisions,
                                       std::span<const std::string> subset_tags);

/// Pooled means over every decision, labelled "All".
SubsetReport summarize(std::span<const RoutingDecision> decisions);

nlohmann::json to_json(const SubsetReport& report);

} // namespace dvfi
