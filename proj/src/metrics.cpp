#include "dvfi/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <map>

#include "dvfi/error.hpp"

namespace dvfi {

double psnr(const Image& a, const Image& b) {
  require_same_geometry(a, b, "psnr");
  double sse = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    sse += d * d;
  }
  if (sse == 0) return kPsnrCap;
  const double mse = sse / static_cast<double>(a.data.size());
  return std::min(kPsnrCap, 20.0 * std::log10(255.0 / std::sqrt(mse)));
}

namespace {

Eigen::ArrayXd gaussian_kernel(int size, double sigma) {
  Eigen::ArrayXd k(size);
  const double centre = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) k[i] = std::exp(-(i - centre) * (i - centre) / (2 * sigma * sigma));
  return k / k.sum();
}

// Separable "valid" filtering.
Eigen::ArrayXXd filter_valid(const Eigen::ArrayXXd& img, const Eigen::ArrayXd& k) {
  const int n = static_cast<int>(k.size());
  const Eigen::Index rows = img.rows() - n + 1, cols = img.cols() - n + 1;
  Eigen::ArrayXXd tmp = Eigen::ArrayXXd::Zero(img.rows(), cols);
  for (int i = 0; i < n; ++i) tmp += k[i] * img.middleCols(i, cols);
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(rows, cols);
  for (int i = 0; i < n; ++i) out += k[i] * tmp.middleRows(i, rows);
  return out;
}

} // namespace

double ssim(const Eigen::ArrayXXd& a, const Eigen::ArrayXXd& b, const SsimParams& p) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("ssim: image size mismatch");
  if (a.rows() < p.window || a.cols() < p.window)
    throw ShapeError("ssim: image " + std::to_string(a.cols()) + "x" + std::to_string(a.rows()) +
                     " is smaller than the " + std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  const Eigen::ArrayXd k = gaussian_kernel(p.window, p.sigma);
  const double c1 = std::pow(p.k1 * p.dynamic_range, 2), c2 = std::pow(p.k2 * p.dynamic_range, 2);
  const Eigen::ArrayXXd mu_a = filter_valid(a, k), mu_b = filter_valid(b, k);
  const Eigen::ArrayXXd var_a = filter_valid(a * a, k) - mu_a * mu_a;
  const Eigen::ArrayXXd var_b = filter_valid(b * b, k) - mu_b * mu_b;
  const Eigen::ArrayXXd cov = filter_valid(a * b, k) - mu_a * mu_b;
  const Eigen::ArrayXXd map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                              ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return map.mean();
}

double ssim(const Image& a, const Image& b, const SsimParams& params) {
  require_same_geometry(a, b, "ssim");
  return ssim(luma(a), luma(b), params);
}

double tolerance_accuracy(std::span<const double> preds, std::span<const double> gts, double tol) {
  if (preds.size() != gts.size())
    throw ValidationError("tolerance_accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                          std::to_string(gts.size()) + " targets");
  if (preds.empty()) throw ValidationError("tolerance_accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (std::abs(preds[i] - gts[i]) < tol) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

const char* to_string(Subset s) {
  switch (s) {
  case Subset::Easy: return "Easy";
  case Subset::Medium: return "Medium";
  case Subset::Hard: return "Hard";
  case Subset::Extreme: return "Extreme";
  }
  return "?";
}

Subset parse_subset(const std::string& tag) {
  for (Subset s : {Subset::Easy, Subset::Medium, Subset::Hard, Subset::Extreme})
    if (tag == to_string(s)) return s;
  throw ValidationError("unknown subset tag '" + tag + "'");
}

std::string format_quality(double psnr_db, double ssim_value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f/%.4f", psnr_db, ssim_value);
  return buf;
}

std::string SubsetReport::formatted() const { return format_quality(psnr_mean, ssim_mean); }

namespace {

SubsetReport aggregate(std::string label, const std::vector<const RoutingDecision*>& ds) {
  SubsetReport r;
  r.subset = std::move(label);
  r.n = ds.size();
  for (const RoutingDecision* d : ds) {
    if (!d->psnr || !d->ssim) throw ValidationError("decision '" + d->pair_id + "' has no quality measurement");
    r.psnr_mean += *d->psnr;
    r.ssim_mean += *d->ssim;
    r.routed_fast_fraction += d->chosen == BackendKind::fast ? 1.0 : 0.0;
    r.latency_mean += d->latency;
  }
  const double n = static_cast<double>(ds.size());
  r.psnr_mean /= n;
  r.ssim_mean /= n;
  r.routed_fast_fraction /= n;
  r.latency_mean /= n;
  return r;
}

} // namespace

std::vector<SubsetReport> build_report(std::span<const RoutingDecision> decisions,
                                       std::span<const std::string> subset_tags) {
  if (decisions.size() != subset_tags.size())
    throw ValidationError("build_report: every decision needs a subset tag");
  std::map<Subset, std::vector<const RoutingDecision*>> groups;
  for (std::size_t i = 0; i < decisions.size(); ++i) groups[parse_subset(subset_tags[i])].push_back(&decisions[i]);
  std::vector<SubsetReport> out;
  for (const auto& [subset, ds] : groups) out.push_back(aggregate(to_string(subset), ds));
  return out;
}

SubsetReport summarize(std::span<const RoutingDecision> decisions) {
  if (decisions.empty()) throw ValidationError("summarize: no decisions");
  std::vector<const RoutingDecision*> all;
  for (const auto& d : decisions) all.push_back(&d);
  return aggregate("All", all);
}

nlohmann::json to_json(const SubsetReport& r) {
  return {{"subset", r.subset},
          {"psnr_mean", r.psnr_mean},
          {"ssim_mean", r.ssim_mean},
          {"routed_fast_fraction", r.routed_fast_fraction},
          {"latency_mean", r.latency_mean},
          {"n", r.n}};
}

} // namespace dvfi
