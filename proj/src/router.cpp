#include "dvfi/router.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "dvfi/parallel.hpp"

namespace dvfi {

void validate_threshold(double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw ValidationError("threshold must lie in [0,1], got " + std::to_string(threshold));
}

Router::Router(const Checkpoint& model, BackendRegistry& backends, std::string fast, std::string accurate)
    : model_(model), backends_(backends), fast_(std::move(fast)), accurate_(std::move(accurate)) {
  if (backends_.get(fast_).kind() != BackendKind::fast) throw ValidationError("backend '" + fast_ + "' is not fast");
  if (backends_.get(accurate_).kind() != BackendKind::accurate)
    throw ValidationError("backend '" + accurate_ + "' is not accurate");
}

Backend& Router::backend(BackendKind kind) { return backends_.get(kind == BackendKind::fast ? fast_ : accurate_); }

RoutingDecision Router::route(const Image& frame0, const Image& frame1, double threshold,
                              std::optional<BackendKind> force, const Image* ground_truth, std::string pair_id) {
  validate_threshold(threshold);
  require_same_geometry(frame0, frame1, "route");
  RoutingDecision d;
  d.pair_id = std::move(pair_id);
  d.threshold = threshold;

  const auto start = std::chrono::steady_clock::now();
  d.predicted_score = assess(model_, frame0, frame1);
  const double assess_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  d.chosen = d.predicted_score >= threshold ? BackendKind::fast : BackendKind::accurate;
  if (force) {
    d.chosen = *force;
    d.forced = true;
  }
  Image out;
  d.latency = assess_seconds + measure_latency(backend(d.chosen), frame0, frame1, &out);
  if (ground_truth) {
    d.psnr = psnr(out, *ground_truth);
    d.ssim = ssim(out, *ground_truth);
  }
  d.output = std::make_shared<const Image>(std::move(out));
  return d;
}

namespace {

struct PairMeasurement {
  std::string id;
  std::string subset;
  double score = 0;
  double assess_seconds = 0;
  // indexed by BackendKind
  std::shared_ptr<const Image> output[2];
  double latency[2] = {0, 0};
  double psnr[2] = {0, 0};
  double ssim[2] = {0, 0};
};

SweepRow assemble(std::string label, std::optional<double> threshold, std::optional<BackendKind> force,
                  const std::vector<PairMeasurement>& pairs) {
  SweepRow row;
  row.label = std::move(label);
  row.threshold = threshold;
  std::vector<std::string> tags;
  for (const auto& p : pairs) {
    RoutingDecision d;
    d.pair_id = p.id;
    d.predicted_score = p.score;
    d.threshold = threshold.value_or(0.0);
    d.chosen = force ? *force : (p.score >= *threshold ? BackendKind::fast : BackendKind::accurate);
    d.forced = force.has_value();
    const auto k = static_cast<int>(d.chosen);
    d.output = p.output[k];
    d.psnr = p.psnr[k];
    d.ssim = p.ssim[k];
    d.latency = p.latency[k] + (force ? 0.0 : p.assess_seconds);
    row.decisions.push_back(std::move(d));
    tags.push_back(p.subset);
  }
  row.subsets = build_report(row.decisions, tags);
  row.overall = summarize(row.decisions);
  return row;
}

} // namespace

SweepResult sweep(const std::vector<DifficultyRecord>& records, const Checkpoint& model,
                  const std::vector<double>& thresholds, BackendRegistry& backends, int threads,
                  const std::filesystem::path& base, const std::string& fast, const std::string& accurate) {
  if (records.empty()) throw ValidationError("sweep: manifest is empty");
  if (thresholds.empty()) throw ValidationError("sweep: no thresholds given");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    validate_threshold(thresholds[i]);
    if (i > 0 && thresholds[i] < thresholds[i - 1]) throw ValidationError("sweep: thresholds must be ascending");
  }
  for (const auto& r : records) parse_subset(r.triplet.subset);

  Router router(model, backends, fast, accurate);
  std::vector<PairMeasurement> pairs(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto frames = load_frames(records[i].triplet, base);
    PairMeasurement& p = pairs[i];
    p.id = records[i].triplet.id;
    p.subset = records[i].triplet.subset;
    const auto start = std::chrono::steady_clock::now();
    p.score = assess(model, frames[0], frames[2]);
    p.assess_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (BackendKind kind : {BackendKind::fast, BackendKind::accurate}) {
      const auto k = static_cast<int>(kind);
      Image out;
      p.latency[k] = measure_latency(router.backend(kind), frames[0], frames[2], &out);
      p.psnr[k] = psnr(out, frames[1]);
      p.ssim[k] = ssim(out, frames[1]);
      p.output[k] = std::make_shared<const Image>(std::move(out));
    }
  });

  SweepResult result;
  result.all_fast = assemble("all-fast", std::nullopt, BackendKind::fast, pairs);
  result.all_accurate = assemble("all-accurate", std::nullopt, BackendKind::accurate, pairs);
  for (double t : thresholds) result.rows.push_back(assemble("dynamic", t, std::nullopt, pairs));
  return result;
}

nlohmann::json to_json(const SweepRow& row) {
  nlohmann::json j;
  j["label"] = row.label;
  j["threshold"] = row.threshold ? nlohmann::json(*row.threshold) : nlohmann::json(nullptr);
  j["overall"] = to_json(row.overall);
  j["subsets"] = nlohmann::json::array();
  j["table"] = nlohmann::json::object();
  for (const auto& s : row.subsets) {
    j["subsets"].push_back(to_json(s));
    j["table"][s.subset] = s.formatted();
  }
  return j;
}

nlohmann::json to_json(const SweepResult& result) {
  nlohmann::json rows = nlohmann::json::array();
  rows.push_back(to_json(result.all_fast));
  for (const auto& r : result.rows) rows.push_back(to_json(r));
  rows.push_back(to_json(result.all_accurate));
  return {{"rows", rows}};
}

std::vector<double> parse_threshold_spec(const std::string& spec) {
  auto number = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ValidationError("bad threshold value '" + s + "' in '" + spec + "'");
    }
  };
  std::vector<double> out;
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    if (parts.size() != 3) throw ValidationError("threshold range must be start:stop:step, got '" + spec + "'");
    const double start = number(parts[0]), stop = number(parts[1]), step = number(parts[2]);
    if (!(step > 0) || stop < start) throw ValidationError("threshold range needs step > 0 and stop >= start");
    for (long k = 0;; ++k) {
      const double v = start + static_cast<double>(k) * step;
      if (v >= stop - 1e-12) break;
      out.push_back(v);
    }
    out.push_back(stop);
  } else {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(number(item));
  }
  for (double t : out) validate_threshold(t);
  return out;
}

} // namespace dvfi
