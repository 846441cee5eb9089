// dvfi: annotate triplets, train the difficulty model, and route frame
// pairs between a fast and an accurate interpolator.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "dvfi/router.hpp"

namespace fs = std::filesystem;
using namespace dvfi;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

struct Globals {
  std::uint64_t seed = 0;
  int threads = 1;
  int verbosity = 1;
};

Globals g;

// Per-module stream derived from the global seed (FNV-1a of the name, mixed).
std::uint64_t sub_seed(std::string_view module) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : module) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  std::uint64_t x = g.seed ^ h;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void log(int level, const std::string& msg) {
  if (g.verbosity >= level) std::cerr << msg << '\n';
}

void log_config(const char* command, const nlohmann::json& resolved) {
  nlohmann::json j = resolved;
  j["command"] = command;
  j["seed"] = g.seed;
  j["threads"] = g.threads;
  j["verbosity"] = g.verbosity;
  log(1, "config " + j.dump());
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(std::string("bad value '") + item + "' in " + what);
    }
  }
  if (out.empty()) throw ValidationError(std::string(what) + " is empty");
  return out;
}

std::optional<BackendKind> parse_force(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s == "fast") return BackendKind::fast;
  if (s == "accurate") return BackendKind::accurate;
  throw ValidationError("--force must be fast or accurate, got '" + s + "'");
}

// ------------------------------------------------------------------ annotate

struct AnnotateArgs {
  std::string frames_dir;
  int synthetic = 0;
  std::string magnitudes = "0,2,8,16";
  int stride = 1;
  bool disjoint = false;
  std::string out;
  std::string thresholds = "35,30,25";
  std::string frames_out;
};

int cmd_annotate(const AnnotateArgs& a) {
  const auto t = parse_list(a.thresholds, "--thresholds");
  if (t.size() != 3) throw ValidationError("--thresholds needs three PSNR values t4,t3,t2");
  AnnotationThresholds th{t[0], t[1], t[2]};
  th.validate();

  const fs::path out(a.out);
  const fs::path out_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  nlohmann::json resolved{{"out", a.out}, {"thresholds", t}};
  std::vector<TripletRecord> triplets;
  nlohmann::json warnings = nlohmann::json::array();
  if (!a.frames_dir.empty()) {
    resolved["frames"] = a.frames_dir;
    resolved["stride"] = a.stride;
    resolved["sliding"] = !a.disjoint;
    log_config("annotate", resolved);
    auto ex = extract_triplets(a.frames_dir, a.stride, !a.disjoint);
    for (const auto& w : ex.warnings) {
      log(1, "warning: " + w);
      warnings.push_back(w);
    }
    triplets = std::move(ex.triplets);
    // manifest paths are stored relative to the manifest
    for (auto& tr : triplets)
      for (auto& p : tr.paths) p = fs::relative(fs::absolute(p), fs::absolute(out_dir)).generic_string();
  } else {
    const auto mags = parse_list(a.magnitudes, "--magnitudes");
    const std::uint64_t seed = sub_seed("dataset");
    resolved["synthetic"] = a.synthetic;
    resolved["magnitudes"] = mags;
    resolved["dataset_seed"] = seed;
    log_config("annotate", resolved);
    triplets = generate_synthetic(a.synthetic, mags, seed);
  }
  if (triplets.empty()) throw ValidationError("no triplets to annotate");

  auto records = annotate_all(triplets, th, g.threads, out_dir);
  if (a.frames_dir.empty()) {
    const fs::path frames = a.frames_out.empty() ? fs::path(out.string() + ".frames") : fs::path(a.frames_out);
    materialize_frames(records, frames, out_dir);
  }
  write_manifest(records, out);

  std::map<int, int> histogram;
  for (const auto& r : records) ++histogram[r.level];
  nlohmann::json hist = nlohmann::json::object();
  for (int level = 1; level <= 4; ++level) {
    hist[std::to_string(level)] = histogram[level];
    log(1, "level " + std::to_string(level) + ": " + std::to_string(histogram[level]));
  }
  std::cout << nlohmann::json{{"manifest", a.out}, {"records", records.size()}, {"levels", hist},
                              {"warnings", warnings}}
                   .dump()
            << '\n';
  return kOk;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string out;
  std::string resume;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<double> lambda;
  std::optional<int> batch;
  bool no_augment = false;
};

int cmd_train(const TrainArgs& a, bool seed_given) {
  TrainingConfigFile tc;
  if (!a.config.empty()) tc = read_training_config(a.config);
  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    if (a.config.empty()) tc.model = resume->config;
    tc.hyper.seed = resume->meta.seed;
  }
  // a resumed run keeps the checkpoint's shuffle seed
  if (!resume && (seed_given || a.config.empty())) tc.hyper.seed = sub_seed("training");
  if (a.steps) tc.hyper.steps = *a.steps;
  if (a.lr) tc.hyper.lr = *a.lr;
  if (a.lambda) tc.hyper.lambda = *a.lambda;
  if (a.batch) tc.hyper.batch = *a.batch;
  if (a.no_augment) tc.hyper.augment = false;
  tc.model.validate();
  tc.hyper.validate();

  log_config("train", {{"manifest", a.manifest},
                       {"out", a.out},
                       {"resume", a.resume},
                       {"model", to_json(tc.model)},
                       {"lr", tc.hyper.lr},
                       {"steps", tc.hyper.steps},
                       {"batch", tc.hyper.batch},
                       {"lambda", tc.hyper.lambda},
                       {"augment", tc.hyper.augment},
                       {"train_seed", tc.hyper.seed}});

  const fs::path manifest(a.manifest);
  const auto records = read_manifest(manifest);
  if (records.empty()) throw ValidationError("manifest " + a.manifest + " has no records");
  std::vector<TrainingSample> samples;
  for (const auto& r : records) samples.push_back(make_sample(r, tc.model, manifest.parent_path()));

  const int every = std::max(1, tc.hyper.steps / 10);
  auto on_step = [&](std::int64_t step, const LossBreakdown& lb) {
    if (g.verbosity >= 2 || (g.verbosity >= 1 && (step % every == 0)))
      log(1, "step " + std::to_string(step) + " loss " + fixed4(lb.total) + " (difficulty " + fixed4(lb.difficulty) +
                 ", auxiliary " + fixed4(lb.auxiliary) + ")");
  };
  const auto report = train(samples, tc.model, tc.hyper, resume ? &*resume : nullptr, on_step);
  save_checkpoint(report.checkpoint, a.out);

  nlohmann::json out{{"checkpoint", a.out}, {"step", report.checkpoint.meta.step}, {"samples", samples.size()}};
  if (!report.history.empty()) {
    out["initial_loss"] = report.history.front().total;
    out["final_loss"] = report.history.back().total;
    log(1, "final loss " + fixed4(report.history.back().total));
  }
  std::cout << out.dump() << '\n';
  return kOk;
}

// -------------------------------------------------------------------- assess

int cmd_assess(const std::string& model, const std::string& f0, const std::string& f1) {
  log_config("assess", {{"model", model}, {"f0", f0}, {"f1", f1}});
  const auto ckpt = load_checkpoint(model);
  const double score = assess(ckpt, read_pnm(f0), read_pnm(f1));
  log(1, "score " + fixed4(score));
  std::cout << "{\"score\":" << fixed4(score) << "}\n";
  return kOk;
}

// --------------------------------------------------------------- interpolate

struct InterpolateArgs {
  std::string model, f0, f1, out, force, gt;
  double threshold = 0.5;
};

int cmd_interpolate(const InterpolateArgs& a) {
  log_config("interpolate", {{"model", a.model},
                             {"f0", a.f0},
                             {"f1", a.f1},
                             {"out", a.out},
                             {"threshold", a.threshold},
                             {"force", a.force},
                             {"gt", a.gt}});
  validate_threshold(a.threshold);
  const auto force = parse_force(a.force);
  const auto ckpt = load_checkpoint(a.model);
  const Image f0 = read_pnm(a.f0), f1 = read_pnm(a.f1);
  std::optional<Image> gt;
  if (!a.gt.empty()) gt = read_pnm(a.gt);
  auto backends = BackendRegistry::with_defaults();
  Router router(ckpt, backends);
  const auto d = router.route(f0, f1, a.threshold, force, gt ? &*gt : nullptr, fs::path(a.f0).stem().string());
  write_pnm(*d.output, a.out);

  std::string why = d.forced ? "forced"
                             : "score " + fixed4(d.predicted_score) + (d.chosen == BackendKind::fast ? " >= " : " < ") +
                                   "threshold " + fixed4(d.threshold);
  log(1, std::string("decision: ") + to_string(d.chosen) + " (" + why + ")");
  nlohmann::json j{{"pair_id", d.pair_id},   {"predicted_score", d.predicted_score},
                   {"threshold", d.threshold}, {"chosen", to_string(d.chosen)},
                   {"forced", d.forced},       {"latency", d.latency},
                   {"out", a.out}};
  if (d.psnr) j["psnr"] = *d.psnr;
  if (d.ssim) j["ssim"] = *d.ssim;
  std::cout << j.dump() << '\n';
  return kOk;
}

// --------------------------------------------------------------------- sweep

int cmd_sweep(const std::string& model, const std::string& manifest, const std::string& spec,
              const std::string& report_path) {
  const auto thresholds = parse_threshold_spec(spec);
  log_config("sweep", {{"model", model}, {"manifest", manifest}, {"thresholds", thresholds}, {"report", report_path}});
  const auto ckpt = load_checkpoint(model);
  const auto records = read_manifest(manifest);
  auto backends = BackendRegistry::with_defaults();
  const auto result = sweep(records, ckpt, thresholds, backends, g.threads, fs::path(manifest).parent_path());
  const auto j = to_json(result);

  auto line = [](const SweepRow& r) {
    std::string s = r.label;
    if (r.threshold) s += " t=" + fixed4(*r.threshold);
    s += "  psnr/ssim " + r.overall.formatted() + "  fast " + fixed4(r.overall.routed_fast_fraction) + "  latency " +
         fixed4(r.overall.latency_mean * 1e3) + " ms";
    return s;
  };
  log(1, line(result.all_fast));
  for (const auto& r : result.rows) log(1, line(r));
  log(1, line(result.all_accurate));

  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write report " + report_path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing report " + report_path);
  }
  std::cout << j.dump() << '\n';
  return kOk;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Difficulty-aware video frame interpolation toolkit"};
  app.require_subcommand(1);
  app.add_option("--seed", g.seed, "Global seed; module streams derive from it");
  app.add_option("--threads", g.threads, "Worker threads for annotate/sweep")->check(CLI::PositiveNumber);
  app.add_option("--verbosity", g.verbosity, "0 quiet, 1 progress, 2 every step")->check(CLI::Range(0, 2));

  AnnotateArgs aa;
  auto* annotate_cmd = app.add_subcommand("annotate", "Build a difficulty-annotated manifest");
  auto* frames_opt = annotate_cmd->add_option("--frames", aa.frames_dir, "Directory of PPM/PGM frames");
  auto* synth_opt = annotate_cmd->add_option("--synthetic", aa.synthetic, "Generate N synthetic triplets")
                        ->check(CLI::PositiveNumber);
  frames_opt->excludes(synth_opt);
  annotate_cmd->add_option("--magnitudes", aa.magnitudes, "Synthetic motion magnitudes (px), comma separated");
  annotate_cmd->add_option("--stride", aa.stride, "Frame stride K")->check(CLI::PositiveNumber);
  annotate_cmd->add_flag("--disjoint", aa.disjoint, "Non-overlapping triplets");
  annotate_cmd->add_option("--out", aa.out, "Manifest path (.jsonl)")->required();
  annotate_cmd->add_option("--thresholds", aa.thresholds, "PSNR thresholds t4,t3,t2 (descending)");
  annotate_cmd->add_option("--frames-out", aa.frames_out, "Where synthetic frames are written");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train the difficulty model");
  train_cmd->add_option("--manifest", ta.manifest)->required();
  train_cmd->add_option("--config", ta.config, "key = value training config");
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--resume", ta.resume, "Continue from checkpoint");
  train_cmd->add_option("--steps", ta.steps);
  train_cmd->add_option("--lr", ta.lr);
  train_cmd->add_option("--lambda", ta.lambda);
  train_cmd->add_option("--batch", ta.batch);
  train_cmd->add_flag("--no-augment", ta.no_augment, "Train on the samples as given");

  std::string model, f0, f1;
  auto* assess_cmd = app.add_subcommand("assess", "Predict the difficulty score of a frame pair");
  assess_cmd->add_option("--model", model)->required();
  assess_cmd->add_option("--f0", f0)->required();
  assess_cmd->add_option("--f1", f1)->required();

  InterpolateArgs ia;
  auto* interp_cmd = app.add_subcommand("interpolate", "Route a frame pair and write the middle frame");
  interp_cmd->add_option("--model", ia.model)->required();
  interp_cmd->add_option("--threshold", ia.threshold, "Scores >= threshold go to the fast backend");
  interp_cmd->add_option("--f0", ia.f0)->required();
  interp_cmd->add_option("--f1", ia.f1)->required();
  interp_cmd->add_option("--out", ia.out)->required();
  interp_cmd->add_option("--force", ia.force, "fast or accurate");
  interp_cmd->add_option("--gt", ia.gt, "Ground-truth middle frame for PSNR/SSIM");

  std::string sweep_manifest, thresholds = "0:1:0.05", report;
  auto* sweep_cmd = app.add_subcommand("sweep", "Evaluate routing over a threshold range");
  sweep_cmd->add_option("--model", model)->required();
  sweep_cmd->add_option("--manifest", sweep_manifest)->required();
  sweep_cmd->add_option("--thresholds", thresholds, "start:stop:step or comma list");
  sweep_cmd->add_option("--report", report, "Report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (annotate_cmd->parsed()) {
      if (aa.frames_dir.empty() && aa.synthetic == 0) throw ValidationError("annotate needs --frames or --synthetic");
      return cmd_annotate(aa);
    }
    if (train_cmd->parsed()) return cmd_train(ta, app.count("--seed") > 0);
    if (assess_cmd->parsed()) return cmd_assess(model, f0, f1);
    if (interp_cmd->parsed()) return cmd_interpolate(ia);
    if (sweep_cmd->parsed()) return cmd_sweep(model, sweep_manifest, thresholds, report);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kIo;
  } catch (const ValidationError& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
