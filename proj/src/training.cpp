#include "dvfi/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "dvfi/metrics.hpp"

namespace dvfi {

namespace {

void require_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string(what) + " must lie in [0,1], got " + std::to_string(v));
}

constexpr std::size_t kLossTail = 100;

// Augmentation draw for stream position `pos`, so resumed runs see the
// same variants as uninterrupted ones.
int augmentation_code(std::uint64_t seed, std::int64_t pos) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(pos), static_cast<std::uint32_t>(static_cast<std::uint64_t>(pos) >> 32),
                    0x61756775u};
  std::mt19937 rng(seq);
  return static_cast<int>(rng() & 15u);
}

} // namespace

double difficulty_loss(double pred, double gt) {
  require_unit(pred, "predicted score");
  require_unit(gt, "ground-truth score");
  return std::abs(gt - pred);
}

double difficulty_loss(std::span<const double> preds, std::span<const double> gts) {
  if (preds.size() != gts.size() || preds.empty()) throw ValidationError("difficulty_loss: need equal, non-empty batches");
  double total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) total += difficulty_loss(preds[i], gts[i]);
  return total / static_cast<double>(preds.size());
}

double auxiliary_loss(double attention_mean, double perceptual_distance) {
  require_unit(attention_mean, "attention mean");
  require_unit(perceptual_distance, "perceptual distance");
  return std::abs(attention_mean - perceptual_distance);
}

double perceptual_proxy(const Image& frame0, const Image& frame1) {
  return std::clamp(1.0 - ssim(frame0, frame1), 0.0, 1.0);
}

void TrainHyper::validate() const {
  if (!(lr > 0)) throw ValidationError("learning rate must be positive");
  if (steps < 0) throw ValidationError("steps must be >= 0");
  if (batch < 1) throw ValidationError("batch must be >= 1");
  if (!(lambda >= 0)) throw ValidationError("lambda must be >= 0");
}

TrainingSample make_sample(const DifficultyRecord& record, const DpaConfig& cfg, const std::filesystem::path& base) {
  const auto frames = load_frames(record.triplet, base);
  TrainingSample s;
  s.id = record.triplet.id;
  s.frame0 = to_tensor<double>(frames[0], cfg.input_size);
  s.frame1 = to_tensor<double>(frames[2], cfg.input_size);
  s.target = record.score;
  s.perceptual = perceptual_proxy(frames[0], frames[2]);
  return s;
}

namespace {

nn::Tensor<double> transform_frame(const nn::Tensor<double>& t, int code) {
  const nn::Index c = t.dim(1), h = t.dim(2), w = t.dim(3);
  if (h != w) throw ShapeError("augmentation needs square frames");
  const nn::Vec<double>& in = t.value();
  nn::Vec<double> out(in.size());
  for (nn::Index ch = 0; ch < c; ++ch)
    for (nn::Index y = 0; y < h; ++y)
      for (nn::Index x = 0; x < w; ++x) {
        nn::Index sy = y, sx = x;
        if (code & 2) std::swap(sy, sx);
        if (code & 4) sx = w - 1 - sx;
        if (code & 8) sy = h - 1 - sy;
        out[(ch * h + y) * w + x] = in[(ch * h + sy) * w + sx];
      }
  return nn::Tensor<double>::from(t.shape(), std::move(out));
}

} // namespace

TrainingSample augmented(const TrainingSample& sample, int code) {
  if (code < 0 || code > 15) throw ValidationError("augmentation code must be in 0..15");
  if (code == 0) return sample;
  TrainingSample s = sample;
  s.frame0 = transform_frame(sample.frame0, code);
  s.frame1 = transform_frame(sample.frame1, code);
  if (code & 1) std::swap(s.frame0, s.frame1);
  return s;
}

LossGraph build_loss(const TrainingSample& sample, const nn::ParamStore<double>& params, const DpaConfig& cfg,
                     double lambda) {
  using namespace nn;
  LossGraph g;
  g.output = predict_score(sample.frame0, sample.frame1, params, cfg);
  g.difficulty = abs(add_scalar(g.output.score, -sample.target));
  g.total = g.difficulty;
  if (cfg.aux_loss_enabled) {
    g.auxiliary = abs(add_scalar(g.output.attention_mean, -sample.perceptual));
    g.total = add(g.total, scale(g.auxiliary, lambda));
  }
  return g;
}

void AdamOptimizer::step(nn::ParamStore<double>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    auto& [m, v] = moments_[name];
    if (m.size() == 0) {
      m = nn::Vec<double>::Zero(p.numel());
      v = nn::Vec<double>::Zero(p.numel());
    }
    const auto& g = p.grad();
    m = beta1_ * m + (1 - beta1_) * g;
    v = beta2_ * v + (1 - beta2_) * g.square();
    p.mutable_value() -= lr_ * (m / c1) / ((v / c2).sqrt() + eps_);
  }
}

TrainingReport train(const std::vector<TrainingSample>& samples, const DpaConfig& cfg, const TrainHyper& hyper,
                     const Checkpoint* resume, const StepCallback& on_step) {
  if (samples.empty()) throw ValidationError("training set is empty");
  cfg.validate();
  hyper.validate();
  TrainingReport report;
  Checkpoint& ck = report.checkpoint;
  if (resume) {
    if (!(resume->config == cfg)) throw ValidationError("resume checkpoint was trained with a different model config");
    ck.config = resume->config;
    for (const auto& [name, t] : resume->params) ck.params.add(name, t.shape(), t.value());
    ck.meta = resume->meta;
  } else {
    ck.config = cfg;
    ck.params = init_params<double>(cfg, hyper.seed);
    ck.meta.seed = hyper.seed;
  }

  // sample at stream position p comes from epoch p / n, shuffled with (seed, epoch)
  const std::size_t n = samples.size();
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm(n);
  auto sample_at = [&](std::int64_t pos) -> const TrainingSample& {
    const std::int64_t epoch = pos / static_cast<std::int64_t>(n);
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::seed_seq seq{static_cast<std::uint32_t>(ck.meta.seed), static_cast<std::uint32_t>(ck.meta.seed >> 32),
                        static_cast<std::uint32_t>(epoch)};
      std::mt19937_64 rng(seq);
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    return samples[perm[static_cast<std::size_t>(pos % static_cast<std::int64_t>(n))]];
  };

  AdamOptimizer opt(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps);
  const double inv_batch = 1.0 / hyper.batch;
  for (int i = 0; i < hyper.steps; ++i) {
    const std::int64_t step = ck.meta.step;
    ck.params.zero_grad();
    LossBreakdown lb;
    lb.lambda = hyper.lambda;
    try {
      for (int b = 0; b < hyper.batch; ++b) {
        const std::int64_t pos = step * hyper.batch + b;
        const TrainingSample& s = sample_at(pos);
        LossGraph g = build_loss(hyper.augment ? augmented(s, augmentation_code(ck.meta.seed, pos)) : s, ck.params,
                                 cfg, hyper.lambda);
        nn::backward(nn::scale(g.total, inv_batch));
        lb.difficulty += g.difficulty.item() * inv_batch;
        if (g.auxiliary.defined()) lb.auxiliary += g.auxiliary.item() * inv_batch;
        lb.total += g.total.item() * inv_batch;
      }
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(lb.total)) throw NumericError("training diverged at step " + std::to_string(step));
    opt.step(ck.params);
    ++ck.meta.step;
    ck.meta.loss_tail.push_back(lb.total);
    if (ck.meta.loss_tail.size() > kLossTail) ck.meta.loss_tail.erase(ck.meta.loss_tail.begin());
    report.history.push_back(lb);
    if (on_step) on_step(step, lb);
  }
  ck.params.zero_grad();
  return report;
}

TrainingReport train(const std::vector<DifficultyRecord>& records, const DpaConfig& cfg, const TrainHyper& hyper,
                     const std::filesystem::path& base) {
  std::vector<TrainingSample> samples;
  samples.reserve(records.size());
  for (const auto& r : records) samples.push_back(make_sample(r, cfg, base));
  return train(samples, cfg, hyper);
}

double assess(const Checkpoint& model, const Image& frame0, const Image& frame1) {
  require_same_geometry(frame0, frame1, "assess");
  const auto t0 = to_tensor<double>(frame0, model.config.input_size);
  const auto t1 = to_tensor<double>(frame1, model.config.input_size);
  return predict_score(t0, t1, model.params, model.config).value();
}

// ------------------------------------------------------------------ config file

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::array<int, 4> parse_quad(const std::string& v, const std::string& key) {
  std::array<int, 4> out{};
  std::stringstream ss(v);
  std::string item;
  int k = 0;
  while (std::getline(ss, item, ',')) {
    if (k >= 4) throw ValidationError(key + " needs exactly 4 values");
    out[k++] = std::stoi(trim(item));
  }
  if (k != 4) throw ValidationError(key + " needs exactly 4 values");
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ValidationError(key + ": expected a boolean, got '" + v + "'");
}

} // namespace

TrainingConfigFile parse_training_config(const std::string& text) {
  TrainingConfigFile cfg;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("expected 'key = value'", lineno);
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    try {
      auto& m = cfg.model;
      auto& h = cfg.hyper;
      if (key == "lr") h.lr = std::stod(value);
      else if (key == "steps") h.steps = std::stoi(value);
      else if (key == "batch") h.batch = std::stoi(value);
      else if (key == "seed") h.seed = std::stoull(value);
      else if (key == "lambda") h.lambda = std::stod(value);
      else if (key == "augment") h.augment = parse_bool(value, key);
      else if (key == "patch_size") m.patch_size = std::stoi(value);
      else if (key == "embed_dim") m.embed_dim = std::stoi(value);
      else if (key == "depths") m.depths = parse_quad(value, key);
      else if (key == "heads") m.heads = parse_quad(value, key);
      else if (key == "window") m.window = std::stoi(value);
      else if (key == "input_size") m.input_size = std::stoi(value);
      else if (key == "mlp_ratio") m.mlp_ratio = std::stoi(value);
      else if (key == "pixelshuffle") m.pixelshuffle_enabled = parse_bool(value, key);
      else if (key == "image_difference") m.image_difference_enabled = parse_bool(value, key);
      else if (key == "aux_loss") m.aux_loss_enabled = parse_bool(value, key);
      else if (key == "siamese") m.siamese_enabled = parse_bool(value, key);
      else throw FormatError("unknown key '" + key + "'", lineno);
    } catch (const std::invalid_argument&) {
      throw FormatError("bad value for '" + key + "': " + value, lineno);
    } catch (const std::out_of_range&) {
      throw FormatError("value out of range for '" + key + "'", lineno);
    } catch (const ValidationError& e) {
      throw FormatError(e.what(), lineno);
    }
  }
  cfg.model.validate();
  cfg.hyper.validate();
  return cfg;
}

TrainingConfigFile read_training_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_training_config(ss.str());
}

} // namespace dvfi
