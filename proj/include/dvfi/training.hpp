#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dvfi/dataset.hpp"
#include "dvfi/error.hpp"
#include "dvfi/image.hpp"
#include "dvfi/model.hpp"

namespace dvfi {

/// |gt - pred| for scores in [0, 1].
double difficulty_loss(double pred, double gt);
/// Mean of difficulty_loss over a batch.
double difficulty_loss(std::span<const double> preds, std::span<const double> gts);

/// |attention_mean - perceptual_distance| for values in [0, 1].
double auxiliary_loss(double attention_mean, double perceptual_distance);

/// Perceptual distance stand-in: 1 - SSIM of the two frames, clipped to [0, 1].
double perceptual_proxy(const Image& frame0, const Image& frame1);

struct LossBreakdown {
  double difficulty = 0;
  double auxiliary = 0;
  double total = 0;
  double lambda = 1.0;
};

struct TrainHyper {
  double lr = 1e-4;
  int steps = 1000;
  int batch = 4;
  std::uint64_t seed = 0;
  double lambda = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Draw each sample under a random flip/transpose and frame order. The
  /// target is invariant under all of them.
  bool augment = true;

  void validate() const;
};

/// Network-ready inputs of one annotated triplet: the outer frames as
/// tensors, the target score and the perceptual distance of the pair.
struct TrainingSample {
  std::string id;
  nn::Tensor<double> frame0;
  nn::Tensor<double> frame1;
  double target = 0;
  double perceptual = 0;
};

TrainingSample make_sample(const DifficultyRecord& record, const DpaConfig& cfg,
                           const std::filesystem::path& base = {});

/// Variant `code` (0..15) of a sample: bit 0 swaps the frames, bit 1
/// transposes, bits 2 and 3 mirror x and y. Code 0 is the identity.
TrainingSample augmented(const TrainingSample& sample, int code);

/// Differentiable loss of one sample. The auxiliary node is undefined
/// when cfg.aux_loss_enabled is false.
struct LossGraph {
  nn::Tensor<double> total;
  nn::Tensor<double> difficulty;
  nn::Tensor<double> auxiliary;
  ScoreOutput<double> output;
};

LossGraph build_loss(const TrainingSample& sample, const nn::ParamStore<double>& params, const DpaConfig& cfg,
                     double lambda);

struct TrainingMeta {
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_tail; // most recent total losses
};

struct Checkpoint {
  DpaConfig config;
  nn::ParamStore<double> params;
  TrainingMeta meta;
};

/// Adaptive-moment gradient descent over a ParamStore.
class AdamOptimizer {
public:
  AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update from the accumulated gradients; parameters without
  /// a gradient are left alone.
  void step(nn::ParamStore<double>& params);
  std::int64_t steps() const { return t_; }

private:
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<nn::Vec<double>, nn::Vec<double>>> moments_;
};

struct TrainingReport {
  Checkpoint checkpoint;
  std::vector<LossBreakdown> history; // one entry per step run
};

using StepCallback = std::function<void(std::int64_t step, const LossBreakdown&)>;

/// Runs hyper.steps optimizer steps, continuing from `resume` if given.
/// Throws NumericError naming the step on a non-finite loss.
TrainingReport train(const std::vector<TrainingSample>& samples, const DpaConfig& cfg, const TrainHyper& hyper,
                     const Checkpoint* resume = nullptr, const StepCallback& on_step = {});

TrainingReport train(const std::vector<DifficultyRecord>& records, const DpaConfig& cfg, const TrainHyper& hyper,
                     const std::filesystem::path& base = {});

/// Score of a frame pair under a trained model.
double assess(const Checkpoint& model, const Image& frame0, const Image& frame1);

class CheckpointError : public FormatError {
public:
  enum class Kind { corrupt_header, shape_mismatch, truncated_blob };
  CheckpointError(Kind kind, const std::string& what) : FormatError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

private:
  Kind kind_;
};

/// Layout: "DVFICKPT", u64 LE header length, JSON header (config, tensor
/// names, shapes, dtype, byte offsets, training meta), then the
/// little-endian float64 blob.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Model and optimizer settings read from a "key = value" text file.
struct TrainingConfigFile {
  DpaConfig model;
  TrainHyper hyper;
};

TrainingConfigFile parse_training_config(const std::string& text);
TrainingConfigFile read_training_config(const std::filesystem::path& path);

} // namespace dvfi
