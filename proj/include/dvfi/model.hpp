#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dvfi/numerics.hpp"
#include "json.hpp"

namespace dvfi {

/// Architecture of the difficulty pre-assessment network. The four flags
/// select the ablation variants.
struct DpaConfig {
  int patch_size = 4;
  int embed_dim = 16;
  std::array<int, 4> depths{1, 1, 1, 1};
  std::array<int, 4> heads{1, 2, 4, 8};
  int window = 4;
  int input_size = 64;
  int mlp_ratio = 4;
  bool pixelshuffle_enabled = true;
  bool image_difference_enabled = true;
  bool aux_loss_enabled = true;
  bool siamese_enabled = true;

  /// Throws ValidationError naming the first violated constraint.
  void validate() const;

  /// Token grid side length of stage k (1..4).
  int stage_resolution(int stage) const { return input_size / patch_size >> (stage - 1); }
  int stage_dim(int stage) const { return embed_dim << (stage - 1); }
  /// Window clamped to the grid, as stages smaller than the window attend globally.
  int stage_window(int stage) const { return std::min(window, stage_resolution(stage)); }
  int shallow_channels() const { return stage_dim(2); }
  int deep_channels() const { return stage_dim(4); }

  friend bool operator==(const DpaConfig&, const DpaConfig&) = default;
};

nlohmann::json to_json(const DpaConfig& cfg);
DpaConfig config_from_json(const nlohmann::json& j);

/// Parameter-name prefixes of the feature extractor(s): one shared prefix
/// when Siamese, one per frame otherwise.
std::string extractor_prefix(const DpaConfig& cfg, int frame);

/// Shapes of every parameter, in creation order.
std::vector<std::pair<std::string, nn::Shape>> parameter_shapes(const DpaConfig& cfg);

template <typename S>
std::int64_t count_parameters(const nn::ParamStore<S>& params) {
  std::int64_t n = 0;
  for (const auto& [_, t] : params) n += t.numel();
  return n;
}

/// Deterministic initialisation: linear/conv weights ~ N(0, 1/fan_in),
/// norms at identity, biases and the deformable offset predictor at zero.
template <typename S>
nn::ParamStore<S> init_params(const DpaConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  nn::ParamStore<S> store;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& [name, shape] : parameter_shapes(cfg)) {
    const nn::Index n = nn::numel(shape);
    nn::Vec<S> v = nn::Vec<S>::Zero(n);
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    const bool offset = name.find("fuse.offset.") != std::string::npos;
    if (ends_with(".gamma")) {
      v.setOnes();
    } else if (ends_with(".weight") && !offset) {
      // conv [O, C, kh, kw] has fan-in C*kh*kw; linear [in, out] has fan-in in
      const nn::Index fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (nn::Index i = 0; i < n; ++i) v[i] = static_cast<S>(normal(rng) * sd);
    }
    store.add(name, shape, std::move(v));
  }
  return store;
}

template <typename S>
struct FeaturePair {
  nn::Tensor<S> shallow; // stage 2, [N, C2, H2, W2]
  nn::Tensor<S> deep;    // stage 4, [N, 4*C2, H2/4, W2/4]
};

template <typename S>
struct ScoreOutput {
  nn::Tensor<S> score;          // [1]
  nn::Tensor<S> score_map;      // [1, 1, h, w]
  nn::Tensor<S> attention_map;  // [1, 1, h, w]
  nn::Tensor<S> attention_mean; // [1]

  S value() const { return score.item(); }
};

/// Intermediate tensors of the fusion stage, for inspection.
template <typename S>
struct FusionParts {
  std::array<nn::Tensor<S>, 2> aligned;  // reduced deep features
  std::array<nn::Tensor<S>, 2> deformed; // deformable-conv shallow features
  std::array<nn::Tensor<S>, 2> spatial;
  nn::Tensor<S> temporal;                // undefined without image difference
};

namespace detail {

template <typename S>
nn::Tensor<S> swin_block(const nn::Tensor<S>& x, const nn::ParamStore<S>& p, const std::string& prefix, int res,
                         int window, int shift, int heads) {
  using namespace nn;
  Tensor<S> h = layer_norm(x, p.at(prefix + ".norm1.gamma"), p.at(prefix + ".norm1.beta"));
  h = add(x, window_attention(h, res, res, window, shift, heads, p, prefix + ".attn"));
  Tensor<S> m = layer_norm(h, p.at(prefix + ".norm2.gamma"), p.at(prefix + ".norm2.beta"));
  m = linear(m, p.at(prefix + ".mlp.fc1.weight"), p.at(prefix + ".mlp.fc1.bias"));
  m = linear(gelu(m), p.at(prefix + ".mlp.fc2.weight"), p.at(prefix + ".mlp.fc2.bias"));
  return add(h, m);
}

} // namespace detail

/// Four-stage shifted-window hierarchy; returns the stage-2 and stage-4
/// feature maps. `prefix` selects the weight set (see extractor_prefix).
template <typename S>
FeaturePair<S> extract_features(const nn::Tensor<S>& frame, const nn::ParamStore<S>& params, const DpaConfig& cfg,
                                const std::string& prefix) {
  using namespace nn;
  if (frame.rank() != 4 || frame.dim(1) != 3 || frame.dim(2) != cfg.input_size || frame.dim(3) != cfg.input_size)
    throw ShapeError("extract_features: frame must be [N,3," + std::to_string(cfg.input_size) + "," +
                     std::to_string(cfg.input_size) + "], got " + to_string(frame.shape()));
  Tensor<S> x = conv2d(frame, params.at(prefix + "patch_embed.weight"), params.at(prefix + "patch_embed.bias"),
                       cfg.patch_size, 0);
  Tensor<S> t = layer_norm(nchw_to_tokens(x), params.at(prefix + "patch_embed.norm.gamma"),
                           params.at(prefix + "patch_embed.norm.beta"));
  FeaturePair<S> out;
  for (int stage = 1; stage <= 4; ++stage) {
    const int res = cfg.stage_resolution(stage);
    if (stage > 1) {
      const std::string m = prefix + "merge" + std::to_string(stage - 1);
      t = patch_merging(t, 2 * res, 2 * res, params.at(m + ".norm.gamma"), params.at(m + ".norm.beta"),
                        params.at(m + ".reduction.weight"));
    }
    const int window = cfg.stage_window(stage);
    for (int b = 0; b < cfg.depths[stage - 1]; ++b) {
      const int shift = (b % 2 == 1 && res > window) ? window / 2 : 0;
      t = dvfi::detail::swin_block(t, params, prefix + "stage" + std::to_string(stage) + ".block" + std::to_string(b), res,
                             window, shift, cfg.heads[stage - 1]);
    }
    if (stage == 2) out.shallow = tokens_to_nchw(t, res, res);
    if (stage == 4) out.deep = tokens_to_nchw(t, res, res);
  }
  return out;
}

template <typename S>
FeaturePair<S> extract_features(const nn::Tensor<S>& frame, const nn::ParamStore<S>& params, const DpaConfig& cfg,
                                int frame_index = 0) {
  return extract_features(frame, params, cfg, extractor_prefix(cfg, frame_index));
}

/// Aligns deep to shallow resolution (pixel shuffle or nearest upsampling,
/// then a 1x1 reduction), warps shallow features with a deformable conv
/// driven by the aligned deep features, concatenates both per frame, adds
/// the frame difference if enabled, and fuses with a 3x3 conv.
template <typename S>
nn::Tensor<S> fuse_features(const FeaturePair<S>& f0, const FeaturePair<S>& f1, const nn::ParamStore<S>& params,
                            const DpaConfig& cfg, FusionParts<S>* parts = nullptr) {
  using namespace nn;
  FusionParts<S> local;
  FusionParts<S>& fp = parts ? *parts : local;
  const FeaturePair<S>* pair[2] = {&f0, &f1};
  for (int k = 0; k < 2; ++k) {
    const auto& f = *pair[k];
    Tensor<S> up = cfg.pixelshuffle_enabled ? pixel_shuffle(f.deep, 4) : upsample_nearest(f.deep, 4);
    if (up.dim(2) != f.shallow.dim(2) || up.dim(3) != f.shallow.dim(3))
      throw ShapeError("fuse_features: aligned deep feature " + to_string(up.shape()) +
                       " does not match shallow feature " + to_string(f.shallow.shape()));
    fp.aligned[k] = conv2d(up, params.at("fuse.reduce.weight"), params.at("fuse.reduce.bias"));
    Tensor<S> offsets = conv2d(fp.aligned[k], params.at("fuse.offset.weight"), params.at("fuse.offset.bias"), 1, 1);
    fp.deformed[k] =
        deformable_conv2d(f.shallow, offsets, params.at("fuse.deform.weight"), params.at("fuse.deform.bias"));
    fp.spatial[k] = concat<S>({fp.aligned[k], fp.deformed[k]});
  }
  std::vector<Tensor<S>> parts_in{fp.spatial[0], fp.spatial[1]};
  if (cfg.image_difference_enabled) {
    fp.temporal = sub(fp.spatial[0], fp.spatial[1]);
    parts_in.push_back(fp.temporal);
  }
  return gelu(conv2d(concat(parts_in), params.at("fuse.out.weight"), params.at("fuse.out.bias"), 1, 1));
}

namespace detail {

template <typename S>
nn::Tensor<S> head_branch(const nn::Tensor<S>& x, const nn::ParamStore<S>& p, const std::string& prefix) {
  using namespace nn;
  Tensor<S> h = gelu(conv2d(x, p.at(prefix + ".conv1.weight"), p.at(prefix + ".conv1.bias"), 1, 1));
  return sigmoid(conv2d(h, p.at(prefix + ".conv2.weight"), p.at(prefix + ".conv2.bias"), 1, 1));
}

} // namespace detail

/// Patch-wise prediction: score = sum(score_map * attention) / sum(attention).
template <typename S>
ScoreOutput<S> predict_from_fused(const nn::Tensor<S>& fused, const nn::ParamStore<S>& params) {
  using namespace nn;
  ScoreOutput<S> out;
  out.score_map = dvfi::detail::head_branch(fused, params, "head.score");
  out.attention_map = dvfi::detail::head_branch(fused, params, "head.attention");
  out.score = div(sum(mul(out.score_map, out.attention_map)), sum(out.attention_map));
  out.attention_mean = mean(out.attention_map);
  return out;
}

/// Difficulty score of a frame pair; frames are [1, 3, S, S] in [0, 1].
template <typename S>
ScoreOutput<S> predict_score(const nn::Tensor<S>& frame0, const nn::Tensor<S>& frame1,
                             const nn::ParamStore<S>& params, const DpaConfig& cfg) {
  if (frame0.shape() != frame1.shape())
    throw ShapeError("predict_score: frame shapes differ " + nn::to_string(frame0.shape()) + " vs " +
                     nn::to_string(frame1.shape()));
  if (frame0.dim(0) != 1) throw ShapeError("predict_score: one frame pair per call");
  const FeaturePair<S> f0 = extract_features(frame0, params, cfg, 0);
  const FeaturePair<S> f1 = extract_features(frame1, params, cfg, 1);
  return predict_from_fused(fuse_features(f0, f1, params, cfg), params);
}

} // namespace dvfi
