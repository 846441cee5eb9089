#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dvfi/model.hpp"
#include "dvfi/training.hpp"
#include "support/check.hpp"

using namespace dvfi;
using namespace dvfi::nn;
using namespace dvfi::test;

namespace {

DpaConfig micro_config() {
  DpaConfig c;
  c.input_size = 16;
  c.patch_size = 2;
  c.embed_dim = 4;
  c.window = 2;
  c.depths = {2, 1, 1, 1}; // second stage-1 block is shifted
  c.heads = {1, 2, 2, 4};
  c.mlp_ratio = 2;
  return c;
}

T frame(Gen& gen, int size, bool rg = false) { return gen.tensor({1, 3, size, size}, rg, 0.0, 1.0); }

std::int64_t count_prefix(const ParamStore<double>& p, const std::string& prefix) {
  std::int64_t n = 0;
  for (const auto& [name, t] : p)
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  return n;
}

// Hand count of the toy configuration, layer by layer.
std::int64_t toy_hand_count() {
  const std::int64_t dims[4] = {16, 32, 64, 128};
  std::int64_t extract = 16 * 3 * 4 * 4 + 16 + 2 * 16; // patch embed conv + norm
  for (int s = 0; s < 4; ++s) {
    const std::int64_t d = dims[s];
    extract += 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
    if (s > 0) extract += 2 * (2 * d) + (2 * d) * d; // merge norm on 4C = 2d, reduction 2d -> d
  }
  const std::int64_t c2 = 32;
  std::int64_t fuse = (c2 * 8 + c2)                        // 1x1 reduce after shuffle (128/16 = 8 in)
                      + (18 * c2 * 9 + 18)                 // offsets
                      + (c2 * c2 * 9 + c2)                 // deformable
                      + (c2 * 6 * c2 * 9 + c2);            // fusion conv over 6*C2
  std::int64_t heads = 2 * ((c2 * c2 * 9 + c2) + (c2 * 9 + 1));
  return extract + fuse + heads;
}

} // namespace

TEST_CASE("config validation") {
  DpaConfig c;
  CHECK_NOTHROW(c.validate());
  c.input_size = 60;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = DpaConfig{};
  c.heads = {3, 2, 4, 8};
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = DpaConfig{};
  c.window = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = DpaConfig{};
  c.embed_dim = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_NOTHROW(micro_config().validate());
  CHECK(config_from_json(to_json(micro_config())) == micro_config());
}

TEST_CASE("feature shapes of the toy config") {
  const DpaConfig cfg;
  const auto p = init_params<double>(cfg, 1);
  Gen gen(2);
  const auto f = extract_features(frame(gen, 64), p, cfg);
  CHECK(f.shallow.shape() == Shape{1, 32, 8, 8});
  CHECK(f.deep.shape() == Shape{1, 128, 2, 2});
  CHECK(f.shallow.dim(2) == 4 * f.deep.dim(2));
  CHECK(f.deep.dim(1) == 4 * f.shallow.dim(1));
  CHECK_THROWS_AS(extract_features(frame(gen, 32), p, cfg), ShapeError);
}

TEST_CASE("siamese extraction shares weights") {
  DpaConfig cfg = micro_config();
  const auto p = init_params<double>(cfg, 3);
  Gen gen(4);
  const T x = frame(gen, 16);
  const auto a = extract_features(x, p, cfg, 0), b = extract_features(x, p, cfg, 1);
  CHECK((a.shallow.value() == b.shallow.value()).all());
  CHECK((a.deep.value() == b.deep.value()).all());

  const auto out = predict_score(x, frame(gen, 16), p, cfg);
  const auto audit = audit_graph(out.score);
  for (const auto& name : audit.param_names) CHECK(name.rfind("extract0", 0) != 0);
  CHECK(audit.param_names.count("extract.patch_embed.weight") == 1);

  cfg.siamese_enabled = false;
  const auto q = init_params<double>(cfg, 3);
  const auto audit2 = audit_graph(predict_score(x, frame(gen, 16), q, cfg).score);
  CHECK(audit2.param_names.count("extract0.patch_embed.weight") == 1);
  CHECK(audit2.param_names.count("extract1.patch_embed.weight") == 1);
  CHECK(audit2.param_names.count("extract.patch_embed.weight") == 0);
}

TEST_CASE("parameter counting") {
  CHECK(count_parameters(ParamStore<double>{}) == 0);
  ParamStore<double> one;
  one.add("conv.weight", {4, 2, 3, 3}, V::Zero(72));
  one.add("conv.bias", {4}, V::Zero(4));
  CHECK(count_parameters(one) == 76);

  DpaConfig cfg;
  const auto p = init_params<double>(cfg, 0);
  CHECK(count_parameters(p) == toy_hand_count());
  CHECK(count_parameters(p) == 398100);

  cfg.siamese_enabled = false;
  const auto q = init_params<double>(cfg, 0);
  CHECK(count_prefix(q, "extract") == 2 * count_prefix(p, "extract"));
  CHECK(count_parameters(q) - count_prefix(q, "extract") == count_parameters(p) - count_prefix(p, "extract"));
}

TEST_CASE("initialisation is deterministic and zeroes the offset predictor") {
  const DpaConfig cfg = micro_config();
  const auto a = init_params<double>(cfg, 9), b = init_params<double>(cfg, 9), c = init_params<double>(cfg, 10);
  bool differs = false;
  for (const auto& [name, t] : a) {
    CHECK((t.value() == b.at(name).value()).all());
    differs |= !(t.value() == c.at(name).value()).all();
  }
  CHECK(differs);
  CHECK((a.at("fuse.offset.weight").value() == 0).all());
  CHECK((a.at("fuse.offset.bias").value() == 0).all());
  CHECK((a.at("extract.stage1.block0.norm1.gamma").value() == 1).all());
}

TEST_CASE("fusion") {
  DpaConfig cfg = micro_config();
  auto p = init_params<double>(cfg, 5);
  Gen gen(6);
  const auto f0 = extract_features(frame(gen, 16), p, cfg, 0);
  const auto f1 = extract_features(frame(gen, 16), p, cfg, 1);

  SUBCASE("identical frames give a zero temporal difference") {
    FusionParts<double> parts;
    fuse_features(f0, f0, p, cfg, &parts);
    REQUIRE(parts.temporal.defined());
    CHECK((parts.temporal.value() == 0).all());
  }
  SUBCASE("zero offsets make the deformable branch a plain convolution") {
    FusionParts<double> parts;
    fuse_features(f0, f1, p, cfg, &parts);
    const T ref = conv2d(f0.shallow, p.at("fuse.deform.weight"), p.at("fuse.deform.bias"), 1, 1);
    CHECK((parts.deformed[0].value() - ref.value()).abs().maxCoeff() <= 1e-10);
  }
  SUBCASE("nearest upsampling keeps shapes") {
    const T with = fuse_features(f0, f1, p, cfg);
    DpaConfig nn_cfg = cfg;
    nn_cfg.pixelshuffle_enabled = false;
    const auto q = init_params<double>(nn_cfg, 5);
    const auto g0 = extract_features(frame(gen, 16), q, nn_cfg, 0);
    const auto g1 = extract_features(frame(gen, 16), q, nn_cfg, 1);
    FusionParts<double> a, b;
    const T without = fuse_features(g0, g1, q, nn_cfg, &b);
    fuse_features(f0, f1, p, cfg, &a);
    CHECK(without.shape() == with.shape());
    CHECK(a.aligned[0].shape() == b.aligned[0].shape());
    const auto audit = audit_graph(without);
    CHECK(audit.count("upsample_nearest") == 2);
    CHECK(audit.count("pixel_shuffle") == 0);
    CHECK(audit_graph(with).count("pixel_shuffle") == 2);
  }
  SUBCASE("resolution mismatch is rejected") {
    FeaturePair<double> bad = f0;
    bad.shallow = T::zeros({1, f0.shallow.dim(1), f0.shallow.dim(2) + 1, f0.shallow.dim(3)});
    CHECK_THROWS_AS(fuse_features(bad, f1, p, cfg), ShapeError);
  }
}

TEST_CASE("prediction head identities") {
  DpaConfig cfg = micro_config();
  auto p = init_params<double>(cfg, 7);
  Gen gen(8);
  const T a = frame(gen, 16), b = frame(gen, 16);

  for (int trial = 0; trial < 4; ++trial) {
    auto q = init_params<double>(cfg, 100 + trial);
    const auto out = predict_score(frame(gen, 16), frame(gen, 16), q, cfg);
    const V& sm = out.score_map.value();
    const V& at = out.attention_map.value();
    CHECK(std::abs(out.value() - (sm * at).sum() / at.sum()) < 1e-9);
    CHECK(out.attention_mean.item() == doctest::Approx(at.mean()).epsilon(1e-14));
    CHECK(out.value() >= 0.0);
    CHECK(out.value() <= 1.0);
    CHECK((at >= 0).all());
    CHECK((at <= 1).all());
  }

  const double ab = predict_score(a, b, p, cfg).value(), ba = predict_score(b, a, p, cfg).value();
  CHECK((ab >= 0 && ab <= 1 && ba >= 0 && ba <= 1));

  // constant attention map: zero the last attention conv
  p.at("head.attention.conv2.weight").mutable_value().setZero();
  const auto out = predict_score(a, b, p, cfg);
  CHECK(std::abs(out.value() - out.score_map.value().mean()) < 1e-12);
  CHECK_THROWS_AS(predict_score(a, T::zeros({1, 3, 16, 8}), p, cfg), ShapeError);
}

TEST_CASE("gradients reach every parameter") {
  for (bool siamese : {true, false}) {
    DpaConfig cfg = micro_config();
    cfg.siamese_enabled = siamese;
    auto p = init_params<double>(cfg, 11);
    // nonzero offsets so the offset predictor's input path is exercised
    Gen gen(12);
    p.at("fuse.offset.weight").mutable_value() = gen.vec(p.at("fuse.offset.weight").numel(), -0.1, 0.1);
    backward(predict_score(frame(gen, 16), frame(gen, 16), p, cfg).score);
    for (const auto& [name, t] : p) {
      INFO(name);
      REQUIRE(t.has_grad());
      CHECK(t.grad().abs().maxCoeff() > 0);
    }
  }
}

TEST_CASE("full-model finite differences on the micro config") {
  DpaConfig cfg = micro_config();
  auto p = init_params<double>(cfg, 13);
  Gen gen(14);
  p.at("fuse.offset.weight").mutable_value() = gen.vec(p.at("fuse.offset.weight").numel(), -0.2, 0.2);
  for (auto& [name, t] : p)
    if (name.find(".bias") != std::string::npos || name.find(".beta") != std::string::npos)
      t.mutable_value() = gen.vec(t.numel(), -0.1, 0.1);
  const T f0 = frame(gen, 16, true), f1 = frame(gen, 16, true);
  auto loss = [&] { return predict_score(f0, f1, p, cfg).score; };
  p.zero_grad();
  backward(loss());

  // up to four probed entries per tensor plus both frames
  std::vector<std::pair<std::string, T>> targets(p.begin(), p.end());
  targets.emplace_back("frame0", f0);
  targets.emplace_back("frame1", f1);
  const double eps = 1e-5;
  double num_max = 0, diff_max = 0;
  for (auto& [name, t] : targets) {
    REQUIRE(t.has_grad());
    for (int k = 0; k < 4; ++k) {
      const Index i = gen.integer(0, t.numel() - 1);
      const double saved = t.value()[i];
      t.mutable_value()[i] = saved + eps;
      const double up = loss().item();
      t.mutable_value()[i] = saved - eps;
      const double down = loss().item();
      t.mutable_value()[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      num_max = std::max(num_max, std::abs(numeric));
      diff_max = std::max(diff_max, std::abs(numeric - t.grad()[i]));
    }
  }
  const double rel = diff_max / std::max(num_max, 1e-8);
  INFO("relative error " << rel);
  CHECK(rel < 1e-3);
}

TEST_CASE("ablation flags change exactly the expected structure") {
  Gen gen(15);
  const T a = frame(gen, 16), b = frame(gen, 16);
  const DpaConfig base = micro_config();
  const auto pb = init_params<double>(base, 1);
  const auto audit_base = audit_graph(predict_score(a, b, pb, base).score);

  SUBCASE("image difference") {
    DpaConfig c = base;
    c.image_difference_enabled = false;
    const auto pc = init_params<double>(c, 1);
    const auto audit = audit_graph(predict_score(a, b, pc, c).score);
    CHECK(audit_base.count("sub") == 1);
    CHECK(audit.count("sub") == 0);
    CHECK(pc.at("fuse.out.weight").shape() == Shape{8, 32, 3, 3});
    CHECK(pb.at("fuse.out.weight").shape() == Shape{8, 48, 3, 3});
    for (const auto& [name, t] : pb)
      if (name != "fuse.out.weight") CHECK(pc.at(name).shape() == t.shape());
  }
  SUBCASE("pixel shuffle") {
    DpaConfig c = base;
    c.pixelshuffle_enabled = false;
    const auto pc = init_params<double>(c, 1);
    const auto out = predict_score(a, b, pc, c);
    const auto audit = audit_graph(out.score);
    CHECK(audit_base.count("pixel_shuffle") == 2);
    CHECK(audit.count("pixel_shuffle") == 0);
    CHECK(audit.count("upsample_nearest") == 2);
    CHECK(out.score_map.shape() == predict_score(a, b, pb, base).score_map.shape());
  }
  SUBCASE("siamese") {
    DpaConfig c = base;
    c.siamese_enabled = false;
    const auto pc = init_params<double>(c, 1);
    CHECK(count_prefix(pc, "extract") == 2 * count_prefix(pb, "extract"));
    const auto audit = audit_graph(predict_score(a, b, pc, c).score);
    // same computation, only the parameter leaves differ
    for (const auto& [op, n] : audit_base.op_counts)
      if (op != "leaf") CHECK(audit.count(op) == n);
    CHECK(audit.count("leaf") > audit_base.count("leaf"));
  }
  SUBCASE("auxiliary loss") {
    TrainingSample s{"x", a, b, 0.5, 0.3};
    DpaConfig c = base;
    c.aux_loss_enabled = false;
    const auto with = build_loss(s, pb, base, 1.0);
    const auto without = build_loss(s, pb, c, 1.0);
    CHECK(with.auxiliary.defined());
    CHECK_FALSE(without.auxiliary.defined());
    const auto aw = audit_graph(with.total), ao = audit_graph(without.total);
    CHECK(aw.count("abs") == 2);
    CHECK(ao.count("abs") == 1);
    CHECK(aw.count("mean") == ao.count("mean") + 1);
    CHECK(with.total.item() == doctest::Approx(with.difficulty.item() + with.auxiliary.item()).epsilon(1e-15));
    CHECK(without.total.item() == without.difficulty.item());
  }
}
