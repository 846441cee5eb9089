#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstring>
#include <fstream>
#include <set>

#include "dvfi/training.hpp"
#include "support/check.hpp"

using namespace dvfi;
using dvfi::test::Gen;
namespace fs = std::filesystem;

namespace {

DpaConfig micro() {
  DpaConfig c;
  c.input_size = 16;
  c.patch_size = 2;
  c.embed_dim = 4;
  c.window = 2;
  c.depths = {2, 1, 1, 1};
  c.heads = {1, 2, 2, 4};
  c.mlp_ratio = 2;
  return c;
}

std::vector<DifficultyRecord> synthetic_records(int count, std::uint64_t seed, int size = 32) {
  SyntheticOptions opt;
  opt.size = size;
  return annotate_all(generate_synthetic(count, {0, 2, 8, 16}, seed, opt));
}

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("dvfi_training_" + name); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

std::uint64_t header_length(const std::string& bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  return v;
}

std::string with_header(const std::string& bytes, const std::string& header) {
  std::string out = bytes.substr(0, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(header.size() >> (8 * i)));
  return out + header + bytes.substr(16 + header_length(bytes));
}

CheckpointError::Kind load_error_kind(const fs::path& p, std::string* message = nullptr) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  FAIL("checkpoint loaded unexpectedly");
  return CheckpointError::Kind::corrupt_header;
}

} // namespace

TEST_CASE("losses") {
  CHECK(difficulty_loss(0.5, 0.5) == 0.0);
  CHECK(difficulty_loss(0.0, 1.0) == 1.0);
  const std::vector<double> preds{0.2, 0.8}, gts{0.3, 0.6};
  CHECK(difficulty_loss(preds, gts) == doctest::Approx(0.15).epsilon(1e-12));
  CHECK_THROWS_AS(difficulty_loss(1.2, 0.5), ValidationError);
  CHECK_THROWS_AS(difficulty_loss(0.5, -0.1), ValidationError);
  CHECK_THROWS_AS(difficulty_loss(std::vector<double>{0.1}, gts), ValidationError);

  CHECK(auxiliary_loss(0.4, 0.4) == 0.0);
  CHECK(auxiliary_loss(0.25, 0.75) == 0.5);
  CHECK_THROWS_AS(auxiliary_loss(0.5, 1.5), ValidationError);

  Gen gen(1);
  for (int i = 0; i < 50; ++i) {
    const double a = gen.uniform(0, 1), b = gen.uniform(0, 1);
    CHECK(difficulty_loss(a, b) >= 0);
    CHECK(auxiliary_loss(a, b) == difficulty_loss(a, b));
    CHECK(difficulty_loss(a, a) == 0);
  }
}

TEST_CASE("perceptual proxy") {
  SyntheticOptions opt;
  opt.size = 64;
  opt.rotation_fraction = 0;
  const Image img = (*generate_synthetic(1, {0}, 2, opt)[0].frames)[0];
  CHECK(perceptual_proxy(img, img) == doctest::Approx(0.0).epsilon(1e-12));

  Image inv = img;
  for (auto& p : inv.data) p = static_cast<std::uint8_t>(255 - p);
  CHECK(perceptual_proxy(img, inv) > 0.9);

  double prev = 0;
  for (int shift : {1, 4, 8}) {
    Image moved(img.width, img.height, img.channels);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < img.channels; ++c) moved.at(x, y, c) = img.at(std::max(0, x - shift), y, c);
    const double d = perceptual_proxy(img, moved);
    CHECK(d >= prev);
    CHECK(d <= 1.0);
    prev = d;
  }
  CHECK_THROWS_AS(perceptual_proxy(img, Image(32, 32, 3)), ShapeError);
}

TEST_CASE("identical frames reduce the auxiliary loss to the attention mean") {
  const DpaConfig cfg = micro();
  const auto params = init_params<double>(cfg, 3);
  auto rec = synthetic_records(1, 4)[0];
  const TrainingSample s = make_sample(rec, cfg);
  CHECK(s.perceptual == doctest::Approx(0.0).epsilon(1e-12));
  const LossGraph g = build_loss(s, params, cfg, 1.0);
  CHECK(g.auxiliary.item() == doctest::Approx(g.output.attention_mean.item()).epsilon(1e-12));
  CHECK(g.total.item() == doctest::Approx(g.difficulty.item() + g.auxiliary.item()).epsilon(1e-12));

  DpaConfig off = cfg;
  off.aux_loss_enabled = false;
  const LossGraph h = build_loss(s, params, off, 1.0);
  CHECK_FALSE(h.auxiliary.defined());
  CHECK(h.total.item() == g.difficulty.item());
}

TEST_CASE("single record overfits") {
  const DpaConfig cfg = micro();
  auto records = synthetic_records(3, 5);
  records.erase(records.begin(), records.begin() + 2); // the magnitude-8 record
  TrainHyper hyper;
  hyper.lr = 1e-3;
  hyper.steps = 200;
  hyper.batch = 1;
  hyper.seed = 6;
  const auto report = train(records, cfg, hyper);
  REQUIRE(report.history.size() == 200);
  const auto sample = make_sample(records[0], cfg);
  const double score = predict_score(sample.frame0, sample.frame1, report.checkpoint.params, cfg).value();
  INFO("target " << records[0].score << " predicted " << score);
  CHECK(difficulty_loss(score, records[0].score) < 0.02);
  CHECK(report.history.back().total < report.history.front().total);
}

TEST_CASE("training is deterministic and resumable") {
  const DpaConfig cfg = micro();
  const auto records = synthetic_records(6, 7);
  std::vector<TrainingSample> samples;
  for (const auto& r : records) samples.push_back(make_sample(r, cfg));
  TrainHyper hyper;
  hyper.steps = 6;
  hyper.batch = 2;
  hyper.seed = 11;

  const auto a = train(samples, cfg, hyper), b = train(samples, cfg, hyper);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].total == b.history[i].total);
  for (const auto& [name, t] : a.checkpoint.params) CHECK((t.value() == b.checkpoint.params.at(name).value()).all());
  CHECK(a.checkpoint.meta.step == 6);
  CHECK(a.checkpoint.meta.loss_tail.size() == 6);

  hyper.seed = 12;
  const auto c = train(samples, cfg, hyper);
  CHECK(c.history.front().total != a.history.front().total);

  hyper.seed = 11;
  hyper.steps = 4;
  std::vector<std::int64_t> steps;
  const auto resumed = train(samples, cfg, hyper, &a.checkpoint, [&](std::int64_t s, const LossBreakdown&) { steps.push_back(s); });
  CHECK(resumed.checkpoint.meta.step == 10);
  CHECK(steps == std::vector<std::int64_t>{6, 7, 8, 9});
  CHECK(resumed.checkpoint.meta.loss_tail.size() == 10);

  DpaConfig other = cfg;
  other.mlp_ratio = 4;
  CHECK_THROWS_AS(train(samples, other, hyper, &a.checkpoint), ValidationError);
  CHECK_THROWS_AS(train(std::vector<TrainingSample>{}, cfg, hyper), ValidationError);
  hyper.lr = 0;
  CHECK_THROWS_AS(train(samples, cfg, hyper), ValidationError);
}

TEST_CASE("divergence names the step") {
  const DpaConfig cfg = micro();
  auto sample = make_sample(synthetic_records(1, 8)[0], cfg);
  sample.frame0.mutable_value()[0] = std::nan("");
  TrainHyper hyper;
  hyper.steps = 3;
  hyper.batch = 1;
  try {
    train(std::vector<TrainingSample>{sample}, cfg, hyper);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip and errors") {
  Checkpoint ck;
  ck.config = micro();
  ck.params = init_params<double>(ck.config, 21);
  ck.meta.step = 42;
  ck.meta.seed = 9;
  ck.meta.loss_tail = {0.5, 0.25, 1.0 / 3};
  const fs::path path = temp_file("ckpt.bin"), bad = temp_file("bad.bin");
  save_checkpoint(ck, path);

  const Checkpoint back = load_checkpoint(path);
  CHECK(back.config == ck.config);
  CHECK(back.meta.step == 42);
  CHECK(back.meta.seed == 9);
  CHECK(back.meta.loss_tail == ck.meta.loss_tail);
  CHECK(back.params.size() == ck.params.size());
  for (const auto& [name, t] : ck.params) {
    const auto& u = back.params.at(name);
    CHECK(u.shape() == t.shape());
    CHECK(std::memcmp(u.value().data(), t.value().data(), sizeof(double) * t.numel()) == 0);
  }
  save_checkpoint(back, bad);
  CHECK(slurp(bad) == slurp(path));

  const std::string bytes = slurp(path);
  SUBCASE("bad magic") {
    spill(bad, "NOTACKPT" + bytes.substr(8));
    CHECK(load_error_kind(bad) == CheckpointError::Kind::corrupt_header);
  }
  SUBCASE("garbled header") {
    std::string broken = bytes;
    broken[16] = '#'; // opening brace of the JSON header
    spill(bad, broken);
    CHECK(load_error_kind(bad) == CheckpointError::Kind::corrupt_header);
  }
  SUBCASE("edited shape names the tensor") {
    auto header = nlohmann::json::parse(bytes.substr(16, header_length(bytes)));
    for (auto& t : header["tensors"])
      if (t["name"] == "head.score.conv2.bias") t["shape"] = {2};
    spill(bad, with_header(bytes, header.dump()));
    std::string message;
    CHECK(load_error_kind(bad, &message) == CheckpointError::Kind::shape_mismatch);
    CHECK(message.find("head.score.conv2.bias") != std::string::npos);
  }
  SUBCASE("truncated blob") {
    spill(bad, bytes.substr(0, bytes.size() - 100));
    CHECK(load_error_kind(bad) == CheckpointError::Kind::truncated_blob);
  }
  SUBCASE("checkpoint errors are format errors") {
    spill(bad, bytes.substr(0, 10));
    CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
  }
  CHECK_THROWS_AS(load_checkpoint(temp_file("missing.bin")), IoError);
  fs::remove(path);
  fs::remove(bad);
}

TEST_CASE("training config file") {
  const auto cfg = parse_training_config(R"(# micro run
lr = 0.001
steps = 50
batch = 2   # per step
seed = 3
lambda = 0.5
input_size = 16
patch_size = 2
embed_dim = 4
window = 2
depths = 2, 1, 1, 1
heads = 1,2,2,4
mlp_ratio = 2
pixelshuffle = off
aux_loss = false
)");
  CHECK(cfg.hyper.lr == 0.001);
  CHECK(cfg.hyper.steps == 50);
  CHECK(cfg.hyper.batch == 2);
  CHECK(cfg.hyper.seed == 3);
  CHECK(cfg.hyper.lambda == 0.5);
  DpaConfig expected = micro();
  expected.pixelshuffle_enabled = false;
  expected.aux_loss_enabled = false;
  CHECK(cfg.model == expected);

  CHECK(parse_training_config("").model == DpaConfig{});
  auto line_of = [](const std::string& text) {
    try {
      parse_training_config(text);
    } catch (const FormatError& e) {
      return e.line();
    }
    return -2L;
  };
  CHECK(line_of("lr = 1e-3\nbogus = 1\n") == 2);
  CHECK(line_of("steps = many\n") == 1);
  CHECK(line_of("\n\nno equals sign\n") == 3);
  CHECK(line_of("depths = 1,1,1\n") == 1);
  CHECK(line_of("siamese = maybe\n") == 1);
  CHECK_THROWS_AS(parse_training_config("window = 3\n"), ValidationError);
  CHECK_THROWS_AS(read_training_config(temp_file("missing.cfg")), IoError);
}

TEST_CASE("augmentation variants") {
  const DpaConfig cfg = micro();
  const auto s = make_sample(synthetic_records(3, 9)[2], cfg);
  auto same = [](const nn::Tensor<double>& a, const nn::Tensor<double>& b) { return (a.value() == b.value()).all(); };

  const auto id = augmented(s, 0);
  CHECK(same(id.frame0, s.frame0));
  CHECK(same(id.frame1, s.frame1));
  const auto swapped = augmented(s, 1);
  CHECK(same(swapped.frame0, s.frame1));
  CHECK(same(swapped.frame1, s.frame0));

  std::set<std::vector<double>> distinct;
  for (int code = 0; code < 16; ++code) {
    const auto v = augmented(s, code);
    CHECK(v.target == s.target);
    CHECK(v.perceptual == s.perceptual);
    CHECK(v.frame0.shape() == s.frame0.shape());
    // every variant rearranges pixels, so values are a permutation
    std::vector<double> a(v.frame0.value().begin(), v.frame0.value().end()),
        b((code & 1 ? s.frame1 : s.frame0).value().begin(), (code & 1 ? s.frame1 : s.frame0).value().end());
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    distinct.insert(std::vector<double>(v.frame0.value().begin(), v.frame0.value().end()));
  }
  CHECK(distinct.size() == 16);

  // transposing twice, or mirroring twice, restores the frame
  CHECK(same(augmented(augmented(s, 2), 2).frame0, s.frame0));
  CHECK(same(augmented(augmented(s, 12), 12).frame0, s.frame0));
  CHECK_THROWS_AS(augmented(s, 16), ValidationError);

  CHECK_FALSE(parse_training_config("augment = off\n").hyper.augment);
  CHECK(TrainHyper{}.augment);
}
