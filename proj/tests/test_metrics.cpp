#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dvfi/metrics.hpp"
#include "support/check.hpp"

using namespace dvfi;
using dvfi::test::Gen;

namespace {

Image filled(int w, int h, int c, std::uint8_t v) { return Image(w, h, c, v); }

double oracle_psnr(const Image& a, const Image& b) {
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  return mse == 0 ? 99.0 : 10.0 * std::log10(255.0 * 255.0 / mse);
}

RoutingDecision decision(double psnr, double ssim, BackendKind kind, double latency) {
  RoutingDecision d;
  d.psnr = psnr;
  d.ssim = ssim;
  d.chosen = kind;
  d.latency = latency;
  return d;
}

} // namespace

TEST_CASE("psnr") {
  Gen gen(1);
  const Image a = gen.image(16, 12);
  CHECK(psnr(a, a) == kPsnrCap);

  Image b = filled(9, 7, 3, 100), c = filled(9, 7, 3, 101);
  CHECK(std::abs(psnr(b, c) - 48.1308) <= 1e-4);
  CHECK(psnr(b, c) == doctest::Approx(20 * std::log10(255.0)).epsilon(1e-14));

  for (int trial = 0; trial < 5; ++trial) {
    const Image x = gen.image(13, 11, trial % 2 ? 1 : 3), y = gen.image(13, 11, trial % 2 ? 1 : 3);
    CHECK(std::abs(psnr(x, y) - oracle_psnr(x, y)) <= 1e-9);
    CHECK(psnr(x, y) == psnr(y, x));
  }
  CHECK_THROWS_AS(psnr(filled(4, 4, 3, 0), filled(4, 5, 3, 0)), ShapeError);
  CHECK_THROWS_AS(psnr(filled(4, 4, 3, 0), filled(4, 4, 1, 0)), ShapeError);
}

TEST_CASE("psnr decreases with noise amplitude") {
  Gen gen(2);
  const Image base = gen.image(32, 32);
  for (int trial = 0; trial < 10; ++trial) {
    double prev = kPsnrCap + 1;
    for (int amp : {2, 8, 32, 96}) {
      Image noisy = base;
      for (auto& p : noisy.data)
        p = static_cast<std::uint8_t>(std::clamp<long>(p + gen.integer(-amp, amp), 0, 255));
      const double v = psnr(base, noisy);
      CHECK(v < prev);
      prev = v;
    }
  }
}

TEST_CASE("ssim") {
  Gen gen(3);
  const Image a = gen.image(24, 20);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  Image neg = a;
  for (auto& p : neg.data) p = static_cast<std::uint8_t>(255 - p);
  CHECK(ssim(a, neg) < 0.3);

  SUBCASE("constant images follow the closed form") {
    const double c1 = std::pow(0.01 * 255, 2);
    for (int v : {0, 50, 200}) {
      const double x = v, y = v + 10;
      const double expected = (2 * x * y + c1) / (x * x + y * y + c1); // structure term is C2/C2
      CHECK(ssim(filled(16, 16, 1, static_cast<std::uint8_t>(v)), filled(16, 16, 1, static_cast<std::uint8_t>(v + 10))) ==
            doctest::Approx(expected).epsilon(1e-12));
    }
  }
  SUBCASE("bounded and symmetric") {
    for (int trial = 0; trial < 5; ++trial) {
      const Image x = gen.image(15, 17), y = gen.image(15, 17);
      const double s = ssim(x, y);
      CHECK(std::abs(s) <= 1.0);
      CHECK(s == doctest::Approx(ssim(y, x)).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS(ssim(filled(10, 10, 1, 0), filled(10, 10, 1, 0)), ShapeError);
}

TEST_CASE("tolerance accuracy") {
  const std::vector<double> p1{0.5}, g1{0.6}, g2{0.75};
  CHECK(tolerance_accuracy(p1, g1, 0.125) == 1.0);
  CHECK(tolerance_accuracy(p1, g2, 0.25) == 0.0);
  const std::vector<double> preds{0, 1.0 / 3, 2.0 / 3, 1}, gts(4, 1.0 / 3);
  CHECK(tolerance_accuracy(preds, gts, 0.25) == 0.25);
  CHECK_THROWS_AS(tolerance_accuracy(preds, p1, 0.25), ValidationError);
  CHECK_THROWS_AS(tolerance_accuracy(std::vector<double>{}, std::vector<double>{}, 0.25), ValidationError);

  Gen gen(4);
  std::vector<double> p(50), g(50);
  for (std::size_t i = 0; i < 50; ++i) {
    p[i] = gen.uniform(0, 1);
    g[i] = gen.uniform(0, 1);
  }
  double prev = 0;
  for (int k = 0; k <= 40; ++k) {
    const double acc = tolerance_accuracy(p, g, k * 0.025);
    CHECK(acc >= prev);
    prev = acc;
  }
}

TEST_CASE("report formatting and grouping") {
  const RoutingDecision one = decision(40.0068, 0.9904, BackendKind::fast, 0.01);
  const std::vector<std::string> easy{"Easy"};
  const auto rows = build_report(std::span<const RoutingDecision>(&one, 1), easy);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].formatted() == "40.0068/0.9904");
  CHECK(format_quality(40.0068, 0.9904) == "40.0068/0.9904");
  CHECK(rows[0].routed_fast_fraction == 1.0);

  // six records, hand grouped
  const std::vector<RoutingDecision> ds{decision(30, 0.9, BackendKind::fast, 1), decision(20, 0.5, BackendKind::accurate, 3),
                                        decision(40, 0.7, BackendKind::accurate, 5), decision(10, 0.1, BackendKind::fast, 2),
                                        decision(50, 0.3, BackendKind::fast, 4), decision(26, 0.2, BackendKind::accurate, 6)};
  const std::vector<std::string> tags{"Hard", "Easy", "Hard", "Extreme", "Easy", "Hard"};
  const auto r = build_report(ds, tags);
  REQUIRE(r.size() == 3);
  CHECK(r[0].subset == "Easy");
  CHECK(r[0].n == 2);
  CHECK(r[0].psnr_mean == 35.0);
  CHECK(r[0].ssim_mean == doctest::Approx(0.4));
  CHECK(r[0].routed_fast_fraction == 0.5);
  CHECK(r[0].latency_mean == 3.5);
  CHECK(r[1].subset == "Hard");
  CHECK(r[1].n == 3);
  CHECK(r[1].psnr_mean == 32.0);
  CHECK(r[1].routed_fast_fraction == doctest::Approx(1.0 / 3));
  CHECK(r[1].latency_mean == 4.0);
  CHECK(r[2].subset == "Extreme");
  CHECK(r[2].psnr_mean == 10.0);

  const auto all = summarize(ds);
  CHECK(all.subset == "All");
  CHECK(all.n == 6);
  CHECK(all.psnr_mean == doctest::Approx(176.0 / 6));
  CHECK(all.routed_fast_fraction == 0.5);

  const auto j = to_json(r[0]);
  for (const char* key : {"subset", "psnr_mean", "ssim_mean", "routed_fast_fraction", "latency_mean", "n"})
    CHECK(j.contains(key));
  CHECK(j.size() == 6);

  const std::vector<std::string> bad{"Easy", "Easy", "Trivial", "Easy", "Easy", "Easy"};
  CHECK_THROWS_AS(build_report(ds, bad), ValidationError);
  CHECK_THROWS_AS(parse_subset("easy"), ValidationError);
}
