#include <doctest.h>

#include <cmath>
#include <limits>

#include "octproj/gradcheck.hpp"
#include "octproj/objective.hpp"
#include "test_util.hpp"

using namespace octproj;
using namespace octproj::ad;
using namespace octproj::obj;
using octproj::testing::random_tensor;

namespace {

Tensor random_image(std::size_t H, std::size_t W, Rng& rng, double lo = 0.0, double hi = 1.0) {
  return to_f32(random_tensor({H, W}, rng, lo, hi));
}

// Direct two-pass evaluation of mean local SSIM, one window at a time.
double reference_ssim(const Tensor& a, const Tensor& b) {
  const int n = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double w2[n][n], total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double di = i - 5, dj = j - 5;
      total += w2[i][j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
    }
  }
  const int H = int(a.dim(0)), W = int(a.dim(1));
  double acc = 0.0;
  int count = 0;
  for (int y = 0; y + n <= H; ++y) {
    for (int x = 0; x + n <= W; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          ma += w2[i][j] / total * a.at(y + i, x + j);
          mb += w2[i][j] / total * b.at(y + i, x + j);
        }
      }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          const double da = a.at(y + i, x + j) - ma, db = b.at(y + i, x + j) - mb;
          va += w2[i][j] / total * da * da;
          vb += w2[i][j] / total * db * db;
          cov += w2[i][j] / total * da * db;
        }
      }
      acc += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return acc / count;
}

}  // namespace

TEST_CASE("cmm: endpoints, identity at (0, 1), lookup") {
  Tape t(Precision::f64);
  const Var I = t.constant(Tensor64({3}, {0.2, 0.7, 1.3}));
  const Var out = cmm_apply(I, t.constant(Tensor64({1}, 0.2)), t.constant(Tensor64({1}, 1.3)));
  CHECK(out.value()[0] == 0.0);
  CHECK(out.value()[2] == doctest::Approx(1.0).epsilon(1e-15));

  Rng rng(3);
  const Tensor64 x = random_tensor({4, 9}, rng, -3.0, 3.0);
  const Var id = cmm_apply(t.constant(x), t.constant(Tensor64({1}, 0.0)), t.constant(Tensor64({1}, 1.0)));
  CHECK(id.value() == x);

  CmmTable table({"a", "b"});
  CHECK(table.get("b", 1) == std::pair<double, double>{0.0, 1.0});
  table.set("a", 0, -0.5, 2.0);
  CHECK(table.get("a", 0) == std::pair<double, double>{-0.5, 2.0});
  CHECK(table.get("a", 1) == std::pair<double, double>{0.0, 1.0});
  CHECK_THROWS_AS(table.get("zzz", 0), LookupError);
  CHECK_THROWS_AS(CmmTable({"a", "a"}), ContractError);
  CHECK_THROWS_AS(CmmTable(std::vector<std::string>{}), ContractError);
}

TEST_CASE("cmm: degenerate span is floored") {
  Tape t(Precision::f64);
  const Var out = cmm_apply(t.constant(Tensor64({1}, 0.5)), t.constant(Tensor64({1}, 0.5)),
                            t.constant(Tensor64({1}, 0.5)));
  CHECK(out.item() == 0.0);
  const Var out2 = cmm_apply(t.constant(Tensor64({1}, 0.5 + 1e-6)), t.constant(Tensor64({1}, 0.5)),
                             t.constant(Tensor64({1}, 0.4)));
  CHECK(out2.item() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("cmm: gradcheck over 10 seeds") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const Tensor64 I = random_tensor({2, 7}, rng, -1.0, 2.0);
    const double lo = rng.uniform(-0.5, 0.3), hi = rng.uniform(0.6, 1.5);
    const Tensor64 w = random_tensor({2, 7}, rng);
    auto fn = [&](Tape& t, std::span<const Var> in) {
      return sum(mul(cmm_apply(in[0], in[1], in[2]), t.constant(w)));
    };
    const auto rep = gradcheck(fn, {I, Tensor64({1}, lo), Tensor64({1}, hi)});
    INFO("seed " << seed << " max rel err " << rep.max_rel_err);
    CHECK(rep.passed);
  }
}

TEST_CASE("l1: examples") {
  Tape t(Precision::f64);
  Rng rng(5);
  const Tensor64 b = random_tensor({3, 5}, rng);
  CHECK(l1_loss(t.constant(b), b).item() == 0.0);
  Tensor64 a = b;
  for (auto& v : a.data()) v += 0.5;
  CHECK(l1_loss(t.constant(a), b).item() == doctest::Approx(0.5).epsilon(1e-12));
  const Tensor64 c = random_tensor({3, 5}, rng);
  CHECK(l1_loss(t.constant(a), c).item() == l1_loss(t.constant(c), a).item());
  CHECK_THROWS_AS(l1_loss(t.constant(a), Tensor64({15}, 0.0)), ShapeError);
}

TEST_CASE("feature loss: zero on equal inputs, frozen bank, offset blindness") {
  const FeatureExtractor fx({.seed = 11});
  const FeatureExtractor again({.seed = 11});
  const FeatureExtractor other({.seed = 12});
  CHECK(fx.checksum() == again.checksum());
  CHECK(fx.checksum() != other.checksum());
  REQUIRE(fx.kernels().size() == 2);
  for (const auto& k : fx.kernels()) {
    CHECK(k.dims() == Shape{8, 1, 3, 3});
    for (std::size_t c = 0; c < 8; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < 9; ++i) s += k[c * 9 + i];
      CHECK(std::abs(s) < 1e-12);
    }
  }

  Rng rng(8);
  const Tensor64 b = random_tensor({6, 20}, rng, 0.0, 1.0);
  Tape t(Precision::f64);
  CHECK(feature_loss(t.constant(b), b, fx).item() == 0.0);
  CHECK(feature_loss(t.constant(b), b, fx).item() == feature_loss(t.constant(b), b, again).item());

  Tensor64 a = b;
  for (auto& v : a.data()) v += 0.03;
  CHECK(feature_loss(t.constant(a), b, fx).item() < 1e-12);
  CHECK(l1_loss(t.constant(a), b).item() == doctest::Approx(0.03).epsilon(1e-9));

  // A bank that keeps its DC component does see the offset.
  const FeatureExtractor dc({.seed = 11, .zero_mean = false});
  CHECK(feature_loss(t.constant(a), b, dc).item() > 1e-3);

  // Structure changes are visible.
  Tensor64 s = b;
  s.data()[25] += 0.3;
  CHECK(feature_loss(t.constant(s), b, fx).item() > 1e-4);
}

TEST_CASE("feature loss: single-row maps") {
  const FeatureExtractor fx({.seed = 2});
  Rng rng(2);
  const Tensor64 b = random_tensor({1, 33}, rng);
  Tape t(Precision::f64);
  const auto f = fx.features(t.constant(b));
  REQUIRE(f.size() == 2);
  CHECK(f[0].dims() == Shape{8, 1, 33});
  CHECK(f[1].dims() == Shape{8, 1, 17});
}

TEST_CASE("losses: gradcheck over 10 seeds") {
  const FeatureExtractor fx({.seed = 4});
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    const Tensor64 p2 = random_tensor({1, 12}, rng), g2 = random_tensor({1, 12}, rng);
    const Tensor64 p3 = random_tensor({1, 12}, rng), g3 = random_tensor({1, 12}, rng);
    auto fn = [&](Tape&, std::span<const Var> in) { return combined_loss(in[0], g2, in[1], g3, 0.2, fx); };
    const auto rep = gradcheck(fn, {p2, p3});
    INFO("seed " << seed << " max rel err " << rep.max_rel_err);
    CHECK(rep.passed);

    const Tensor64 img = random_tensor({5, 9}, rng), tgt = random_tensor({5, 9}, rng);
    auto fl = [&](Tape&, std::span<const Var> in) { return feature_loss(in[0], tgt, fx); };
    const auto rep2 = gradcheck(fl, {img});
    CHECK(rep2.passed);
  }
}

TEST_CASE("combined loss: lambda handling and non-negativity") {
  const FeatureExtractor fx({.seed = 1});
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor64 p2 = random_tensor({1, 16}, rng), g2 = random_tensor({1, 16}, rng);
    const Tensor64 p3 = random_tensor({1, 16}, rng), g3 = random_tensor({1, 16}, rng);
    Tape t(Precision::f64);
    const Var a2 = t.constant(p2), a3 = t.constant(p3);
    const double only_b2 = combined_loss(a2, g2, a3, g3, 0.0, fx).item();
    CHECK(only_b2 == band_loss(a2, g2, fx).item());
    const double full = combined_loss(a2, g2, a3, g3, kDefaultLambda, fx).item();
    CHECK(full == doctest::Approx(only_b2 + 0.2 * band_loss(a3, g3, fx).item()).epsilon(1e-12));
    CHECK(full >= 0.0);
    CHECK(combined_loss(t.constant(g2), g2, t.constant(g3), g3, 0.2, fx).item() == 0.0);
    CHECK_THROWS_AS(combined_loss(a2, g2, a3, g3, -0.1, fx), ContractError);
  }
}

TEST_CASE("psnr: examples") {
  Rng rng(9);
  const Tensor a = random_image(16, 16, rng, 0.2, 0.8);
  CHECK(std::isinf(psnr(a, a)));
  Tensor b(Shape{16, 16}, 0.0f), c(Shape{16, 16}, 0.1f);
  // 0.1f is not exactly 0.1; the residual is ~1e-7 dB.
  CHECK(std::abs(psnr(b, c) - 20.0) < 1e-6);
  const Tensor d = random_image(16, 16, rng);
  CHECK(psnr(a, d) == psnr(d, a));
  CHECK(std::abs(psnr(b, c, 2.0) - (20.0 + 20.0 * std::log10(2.0))) < 1e-6);
  CHECK_THROWS_AS(psnr(a, Tensor(Shape{16, 15})), ShapeError);
}

TEST_CASE("ssim: identity, checkerboard, reference agreement") {
  Rng rng(10);
  const Tensor a = random_image(20, 24, rng);
  CHECK(ssim(a, a) == 1.0);

  Tensor cb(Shape{16, 16}), inv(Shape{16, 16});
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      cb.at(y, x) = float((x + y) % 2);
      inv.at(y, x) = 1.0f - cb.at(y, x);
    }
  }
  const double neg = ssim(cb, inv);
  CHECK(neg < 0.0);
  CHECK(neg == doctest::Approx(reference_ssim(cb, inv)).epsilon(1e-10));

  for (int trial = 0; trial < 5; ++trial) {
    const Tensor p = random_image(14 + trial, 19, rng), q = random_image(14 + trial, 19, rng);
    CHECK(std::abs(ssim(p, q) - reference_ssim(p, q)) < 1e-10);
    CHECK(ssim(p, q) <= 1.0);
    CHECK(ssim(p, q) >= -1.0);
  }
  CHECK_THROWS_AS(ssim(Tensor(Shape{10, 30}), Tensor(Shape{10, 30})), ContractError);
}

TEST_CASE("ssim: common shifts") {
  Rng rng(12);
  const Tensor a = random_image(24, 24, rng, 0.3, 0.7), b = random_image(24, 24, rng, 0.3, 0.7);
  Tensor as = a, bs = b;
  for (auto& v : as.data()) v += 0.1f;
  for (auto& v : bs.data()) v += 0.1f;
  // The contrast-structure factor only sees deviations from local means.
  CHECK(std::abs(ssim_contrast_structure(as, bs) - ssim_contrast_structure(a, b)) < 1e-6);
  // The full index is not: its luminance term depends on absolute means.
  Tensor lo(Shape{16, 16}, 0.1f), hi(Shape{16, 16}, 0.2f), lo_s(Shape{16, 16}, 0.6f), hi_s(Shape{16, 16}, 0.7f);
  CHECK(ssim(lo, hi) < ssim(lo_s, hi_s));
}

TEST_CASE("metrics: convergence to identical") {
  Rng rng(13);
  const Tensor b = random_image(16, 16, rng), noise = random_image(16, 16, rng, -0.5, 0.5);
  double prev_psnr = -1e9, prev_ssim = -2.0;
  for (double eps : {0.5, 0.2, 0.1, 0.05, 0.01, 0.001}) {
    Tensor a = b;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += float(eps * noise[i]);
    const double p = psnr(a, b), s = ssim(a, b);
    CHECK(p > prev_psnr);
    CHECK(s > prev_ssim);
    prev_psnr = p;
    prev_ssim = s;
  }
  CHECK(prev_ssim > 0.999);
}

TEST_CASE("minmax normalization") {
  Tensor t({2, 2}, {1.0f, 3.0f, 2.0f, 5.0f});
  const Tensor n = minmax_normalize(t);
  CHECK(n[0] == 0.0f);
  CHECK(n[3] == 1.0f);
  CHECK(n[1] == 0.5f);
  const Tensor z = minmax_normalize(Tensor(Shape{3, 3}, 0.4f));
  for (float v : z.vec()) CHECK(v == 0.0f);
}
