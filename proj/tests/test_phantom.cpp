#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "octproj/dpm.hpp"
#include "octproj/io.hpp"
#include "octproj/phantom.hpp"
#include "test_util.hpp"

using namespace octproj;
using namespace octproj::phantom;
using octproj::testing::read_file;
using octproj::testing::TempDir;

namespace {

PhantomSpec small_spec(std::uint64_t seed = 3) {
  PhantomSpec s;
  s.D = 6;
  s.H = 96;
  s.W = 40;
  s.seed = seed;
  s.vessels = 3;
  return s;
}

double mean(const Tensor& t) {
  double s = 0;
  for (float v : t.vec()) s += v;
  return s / double(t.size());
}

Tensor64 rows_of(const Tensor& curves, std::size_t k, std::size_t H) {
  const std::size_t D = curves.dim(0), W = curves.dim(2);
  Tensor64 r({D, W});
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t w = 0; w < W; ++w) r.at(d, w) = dpm::to_pixel(curves.at(d, k, w), H);
  }
  return r;
}

void check_ordering(const Phantom& p) {
  const auto r0 = rows_of(p.truth.curves, 0, p.spec.H), r1 = rows_of(p.truth.curves, 1, p.spec.H);
  const auto r2 = rows_of(p.truth.curves, 2, p.spec.H);
  for (std::size_t i = 0; i < r0.size(); ++i) {
    CHECK(r1[i] - r0[i] >= p.spec.min_gap_px);
    CHECK(r2[i] - r1[i] >= p.spec.min_gap_px);
  }
}

}  // namespace

TEST_CASE("phantom: determinism by seed") {
  const Phantom a = generate(small_spec()), b = generate(small_spec()), c = generate(small_spec(4));
  CHECK(a.oct == b.oct);
  CHECK(a.octa == b.octa);
  CHECK(a.truth.curves == b.truth.curves);
  CHECK(a.truth.gt_pm_b2 == b.truth.gt_pm_b2);
  CHECK_FALSE(a.oct == c.oct);
  PhantomSpec other = small_spec();
  other.subject_id = "phantom_001";
  CHECK_FALSE(generate(other).truth.curves == a.truth.curves);
}

TEST_CASE("phantom: value range, lattice, ordering, band contrast") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Phantom p = generate(small_spec(seed));
    for (float v : p.oct.vec()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(io::quantize(p.oct, 65535) == p.oct);
    CHECK(p.truth.curves.dims() == Shape{6, 3, 40});
    CHECK(dpm::crossing_fraction(p.truth.curves) == 0.0);
    check_ordering(p);
    CHECK(mean(p.truth.gt_raw_b2) > mean(p.truth.gt_raw_b3));
    // OCTA vessels are bright, so the OCTA B2 projection sits above its background.
    CHECK(mean(p.truth.octa_raw_b2) > 0.03);
    CHECK(p.truth.vessels.size() == 3);
  }
}

TEST_CASE("phantom: gt projection agrees with the projection module") {
  PhantomSpec spec;  // 32 x 128 x 128
  spec.seed = 11;
  const Phantom p = generate(spec);
  const Tensor b2 = dpm::project_volume(p.oct, p.truth.curves, dpm::kBandB2, 256, dpm::PoolMode::mean);
  const Tensor b3 = dpm::project_volume(p.oct, p.truth.curves, dpm::kBandB3, 256, dpm::PoolMode::mean);
  CHECK(mean_abs_diff(b2, p.truth.gt_raw_b2) < 1e-3);
  CHECK(mean_abs_diff(b3, p.truth.gt_raw_b3) < 1e-3);
}

TEST_CASE("phantom: flat noise-free retina gives a constant projection") {
  PhantomSpec s = small_spec();
  s.noise = 0.0;
  s.texture = 0.0;
  s.vessels = 0;
  s.amplitude = 0.0;
  s.layer_amplitude = 0.0;
  const Phantom p = generate(s);
  const auto [lo, hi] = std::minmax_element(p.truth.gt_raw_b2.vec().begin(), p.truth.gt_raw_b2.vec().end());
  CHECK(*lo == *hi);
  for (float v : p.truth.gt_pm_b2.vec()) CHECK(v == 0.0f);

  // With curved surfaces the only variation left is partial-volume edges.
  s.amplitude = 0.08;
  s.layer_amplitude = 0.02;
  const Phantom q = generate(s);
  const auto [lo2, hi2] = std::minmax_element(q.truth.gt_raw_b2.vec().begin(), q.truth.gt_raw_b2.vec().end());
  CHECK(*hi2 - *lo2 < 0.05);
  CHECK(*hi2 <= s.inner + 1e-6);
}

TEST_CASE("phantom: band textures are independent") {
  PhantomSpec s = small_spec();
  s.noise = 0.0;
  s.vessels = 0;
  s.amplitude = 0.0;
  s.layer_amplitude = 0.0;
  const Phantom p = generate(s);
  const Tensor &a = p.truth.gt_raw_b2, &b = p.truth.gt_raw_b3;
  const double ma = mean(a), mb = mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  CHECK(saa > 0);
  CHECK(sbb > 0);
  CHECK(std::abs(sab / std::sqrt(saa * sbb)) < 0.9);
  for (float v : a.vec()) CHECK(std::abs(v / s.inner - 1.0) <= s.texture + 1e-3);
  s.texture = 1.0;
  CHECK_THROWS_AS(generate(s), ContractError);
}

TEST_CASE("phantom: band average of a linear column is exact") {
  Tensor vol({1, 10, 2});
  for (std::size_t r = 0; r < 10; ++r) {
    vol.at(0, r, 0) = float(r) / 10.0f;
    vol.at(0, r, 1) = 0.5f;
  }
  Tensor64 up({1, 2}, {1.25, 0.0}), lo({1, 2}, {6.5, 9.0});
  const Tensor avg = band_average(vol, up, lo);
  CHECK(avg.at(0, 0) == doctest::Approx((1.25 + 6.5) / 20.0).epsilon(1e-6));
  CHECK(avg.at(0, 1) == doctest::Approx(0.5).epsilon(1e-7));
}

TEST_CASE("phantom: infeasible specs are rejected") {
  PhantomSpec s = small_spec();
  s.H = 30;
  CHECK_THROWS_AS(generate(s), ContractError);
  s = small_spec();
  s.layer_amplitude = 0.3;
  CHECK_THROWS_AS(generate(s), ContractError);
  s = small_spec();
  s.amplitude = 1.0;
  CHECK_THROWS_AS(generate(stress_spec(s, StressKind::steep)), ContractError);
  s = small_spec();
  s.contrast_max = 1.5;
  CHECK_THROWS_AS(generate(s), ContractError);
}

TEST_CASE("phantom: stress variants") {
  PhantomSpec base = small_spec(8);
  base.D = 16;
  base.W = 48;
  const Phantom ref = generate(base);
  const auto cases = stress_cases(base);
  REQUIRE(cases.size() == 3);
  const Phantom& lesion = cases[0];
  const Phantom& steep = cases[1];
  const Phantom& lowq = cases[2];

  CHECK(lesion.truth.curves == ref.truth.curves);
  CHECK_FALSE(lesion.oct == ref.oct);

  check_ordering(steep);
  const auto r_ref = rows_of(ref.truth.curves, 1, base.H), r_steep = rows_of(steep.truth.curves, 1, base.H);
  const auto [a0, a1] = std::minmax_element(r_ref.vec().begin(), r_ref.vec().end());
  const auto [b0, b1] = std::minmax_element(r_steep.vec().begin(), r_steep.vec().end());
  CHECK((*b1 - *b0) > 3.0 * (*a1 - *a0));

  // Residual noise is larger in the lower-right en-face quadrant only.
  auto resid = [&](const Phantom& p, bool quadrant) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t d = 0; d < base.D; ++d) {
      for (std::size_t w = 0; w < base.W; ++w) {
        if ((d >= base.D / 2 && w >= base.W / 2) != quadrant) continue;
        for (std::size_t r = 0; r < 10; ++r) {  // background rows above the ILM
          const double v = p.oct.at(d, r, w) - base.background;
          s += v * v;
          ++n;
        }
      }
    }
    return std::sqrt(s / double(n));
  };
  CHECK(resid(lowq, true) > 3.0 * resid(ref, true));
  CHECK(resid(lowq, false) == doctest::Approx(resid(ref, false)).epsilon(1e-9));
}

TEST_CASE("phantom: splits") {
  std::vector<std::string> ids{"phantom_000", "phantom_001", "phantom_002", "phantom_003", "phantom_004"};
  const Split s = split_subjects(ids, 7);
  CHECK(s.train.size() == 3);
  CHECK(s.val.size() == 1);
  CHECK(s.test.size() == 1);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 5);
  for (std::size_t n : {3u, 4u, 9u, 10u, 23u}) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
    const Split t = split_subjects(v, 1);
    const std::size_t held = std::max<std::size_t>(1, n / 5);
    CHECK(t.val.size() == held);
    CHECK(t.test.size() == held);
    CHECK(t.train.size() == n - 2 * held);
  }
  CHECK_THROWS_AS(split_subjects({"a", "b"}, 1), ContractError);
}

TEST_CASE("phantom: dataset export") {
  TempDir a("ds_a"), b("ds_b");
  PhantomSpec spec = small_spec(5);
  spec.D = 3;
  const Split s = export_dataset(a.path(), 5, spec, true);
  export_dataset(b.path(), 5, spec, true);
  for (const auto& id : s.train) {
    const fs::path dir = a / "train" / id;
    CHECK(id.rfind("phantom_", 0) == 0);
    CHECK(id.size() == 11);
    for (const char* f : {"truth_curves.tsr", "gt_pm_b2.pgm", "gt_pm_b2.tsr", "gt_pm_b3.pgm", "gt_pm_b3.tsr",
                          "oct/meta.json", "octa/meta.json", "oct/slice_0002.pgm"}) {
      CHECK(fs::exists(dir / f));
    }
    const io::Volume v = io::load_volume(dir / "oct");
    PhantomSpec sub = spec;
    sub.subject_id = id;
    CHECK(v.data == generate(sub).oct);
    CHECK(v.meta.subject_id == id);
    CHECK(read_file(dir / "oct/slice_0001.pgm") == read_file(b / "train" / id / "oct/slice_0001.pgm"));
  }
  const std::string test_id = s.test.front();
  for (const char* k : {"lesion", "steep", "lowq"}) CHECK(fs::exists(a / "test" / (test_id + "_" + k) / "oct"));
  CHECK(read_file(a / "dataset.json") == read_file(b / "dataset.json"));
  CHECK_THROWS_AS(export_dataset(a / "x", 2, spec), ContractError);
}
