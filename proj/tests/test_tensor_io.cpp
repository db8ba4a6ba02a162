#include <doctest.h>

#include <cstring>

#include "octproj/io.hpp"
#include "octproj/rng.hpp"
#include "test_util.hpp"

using namespace octproj;
using octproj::testing::TempDir;
using octproj::testing::write_file;

TEST_CASE("tensor constructor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor64(Shape{1}, std::vector<double>{std::nan("")}), NumericError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at(1, 2) == 6.0f);
  CHECK(t.sub(1).dims() == Shape{3});
}

TEST_CASE("read_pgm scales 8-bit samples") {
  TempDir dir("pgm8");
  write_file(dir / "a.pgm", std::string("P5\n# comment line\n2 2\n255\n") + std::string("\x00\xff\x80\x40", 4));
  const Tensor t = io::read_pgm(dir / "a.pgm");
  REQUIRE(t.dims() == Shape{2, 2});
  CHECK(t.at(0, 0) == 0.0f);
  CHECK(t.at(0, 1) == 1.0f);
  CHECK(t.at(1, 0) == doctest::Approx(0.50196).epsilon(1e-5));
  CHECK(t.at(1, 1) == doctest::Approx(0.25098).epsilon(1e-5));
}

TEST_CASE("read_pgm 16-bit full scale maps to one") {
  TempDir dir("pgm16");
  write_file(dir / "a.pgm", std::string("P5 1 1 65535\n") + std::string("\xff\xff", 2));
  CHECK(io::read_pgm(dir / "a.pgm")[0] == 1.0f);
}

TEST_CASE("read_pgm rejects ASCII and bad headers, detects truncation") {
  TempDir dir("pgmbad");
  write_file(dir / "ascii.pgm", "P2\n1 1\n255\n0\n");
  CHECK_THROWS_AS(io::read_pgm(dir / "ascii.pgm"), FormatError);
  write_file(dir / "maxval.pgm", std::string("P5\n1 1\n1023\n") + std::string("\x00\x00", 2));
  CHECK_THROWS_AS(io::read_pgm(dir / "maxval.pgm"), FormatError);
  write_file(dir / "short.pgm", std::string("P5\n4 4\n255\n") + std::string("\x01\x02", 2));
  CHECK_THROWS_AS(io::read_pgm(dir / "short.pgm"), IoError);
  CHECK_THROWS_AS(io::read_pgm(dir / "missing.pgm"), IoError);
}

TEST_CASE("write_pgm quantizes with round-half-up and clamps") {
  TempDir dir("pgmw");
  io::write_pgm(Tensor({1, 1}, {0.5f}), dir / "half.pgm", 255);
  const std::string half = octproj::testing::read_file(dir / "half.pgm");
  CHECK(static_cast<unsigned char>(half.back()) == 128);

  io::write_pgm(Tensor({1, 2}, {-0.1f, 1.2f}), dir / "clamp.pgm", 255);
  const std::string clamp = octproj::testing::read_file(dir / "clamp.pgm");
  CHECK(static_cast<unsigned char>(clamp[clamp.size() - 2]) == 0);
  CHECK(static_cast<unsigned char>(clamp[clamp.size() - 1]) == 255);

  CHECK_THROWS_AS(io::write_pgm(Tensor(Shape{2, 2, 2}), dir / "x.pgm", 255), ShapeError);
}

TEST_CASE("pgm round trip equals quantize for random images") {
  TempDir dir("pgmrt");
  Rng rng(11, "pgm");
  for (int maxval : {255, 65535}) {
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<float> v(7 * 9);
      for (auto& x : v) x = static_cast<float>(rng.uniform());
      const Tensor t({7, 9}, v);
      io::write_pgm(t, dir / "rt.pgm", maxval);
      CHECK(max_abs_diff(io::read_pgm(dir / "rt.pgm"), io::quantize(t, maxval)) == 0.0);
    }
  }
}

TEST_CASE("tsr round trip is bit-exact") {
  TempDir dir("tsr");
  Rng rng(3, "tsr");
  std::vector<float> v(3 * 400);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 10.0));
  const Tensor t({3, 400}, v);
  io::write_tsr(t, dir / "a.tsr");
  const Tensor back = io::read_tsr(dir / "a.tsr");
  REQUIRE(back.dims() == t.dims());
  CHECK(std::memcmp(back.data().data(), t.data().data(), t.size() * sizeof(float)) == 0);
}

TEST_CASE("tsr header validation") {
  TempDir dir("tsrbad");
  auto header = [](const char* magic, std::uint8_t dtype, std::uint8_t ndim) {
    std::string s(magic, 4);
    s += std::string("\x01\x00", 2);
    s.push_back(char(dtype));
    s.push_back(char(ndim));
    return s;
  };
  write_file(dir / "magic.tsr", header("XXXX", 0, 1) + std::string("\x01\x00\x00\x00", 4) + std::string(4, '\0'));
  CHECK_THROWS_AS(io::read_tsr(dir / "magic.tsr"), FormatError);
  write_file(dir / "dtype.tsr", header("DTSR", 1, 1) + std::string("\x01\x00\x00\x00", 4) + std::string(4, '\0'));
  CHECK_THROWS_AS(io::read_tsr(dir / "dtype.tsr"), FormatError);
  write_file(dir / "empty.tsr", header("DTSR", 0, 0));
  CHECK_THROWS_AS(io::read_tsr(dir / "empty.tsr"), FormatError);
  write_file(dir / "ndim.tsr", header("DTSR", 0, 9) + std::string(36, '\x01'));
  CHECK_THROWS_AS(io::read_tsr(dir / "ndim.tsr"), FormatError);
}

TEST_CASE("tsr byte layout") {
  TempDir dir("tsrlayout");
  io::write_tsr(Tensor({1, 2}, {1.0f, -2.0f}), dir / "a.tsr");
  const std::string b = octproj::testing::read_file(dir / "a.tsr");
  REQUIRE(b.size() == 4 + 2 + 1 + 1 + 8 + 8);
  CHECK(b.substr(0, 4) == "DTSR");
  CHECK(b[4] == 1);
  CHECK(b[5] == 0);
  CHECK(b[6] == 0);
  CHECK(b[7] == 2);
  CHECK(b[8] == 1);
  CHECK(b[12] == 2);
  // 1.0f little-endian is 00 00 80 3f
  CHECK(static_cast<unsigned char>(b[19]) == 0x3f);
}

TEST_CASE("volume directory load and consistency errors") {
  TempDir dir("vol");
  Rng rng(5, "vol");
  std::vector<float> v(4 * 6 * 5);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  const Tensor data = io::quantize(Tensor({4, 6, 5}, v), 65535);
  io::VolumeMeta meta{"phantom_000", io::Modality::OCT, 4, 6, 5, {0.0, 1.0}};
  io::save_volume(dir / "oct", meta, data);

  const io::Volume vol = io::load_volume(dir / "oct");
  CHECK(vol.data.dims() == Shape{4, 6, 5});
  CHECK(vol.meta.subject_id == "phantom_000");
  CHECK(vol.meta.modality == io::Modality::OCT);
  CHECK(max_abs_diff(vol.data, data) == 0.0);

  SUBCASE("missing slice") {
    std::filesystem::remove(dir / "oct/slice_0002.pgm");
    CHECK_THROWS_AS(io::load_volume(dir / "oct"), ConsistencyError);
  }
  SUBCASE("meta extents disagree with images") {
    write_file(dir / "oct/meta.json", R"({"subject_id":"x","modality":"OCT","D":4,"H":6,"W":10})");
    CHECK_THROWS_AS(io::load_volume(dir / "oct"), ConsistencyError);
  }
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(42, "phantom_000"), b(42, "phantom_000"), c(42, "phantom_001");
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  // split does not advance the parent
  Rng p(1), q(1);
  (void)p.split("child").next_u64();
  CHECK(p.next_u64() == q.next_u64());
  // uniform range
  Rng u(9);
  for (int i = 0; i < 1000; ++i) {
    const double x = u.uniform();
    CHECK((x >= 0.0 && x < 1.0));
  }
}
