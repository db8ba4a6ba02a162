#include <doctest.h>

#include <map>
#include <sstream>

#include <json.hpp>

#include "octproj/cli.hpp"
#include "octproj/dpm.hpp"
#include "octproj/io.hpp"
#include "test_util.hpp"

using namespace octproj;
using octproj::testing::read_file;
using octproj::testing::TempDir;
using octproj::testing::write_file;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "octproj");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(int(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

json load(const fs::path& p) { return json::parse(read_file(p)); }

std::vector<std::string> small_gen(const fs::path& out, const std::string& seed = "7") {
  return {"gen-phantom", "--out", out.string(), "--subjects", "3", "--seed", seed,
          "--depth", "12", "--height", "96", "--width", "32", "--vessels", "2"};
}

// Every regular file under root, relative path -> bytes; manifests skipped.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    files[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return files;
}

std::string only_subject(const fs::path& split_dir) {
  for (const auto& e : fs::directory_iterator(split_dir)) return e.path().filename().string();
  return {};
}

// One small dataset and a one-epoch checkpoint shared by the tests below.
struct Fixture {
  TempDir dir{"cli"};
  fs::path data = dir / "ds", run = dir / "run";
  std::string test_id;

  Fixture() {
    REQUIRE(invoke(small_gen(data)).code == 0);
    const Run r = invoke({"train", "--data", data.string(), "--out", run.string(), "--epochs", "1", "--batch", "4",
                       "--M", "16", "--lr", "1e-3", "--threads", "1", "--seed", "2"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    test_id = only_subject(data / "test");
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_CASE("cli: gen-phantom is reproducible and writes a manifest") {
  TempDir a("gen_a"), b("gen_b");
  REQUIRE(invoke(small_gen(a / "ds")).code == 0);
  REQUIRE(invoke(small_gen(b / "ds")).code == 0);
  CHECK(tree(a / "ds") == tree(b / "ds"));

  const json m = load(a / "ds/manifest.json");
  CHECK(m["command"] == "gen-phantom");
  CHECK(m["seed"] == 7);
  CHECK(m["args"]["subjects"] == 3);
  for (const char* k : {"version", "started_at", "finished_at", "outputs"}) CHECK(m.contains(k));
  CHECK_FALSE(fs::exists(a / "ds/manifest.json.tmp"));

  REQUIRE(invoke(small_gen(b / "other", "8")).code == 0);
  CHECK(tree(b / "other") != tree(a / "ds"));
}

TEST_CASE("cli: gen-phantom errors and the stress preset") {
  TempDir d("gen_err");
  auto args = small_gen(d / "two");
  args[4] = "2";
  const Run r = invoke(args);
  CHECK(r.code == 2);
  CHECK(r.err.find("need >= 3 subjects") != std::string::npos);

  args = small_gen(d / "stress");
  args.insert(args.end(), {"--preset", "stress"});
  REQUIRE(invoke(args).code == 0);
  const std::string id = load(d / "stress/dataset.json")["splits"]["test"][0];
  for (const char* k : {"_lesion", "_steep", "_lowq"}) CHECK(fs::exists(d / "stress/test" / (id + k) / "oct/meta.json"));
}

TEST_CASE("cli: usage errors exit 1") {
  CHECK(invoke({}).code == 1);
  CHECK(invoke({"no-such-command"}).code == 1);
  CHECK(invoke({"train", "--data", "x"}).code == 1);  // --out missing
  CHECK(invoke({"project", "--volume", "v", "--curves", "c", "--out", "o", "--band", "b4"}).code == 1);
  CHECK(invoke({"gen-phantom", "--out", "o", "--subjects", "three"}).code == 1);
  CHECK(invoke({"gradcheck", "--which", "everything"}).code == 1);
  const Run help = invoke({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("fit-dpm") != std::string::npos);
}

TEST_CASE("cli: config file precedence") {
  TempDir d("cfg");
  write_file(d / "cfg.json", json{{"out", (d / "from_file").string()},
                                  {"subjects", 3},
                                  {"seed", 9},
                                  {"depth", 12},
                                  {"height", 96},
                                  {"width", 32}}
                                 .dump());
  REQUIRE(invoke({"gen-phantom", "--config", (d / "cfg.json").string(), "--seed", "4"}).code == 0);
  const json m = load(d / "from_file/manifest.json");
  CHECK(m["seed"] == 4);                        // flag beats file
  CHECK(m["args"]["depth"] == 12);              // file beats default
  CHECK(m["args"]["noise"].get<double>() > 0);  // default kept
  CHECK(m["args"]["config"] == (d / "cfg.json").string());

  write_file(d / "bad.json", R"({"out": "x", "subjectz": 3})");
  const Run r = invoke({"gen-phantom", "--config", (d / "bad.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("subjectz") != std::string::npos);
  write_file(d / "typed.json", R"({"out": "x", "subjects": "three"})");
  CHECK(invoke({"gen-phantom", "--config", (d / "typed.json").string()}).code == 1);
  CHECK(invoke({"gen-phantom", "--config", (d / "missing.json").string()}).code == 1);
}

TEST_CASE("cli: train defaults and outputs") {
  const Fixture& f = fixture();
  const json m = load(f.run / "manifest.json");
  CHECK(m["command"] == "train");
  CHECK(m["seed"] == 2);
  CHECK(m["args"]["lambda"].get<double>() == 0.2);
  CHECK(m["args"]["pipeline"] == "cnn_dpm");
  CHECK(fs::exists(f.run / "checkpoint/manifest.json"));
  CHECK(fs::exists(f.run / "history.jsonl"));

  TempDir d("train_defaults");
  const Run r = invoke({"train", "--data", f.data.string(), "--out", (d / "r").string(), "--epochs", "0"});
  REQUIRE(r.code == 0);
  const json args = load(d / "r/manifest.json")["args"];
  CHECK(args["lr"].get<double>() == 1e-4);
  CHECK(args["lambda"].get<double>() == 0.2);
  CHECK(r.out.find("SSIM B2") != std::string::npos);

  CHECK(invoke({"train", "--data", (d / "nowhere").string(), "--out", (d / "r2").string()}).code == 2);
}

TEST_CASE("cli: fit-dpm report") {
  const Fixture& f = fixture();
  TempDir d("fit");
  auto fit = [&](const std::string& out, const std::string& steps, bool monotone) {
    std::vector<std::string> args{"fit-dpm", "--data", f.data.string(), "--out", (d / out).string(),
                                  "--steps", steps, "--M", "16", "--seed", "3"};
    if (monotone) args.push_back("--monotone");
    REQUIRE(invoke(args).code == 0);
    return load(d / out / "report.json");
  };
  const json a = fit("a", "3", false), b = fit("b", "3", false);
  REQUIRE(a["volumes"].size() == 1);
  const json& v = a["volumes"][0];
  CHECK(v["subject"] == f.test_id);
  CHECK(v["crossing_fraction"].get<double>() > 0.0);
  CHECK(read_file(d / "a" / f.test_id / "pm_b2.tsr") == read_file(d / "b" / f.test_id / "pm_b2.tsr"));
  CHECK(a["volumes"] == b["volumes"]);

  const json m = fit("m", "3", true);
  CHECK(m["volumes"][0]["crossing_fraction"].get<double>() == 0.0);

  // With no steps the PMs come straight from the initial curves.
  fit("zero", "0", false);
  const fs::path z = d / "zero" / f.test_id;
  const Tensor curves = io::read_tsr(z / "curves.tsr");
  const Tensor oct = io::load_volume(f.data / "test" / f.test_id / "oct").data;
  const Tensor raw = dpm::project_volume(oct, curves, dpm::kBandB2, 16, dpm::PoolMode::mean);
  CHECK(mean_abs_diff(raw, io::read_tsr(z / "pm_b2_raw.tsr")) < 1e-6);
}

TEST_CASE("cli: project bands, modes and errors") {
  const Fixture& f = fixture();
  TempDir d("project");
  const fs::path subj = f.data / "test" / f.test_id;
  auto project = [&](const std::string& band, const std::string& mode, const std::string& M = "256") {
    const fs::path out = d / (band + mode + M);
    const Run r = invoke({"project", "--volume", (subj / "oct").string(), "--curves", (subj / "truth_curves.tsr").string(),
                       "--band", band, "--mode", mode, "--M", M, "--out", out.string()});
    REQUIRE(r.code == 0);
    CHECK(fs::exists(out / ("pm_" + band + ".pgm")));
    CHECK(fs::exists(out / "manifest.json"));
    return std::pair{io::read_tsr(out / ("pm_" + band + ".tsr")), io::read_tsr(out / ("pm_" + band + "_raw.tsr"))};
  };
  const auto [pm2, raw2] = project("b2", "mean");
  const auto [pm3, raw3] = project("b3", "mean");
  CHECK(mean_abs_diff(raw2, io::read_tsr(subj / "gt_raw_b2.tsr")) < 1e-3);
  CHECK(mean_abs_diff(raw3, io::read_tsr(subj / "gt_raw_b3.tsr")) < 1e-3);
  CHECK(mean_abs_diff(pm2, io::read_tsr(subj / "gt_pm_b2.tsr")) < 2e-2);

  const auto [pmx, rawx] = project("b2", "max", "32");
  const auto [pmm, rawm] = project("b2", "mean", "32");
  for (std::size_t i = 0; i < rawx.size(); ++i) CHECK(rawx[i] >= rawm[i] - 1e-6f);

  Tensor wrong = io::read_tsr(subj / "truth_curves.tsr");
  io::write_tsr(Tensor({wrong.dim(0) - 1, 3, wrong.dim(2)}), d / "short.tsr");
  CHECK(invoke({"project", "--volume", (subj / "oct").string(), "--curves", (d / "short.tsr").string(), "--out",
             (d / "bad").string()})
            .code == 2);
}

TEST_CASE("cli: infer, eval and transfer") {
  const Fixture& f = fixture();
  TempDir d("infer");
  const fs::path subj = f.data / "test" / f.test_id;
  REQUIRE(invoke({"infer", "--checkpoint", (f.run / "checkpoint").string(), "--data", f.data.string(), "--out",
               (d / "inf").string()})
              .code == 0);
  const fs::path pred = d / "inf" / f.test_id;
  CHECK(fs::exists(pred / "curves.tsr"));

  SUBCASE("eval of a prediction set") {
    const Run r = invoke({"eval", "--pred", (d / "inf").string(), "--gt", (f.data / "test").string(), "--out",
                       (d / "ev").string()});
    REQUIRE(r.code == 0);
    std::istringstream jl(read_file(d / "ev/metrics.jsonl"));
    std::map<std::string, double> ssim;
    for (std::string line; std::getline(jl, line);) {
      const json rec = json::parse(line);
      CHECK(rec["subject"] == f.test_id);
      ssim[rec["band"]] = rec["ssim"];
    }
    REQUIRE(ssim.size() == 2);
    const json s = load(d / "ev/summary.json");
    CHECK(s["b2"]["ssim"].get<double>() == doctest::Approx(ssim["b2"]).epsilon(1e-12));
    CHECK(s["b3"]["ssim"].get<double>() == doctest::Approx(ssim["b3"]).epsilon(1e-12));
    CHECK(r.out.find("b2") != std::string::npos);
    CHECK(r.out.find("b3") != std::string::npos);
  }

  SUBCASE("eval of identical maps") {
    REQUIRE(invoke({"eval", "--pred", subj.string(), "--gt", subj.string(), "--out", (d / "same").string()}).code == 0);
    std::istringstream jl(read_file(d / "same/metrics.jsonl"));
    int n = 0;
    for (std::string line; std::getline(jl, line); ++n) {
      const json rec = json::parse(line);
      CHECK(rec["psnr"] == "inf");
      CHECK(rec["ssim"].get<double>() == 1.0);
    }
    CHECK(n == 2);
    CHECK(load(d / "same/summary.json")["b2"]["psnr"] == "inf");
  }

  SUBCASE("eval extent mismatch") {
    fs::create_directories(d / "odd");
    io::write_tsr(Tensor({5, 7}), d / "odd/pm_b2.tsr");
    CHECK(invoke({"eval", "--pred", (d / "odd").string(), "--gt", subj.string(), "--out", (d / "o").string()}).code == 2);
  }

  SUBCASE("transfer to the OCT volume itself equals project") {
    const std::string ck = (f.run / "checkpoint").string();
    REQUIRE(invoke({"transfer", "--oct-checkpoint", ck, "--oct-volume", (subj / "oct").string(), "--octa-volume",
                 (subj / "oct").string(), "--out", (d / "self").string()})
                .code == 0);
    REQUIRE(invoke({"project", "--volume", (subj / "oct").string(), "--curves", (pred / "curves.tsr").string(), "--M",
                 "16", "--out", (d / "proj").string()})
                .code == 0);
    CHECK(io::read_tsr(d / "self/pm_b2.tsr") == io::read_tsr(d / "proj/pm_b2.tsr"));

    REQUIRE(invoke({"transfer", "--oct-checkpoint", ck, "--oct-volume", (subj / "oct").string(), "--octa-volume",
                 (subj / "octa").string(), "--out", (d / "octa").string()})
                .code == 0);
    const json t = load(d / "octa/transfer.json");
    CHECK(t["ssim_b2"].is_number());
    CHECK(t["ssim_b3"].is_number());

    io::VolumeMeta meta = io::load_volume(subj / "octa").meta;
    meta.D -= 2;
    io::save_volume(d / "cut", meta, Tensor({meta.D, meta.H, meta.W}));
    CHECK(invoke({"transfer", "--oct-checkpoint", ck, "--oct-volume", (subj / "oct").string(), "--octa-volume",
               (d / "cut").string(), "--out", (d / "x").string()})
              .code == 2);
  }
}

TEST_CASE("cli: gradcheck report") {
  TempDir d("gc");
  const Run r = invoke({"gradcheck", "--which", "cmm", "--seeds", "2", "--out", d.path().string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("max rel err") != std::string::npos);
  CHECK(r.out.find("boundary") != std::string::npos);
  const json rep = load(d / "gradcheck.json");
  REQUIRE(rep.size() == 4);
  for (const auto& e : rep) {
    CHECK(e["group"] == "cmm");
    CHECK(e["passed"] == true);
    CHECK(e.contains("boundary"));
    CHECK(e["max_rel_err"].get<double>() < 1e-4);
  }
  CHECK(invoke({"gradcheck"}).code == 0);
}
