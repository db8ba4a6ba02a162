#include "octproj/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "octproj/errors.hpp"
#include "octproj/gradsuite.hpp"
#include "octproj/io.hpp"
#include "octproj/objective.hpp"
#include "octproj/optim.hpp"
#include "octproj/phantom.hpp"
#include "octproj/predictors.hpp"

#ifndef OCTPROJ_VERSION
#define OCTPROJ_VERSION "dev"
#endif

namespace octproj::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Options of one subcommand, settable from the command line or a JSON
// config file. Command-line values win over the file, the file over defaults.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_, "JSON file with option values");
  }

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc, bool required = false) {
    CLI::Option* opt = app_->add_option("--" + name, var, desc)->capture_default_str();
    entries_.push_back({name, opt, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }, required});
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    CLI::Option* opt = app_->add_flag("--" + name, var, desc);
    entries_.push_back({name, opt, [&var](const json& j) { var = j.get<bool>(); }, [&var] { return json(var); }, false});
    return opt;
  }

  void resolve() {
    if (!config_.empty()) {
      std::ifstream in(config_);
      if (!in) throw UsageError("cannot read config file " + config_);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw UsageError("config file " + config_ + ": " + e.what());
      }
      if (!j.is_object()) throw UsageError("config file must hold a JSON object");
      for (const auto& [key, value] : j.items()) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.name == key; });
        if (it == entries_.end()) throw UsageError("unknown config key '" + key + "'");
        if (it->opt->count() > 0) continue;
        try {
          it->set(value);
        } catch (const json::exception&) {
          throw UsageError("config key '" + key + "' has the wrong type");
        }
        given_.push_back(key);
      }
    }
    for (const auto& e : entries_) {
      const bool set = e.opt->count() > 0 || std::find(given_.begin(), given_.end(), e.name) != given_.end();
      if (e.required && !set) throw UsageError("--" + e.name + " is required");
    }
  }

  json echo() const {
    json j = json::object();
    for (const auto& e : entries_) j[e.name] = e.get();
    if (!config_.empty()) j["config"] = config_;
    return j;
  }

 private:
  struct Entry {
    std::string name;
    CLI::Option* opt;
    std::function<void(const json&)> set;
    std::function<json()> get;
    bool required;
  };
  CLI::App* app_;
  std::string config_;
  std::vector<Entry> entries_;
  std::vector<std::string> given_;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

struct Manifest {
  std::string command;
  json args;
  std::uint64_t seed = 0;
  std::string started_at = utc_now();
  std::vector<std::string> outputs;

  // Written through a temporary file so readers never see a partial manifest.
  void write(const fs::path& dir) const {
    fs::create_directories(dir);
    const json j{{"command", command},    {"args", args},          {"seed", seed},
                 {"version", OCTPROJ_VERSION}, {"started_at", started_at}, {"finished_at", utc_now()},
                 {"outputs", outputs}};
    const fs::path tmp = dir / "manifest.json.tmp";
    write_json(tmp, j);
    fs::rename(tmp, dir / "manifest.json");
  }
};

json metric_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

std::string fmt(double v, const char* f = "%.4f") {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void save_pm(const Tensor& pm, const fs::path& dir, const std::string& stem) {
  io::write_tsr(pm, dir / (stem + ".tsr"));
  io::write_pgm(pm, dir / (stem + ".pgm"), 65535);
}

void save_projection(const optim::Projection& p, const fs::path& dir) {
  fs::create_directories(dir);
  save_pm(p.pm_b2, dir, "pm_b2");
  save_pm(p.pm_b3, dir, "pm_b3");
  io::write_tsr(p.raw_b2, dir / "pm_b2_raw.tsr");
  io::write_tsr(p.raw_b3, dir / "pm_b3_raw.tsr");
  if (!p.curves.empty()) io::write_tsr(p.curves, dir / "curves.tsr");
}

json metrics_json(const optim::Metrics& m) {
  return {{"psnr_b2", metric_json(m.psnr_b2)},
          {"ssim_b2", m.ssim_b2},
          {"psnr_b3", metric_json(m.psnr_b3)},
          {"ssim_b3", m.ssim_b3}};
}

void print_metrics_header(std::ostream& out) {
  out << "subject                 PSNR B2   SSIM B2   PSNR B3   SSIM B3\n";
}

void print_metrics_row(std::ostream& out, const std::string& name, const optim::Metrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %8s  %8s  %8s  %8s\n", name.c_str(), fmt(m.psnr_b2, "%.2f").c_str(),
                fmt(m.ssim_b2).c_str(), fmt(m.psnr_b3, "%.2f").c_str(), fmt(m.ssim_b3).c_str());
  out << buf;
}

// -- commands -----------------------------------------------------------------

struct GenPhantomArgs {
  std::string out;
  std::size_t subjects = 5;
  std::uint64_t seed = 0;
  std::string preset;
  phantom::PhantomSpec spec;
};

int gen_phantom(GenPhantomArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"gen-phantom", echo, a.seed, utc_now(), {}};
  a.spec.seed = a.seed;
  const auto split = phantom::export_dataset(a.out, a.subjects, a.spec, a.preset == "stress");
  out << "wrote " << a.subjects << " subjects to " << a.out << " (train " << split.train.size() << ", val "
      << split.val.size() << ", test " << split.test.size() << ")\n";
  if (a.preset == "stress") out << "stress cases added for " << split.test.front() << "\n";
  m.outputs = {a.out};
  m.write(a.out);
  return 0;
}

struct TrainArgs {
  std::string data, out, pipeline = "cnn_dpm", pool = "mean";
  std::size_t epochs = 30, batch = 8, M = dpm::kDefaultSamples, threads = 0;
  double lr = 1e-4, lambda = obj::kDefaultLambda, lr_ratio = 1e-2, cmm_lr_scale = 1.0;
  std::uint64_t seed = 0;
  bool no_cmm = false, monotone = false, lr_per_epoch = false;
};

int train_cmd(const TrainArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"train", echo, a.seed, utc_now(), {}};
  optim::TrainConfig cfg;
  cfg.pipeline = pred::pipeline_from_string(a.pipeline);
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.samples = a.M;
  cfg.threads = a.threads;
  cfg.lr0 = a.lr;
  cfg.lambda = a.lambda;
  cfg.lr_ratio = a.lr_ratio;
  cfg.lr_per_epoch = a.lr_per_epoch;
  cfg.cmm_lr_scale = a.cmm_lr_scale;
  cfg.seed = a.seed;
  cfg.cmm_enabled = !a.no_cmm;
  cfg.monotone = a.monotone;
  cfg.pool = dpm::pool_mode_from_string(a.pool);

  const auto train_set = optim::load_split(a.data, "train");
  std::vector<optim::Subject> val_set;
  if (fs::is_directory(fs::path(a.data) / "val")) val_set = optim::load_split(a.data, "val");
  out << "training " << a.pipeline << (cfg.cmm_enabled ? "" : " without CMM") << " on " << train_set.size()
      << " subjects, " << val_set.size() << " for validation\n";
  const auto res = optim::train(train_set, val_set, cfg, a.out, [&](const optim::EpochRecord& r) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "epoch %3zu  lr %.2e  loss %.5f  val SSIM %.4f / %.4f\n", r.epoch + 1, r.lr,
                  r.train_loss, r.val_ssim_b2, r.val_ssim_b3);
    out << buf << std::flush;
  });

  if (!val_set.empty()) {
    out << "\nbest checkpoint: epoch " << res.best_epoch << "\n";
    print_metrics_header(out);
    for (const auto& s : val_set) {
      print_metrics_row(out, s.id, optim::evaluate(optim::infer(res.best.model, s.oct, a.threads), s.gt_b2, s.gt_b3));
    }
  }
  m.outputs = {(fs::path(a.out) / "checkpoint").string(), (fs::path(a.out) / "history.jsonl").string()};
  m.write(a.out);
  return 0;
}

struct FitArgs {
  std::string data, out, split = "test", init = "random", pool = "mean";
  std::size_t steps = 200, M = dpm::kDefaultSamples;
  double lr = 1e-4, lambda = obj::kDefaultLambda;
  std::uint64_t seed = 0;
  bool monotone = false, no_cmm = false, with_stress = false;
};

int fit_cmd(const FitArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"fit-dpm", echo, a.seed, utc_now(), {}};
  optim::FitConfig cfg;
  cfg.steps = a.steps;
  cfg.lr = a.lr;
  cfg.lambda = a.lambda;
  cfg.samples = a.M;
  cfg.pool = dpm::pool_mode_from_string(a.pool);
  cfg.seed = a.seed;
  cfg.monotone = a.monotone;
  cfg.init = pred::init_mode_from_string(a.init);
  cfg.cmm_enabled = !a.no_cmm;

  const auto subjects = optim::load_split(a.data, a.split, a.with_stress);
  if (subjects.empty()) throw ContractError("no subjects under " + a.data + "/" + a.split);
  json report = json::array();
  out << "subject                 crossing   SSIM B2   SSIM B3\n";
  for (const auto& s : subjects) {
    const auto r = optim::fit_dpm_only(s.oct, s.gt_b2, s.gt_b3, cfg);
    const fs::path dir = fs::path(a.out) / s.id;
    save_projection(r.projection, dir);
    const auto metrics = optim::evaluate(r.projection, s.gt_b2, s.gt_b3);
    double final_loss = 0.0;
    for (const auto& t : r.loss_traces) final_loss += t.empty() ? 0.0 : t.back();
    json entry = metrics_json(metrics);
    entry["subject"] = s.id;
    entry["crossing_fraction"] = r.crossing_fraction;
    entry["final_loss"] = final_loss / double(r.loss_traces.size());
    report.push_back(entry);
    m.outputs.push_back(dir.string());
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-22s %9.4f  %8.4f  %8.4f\n", s.id.c_str(), r.crossing_fraction, metrics.ssim_b2,
                  metrics.ssim_b3);
    out << buf;
  }
  write_json(fs::path(a.out) / "report.json", {{"config", cfg.to_json()}, {"volumes", report}});
  m.outputs.push_back((fs::path(a.out) / "report.json").string());
  m.write(a.out);
  return 0;
}

struct InferArgs {
  std::string checkpoint, data, out, split = "test";
  std::size_t threads = 0;
  bool with_stress = false;
};

int infer_cmd(const InferArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"infer", echo, 0, utc_now(), {}};
  const auto ck = pred::load_checkpoint(a.checkpoint);
  m.seed = ck.config.value("seed", std::uint64_t{0});
  const auto subjects = optim::load_split(a.data, a.split, a.with_stress);
  print_metrics_header(out);
  for (const auto& s : subjects) {
    const auto p = optim::infer(ck.model, s.oct, a.threads);
    const fs::path dir = fs::path(a.out) / s.id;
    save_projection(p, dir);
    m.outputs.push_back(dir.string());
    print_metrics_row(out, s.id, optim::evaluate(p, s.gt_b2, s.gt_b3));
  }
  m.write(a.out);
  return 0;
}

struct ProjectArgs {
  std::string volume, curves, band = "b2", mode = "mean", out;
  std::size_t M = dpm::kDefaultSamples;
};

int project_cmd(const ProjectArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"project", echo, 0, utc_now(), {}};
  const io::Volume vol = io::load_volume(a.volume);
  const Tensor curves = io::read_tsr(a.curves);
  const Tensor raw = dpm::project_volume(vol.data, curves, dpm::band_from_string(a.band), a.M,
                                         dpm::pool_mode_from_string(a.mode));
  fs::create_directories(a.out);
  const std::string stem = "pm_" + a.band;
  save_pm(obj::minmax_normalize(raw), a.out, stem);
  io::write_tsr(raw, fs::path(a.out) / (stem + "_raw.tsr"));
  out << "projected " << a.band << " (" << a.mode << ", M=" << a.M << ") of " << a.volume << "\n";
  m.outputs = {(fs::path(a.out) / (stem + ".tsr")).string(), (fs::path(a.out) / (stem + ".pgm")).string(),
               (fs::path(a.out) / (stem + "_raw.tsr")).string()};
  m.write(a.out);
  return 0;
}

struct TransferArgs {
  std::string checkpoint, oct, octa, out, gt_b2, gt_b3;
  std::size_t threads = 0;
};

std::optional<Tensor> find_truth(const std::string& given, const fs::path& volume_dir, const std::string& band) {
  if (!given.empty()) return io::read_tsr(given);
  const fs::path p = volume_dir.parent_path() / ("octa_pm_" + band + ".tsr");
  if (fs::exists(p)) return io::read_tsr(p);
  return std::nullopt;
}

int transfer_cmd(const TransferArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"transfer", echo, 0, utc_now(), {}};
  const auto ck = pred::load_checkpoint(a.checkpoint);
  m.seed = ck.config.value("seed", std::uint64_t{0});
  if (ck.model.pipeline != pred::Pipeline::cnn_dpm) throw ContractError("transfer needs a cnn_dpm checkpoint");
  const io::Volume oct = io::load_volume(a.oct), octa = io::load_volume(a.octa);
  if (oct.data.dims() != octa.data.dims()) {
    throw ShapeError("OCT " + shape_str(oct.data.dims()) + " and OCTA " + shape_str(octa.data.dims()) +
                     " volumes differ in extent");
  }
  const auto curves = optim::infer(ck.model, oct.data, a.threads).curves;
  const auto p = optim::project_with_curves(octa.data, curves, ck.model.samples, ck.model.pool);
  save_projection(p, a.out);
  json result{{"oct_volume", a.oct}, {"octa_volume", a.octa}, {"checkpoint", a.checkpoint}};
  const auto g2 = find_truth(a.gt_b2, fs::path(a.octa).lexically_normal(), "b2");
  const auto g3 = find_truth(a.gt_b3, fs::path(a.octa).lexically_normal(), "b3");
  if (g2) {
    result["psnr_b2"] = metric_json(obj::psnr(p.pm_b2, *g2));
    result["ssim_b2"] = obj::ssim(p.pm_b2, *g2);
    out << "transfer B2: SSIM " << fmt(result["ssim_b2"].get<double>()) << "\n";
  }
  if (g3) {
    result["psnr_b3"] = metric_json(obj::psnr(p.pm_b3, *g3));
    result["ssim_b3"] = obj::ssim(p.pm_b3, *g3);
    out << "transfer B3: SSIM " << fmt(result["ssim_b3"].get<double>()) << "\n";
  }
  if (!g2 && !g3) out << "no OCTA ground truth found; wrote projections only\n";
  write_json(fs::path(a.out) / "transfer.json", result);
  m.outputs = {(fs::path(a.out) / "transfer.json").string(), (fs::path(a.out) / "curves.tsr").string()};
  m.write(a.out);
  return 0;
}

struct EvalArgs {
  std::string pred, gt, out;
};

// A PM file of one band, as written by infer/fit-dpm (pm_*) or the phantom
// exporter (gt_pm_*). `prefer_gt` picks which naming wins when both exist.
std::optional<fs::path> pm_file(const fs::path& dir, const std::string& band, bool prefer_gt) {
  const std::string a = "pm_" + band + ".tsr", b = "gt_pm_" + band + ".tsr";
  for (const auto& name : prefer_gt ? std::vector{b, a} : std::vector{a, b}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  return std::nullopt;
}

bool has_pm(const fs::path& dir) {
  return pm_file(dir, "b2", false) || pm_file(dir, "b3", false);
}

int eval_cmd(const EvalArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"eval", echo, 0, utc_now(), {}};
  std::vector<std::pair<std::string, fs::path>> units;  // (name, pred dir)
  if (has_pm(a.pred)) {
    units.emplace_back(fs::path(a.pred).filename().string(), a.pred);
  } else {
    if (!fs::is_directory(a.pred)) throw IoError("missing prediction directory " + a.pred);
    for (const auto& e : fs::directory_iterator(a.pred)) {
      if (e.is_directory() && has_pm(e.path())) units.emplace_back(e.path().filename().string(), e.path());
    }
    std::sort(units.begin(), units.end());
  }
  if (units.empty()) throw ContractError("no predicted PMs under " + a.pred);
  const bool single = units.size() == 1 && has_pm(a.pred);

  fs::create_directories(a.out);
  std::ofstream jl(fs::path(a.out) / "metrics.jsonl");
  if (!jl) throw IoError("cannot write metrics.jsonl");
  std::map<std::string, std::vector<std::pair<double, double>>> by_band;
  for (const auto& [name, dir] : units) {
    const fs::path gdir = single ? fs::path(a.gt) : fs::path(a.gt) / name;
    for (const std::string band : {"b2", "b3"}) {
      const auto pfile = pm_file(dir, band, false);
      if (!pfile) continue;
      const auto gfile = pm_file(gdir, band, true);
      if (!gfile) throw IoError("no ground truth for " + name + " " + band + " under " + gdir.string());
      const Tensor p = io::read_tsr(*pfile);
      const Tensor g = io::read_tsr(*gfile);
      if (p.dims() != g.dims()) {
        throw ShapeError(name + " " + band + ": prediction " + shape_str(p.dims()) + " vs ground truth " +
                         shape_str(g.dims()));
      }
      const double ps = obj::psnr(p, g), ss = obj::ssim(p, g);
      jl << json{{"subject", name}, {"band", band}, {"psnr", metric_json(ps)}, {"ssim", ss}}.dump() << '\n';
      by_band[band].emplace_back(ps, ss);
    }
  }
  jl.close();

  json summary = json::object();
  out << "band   n     PSNR     SSIM\n";
  for (const auto& [band, vals] : by_band) {
    double ps = 0, ss = 0;
    for (const auto& [p, s] : vals) {
      ps += p;
      ss += s;
    }
    ps /= double(vals.size());
    ss /= double(vals.size());
    summary[band] = {{"n", vals.size()}, {"psnr", metric_json(ps)}, {"ssim", ss}};
    char buf[120];
    std::snprintf(buf, sizeof buf, "%-4s %3zu %8s %8s\n", band.c_str(), vals.size(), fmt(ps, "%.2f").c_str(),
                  fmt(ss).c_str());
    out << buf;
  }
  write_json(fs::path(a.out) / "summary.json", summary);
  m.outputs = {(fs::path(a.out) / "metrics.jsonl").string(), (fs::path(a.out) / "summary.json").string()};
  m.write(a.out);
  return 0;
}

struct GradcheckArgs {
  std::string which = "all", out;
  std::uint64_t seed = 1;
  std::size_t seeds = 10;
};

int gradcheck_cmd(const GradcheckArgs& a, const json& echo, std::ostream& out) {
  Manifest m{"gradcheck", echo, a.seed, utc_now(), {}};
  const auto results = gradsuite::run(a.which, a.seed, a.seeds);
  out << "group      op                          seeds  elements  boundary  max rel err  result\n";
  bool ok = true;
  json report = json::array();
  for (const auto& r : results) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-10s %-27s %5zu  %8zu  %8zu  %11.3e  %s\n", r.group.c_str(), r.op.c_str(), r.seeds,
                  r.elements, r.boundary, r.max_rel_err, r.passed ? "pass" : "FAIL");
    out << buf;
    ok = ok && r.passed;
    report.push_back({{"group", r.group},
                      {"op", r.op},
                      {"seeds", r.seeds},
                      {"elements", r.elements},
                      {"boundary", r.boundary},
                      {"max_rel_err", r.max_rel_err},
                      {"passed", r.passed}});
  }
  out << (ok ? "all checks passed\n" : "some checks FAILED\n");
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(fs::path(a.out) / "gradcheck.json", report);
    m.outputs = {(fs::path(a.out) / "gradcheck.json").string()};
    m.write(a.out);
  }
  return ok ? 0 : 2;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Differentiable projection of OCT layers into en-face projection maps", "octproj"};
  app.require_subcommand(1);
  app.set_version_flag("--version", OCTPROJ_VERSION);

  GenPhantomArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-phantom", "Generate a synthetic OCT/OCTA dataset");
  Options gen_opt(gen_cmd);
  gen_opt.add("out", gen.out, "Output dataset directory", true);
  gen_opt.add("subjects", gen.subjects, "Number of subjects (>= 3)");
  gen_opt.add("seed", gen.seed, "Random seed");
  gen_opt.add("preset", gen.preset, "'stress' adds lesion, steep and low-quality test cases")
      ->check(CLI::IsMember({"", "stress"}));
  gen_opt.add("depth", gen.spec.D, "Slices per volume");
  gen_opt.add("height", gen.spec.H, "Rows per slice");
  gen_opt.add("width", gen.spec.W, "Columns per slice");
  gen_opt.add("vessels", gen.spec.vessels, "Vessels per volume");
  gen_opt.add("noise", gen.spec.noise, "Gaussian noise sigma");
  gen_opt.add("texture", gen.spec.texture, "Relative en-face reflectivity variation per band");

  TrainArgs tr;
  auto* train_sc = app.add_subcommand("train", "Train a predictor end to end from projection maps");
  Options tr_opt(train_sc);
  tr_opt.add("data", tr.data, "Dataset directory", true);
  tr_opt.add("out", tr.out, "Output directory", true);
  tr_opt.add("pipeline", tr.pipeline, "cnn_dpm or cnn_only")->check(CLI::IsMember({"cnn_dpm", "cnn_only"}));
  tr_opt.add("epochs", tr.epochs, "Training epochs");
  tr_opt.add("lr", tr.lr, "Initial learning rate");
  tr_opt.add("lr-ratio", tr.lr_ratio, "Learning rate at the last epoch relative to the first");
  tr_opt.flag("lr-per-epoch", tr.lr_per_epoch, "Multiply the learning rate by lr-ratio after every epoch instead");
  tr_opt.add("cmm-lr-scale", tr.cmm_lr_scale, "Learning rate multiplier for the CMM parameters");
  tr_opt.add("lambda", tr.lambda, "Weight of the B3 loss");
  tr_opt.add("batch", tr.batch, "Slices per batch");
  tr_opt.add("M", tr.M, "Samples between two layers");
  tr_opt.add("pool", tr.pool, "mean or max")->check(CLI::IsMember({"mean", "max"}));
  tr_opt.add("seed", tr.seed, "Random seed");
  tr_opt.add("threads", tr.threads, "Worker threads (0: all cores)");
  tr_opt.flag("no-cmm", tr.no_cmm, "Disable conditional min-max normalization");
  tr_opt.flag("monotone", tr.monotone, "Ordered curve parameterization");

  FitArgs fit;
  auto* fit_sc = app.add_subcommand("fit-dpm", "Fit layer curves directly to each volume's projection maps");
  Options fit_opt(fit_sc);
  fit_opt.add("data", fit.data, "Dataset directory", true);
  fit_opt.add("out", fit.out, "Output directory", true);
  fit_opt.add("split", fit.split, "Split to fit")->check(CLI::IsMember({"train", "val", "test"}));
  fit_opt.flag("with-stress", fit.with_stress, "Include stress cases of the split");
  fit_opt.add("steps", fit.steps, "Adam steps per slice");
  fit_opt.add("lr", fit.lr, "Learning rate");
  fit_opt.add("lambda", fit.lambda, "Weight of the B3 loss");
  fit_opt.add("M", fit.M, "Samples between two layers");
  fit_opt.add("pool", fit.pool, "mean or max")->check(CLI::IsMember({"mean", "max"}));
  fit_opt.add("init", fit.init, "random or equispaced")->check(CLI::IsMember({"random", "equispaced"}));
  fit_opt.add("seed", fit.seed, "Random seed");
  fit_opt.flag("monotone", fit.monotone, "Ordered curve parameterization");
  fit_opt.flag("no-cmm", fit.no_cmm, "Disable conditional min-max normalization");

  InferArgs inf;
  auto* infer_sc = app.add_subcommand("infer", "Predict projection maps and curves with a checkpoint");
  Options inf_opt(infer_sc);
  inf_opt.add("checkpoint", inf.checkpoint, "Checkpoint directory", true);
  inf_opt.add("data", inf.data, "Dataset directory", true);
  inf_opt.add("out", inf.out, "Output directory", true);
  inf_opt.add("split", inf.split, "Split to predict")->check(CLI::IsMember({"train", "val", "test"}));
  inf_opt.flag("with-stress", inf.with_stress, "Include stress cases of the split");
  inf_opt.add("threads", inf.threads, "Worker threads (0: all cores)");

  ProjectArgs pr;
  auto* project_sc = app.add_subcommand("project", "Project a volume between given layer curves");
  Options pr_opt(project_sc);
  pr_opt.add("volume", pr.volume, "Volume directory", true);
  pr_opt.add("curves", pr.curves, "Curves TSR [D, 3, W]", true);
  pr_opt.add("band", pr.band, "b2 or b3")->check(CLI::IsMember({"b2", "b3"}));
  pr_opt.add("mode", pr.mode, "mean or max")->check(CLI::IsMember({"mean", "max"}));
  pr_opt.add("M", pr.M, "Samples between two layers");
  pr_opt.add("out", pr.out, "Output directory", true);

  TransferArgs tf;
  auto* transfer_sc = app.add_subcommand("transfer", "Apply OCT-predicted curves to the paired OCTA volume");
  Options tf_opt(transfer_sc);
  tf_opt.add("oct-checkpoint", tf.checkpoint, "cnn_dpm checkpoint trained on OCT", true);
  tf_opt.add("oct-volume", tf.oct, "OCT volume directory", true);
  tf_opt.add("octa-volume", tf.octa, "OCTA volume directory", true);
  tf_opt.add("out", tf.out, "Output directory", true);
  tf_opt.add("gt-b2", tf.gt_b2, "OCTA B2 ground truth TSR (default: octa_pm_b2.tsr next to the volume)");
  tf_opt.add("gt-b3", tf.gt_b3, "OCTA B3 ground truth TSR (default: octa_pm_b3.tsr next to the volume)");
  tf_opt.add("threads", tf.threads, "Worker threads (0: all cores)");

  EvalArgs ev;
  auto* eval_sc = app.add_subcommand("eval", "PSNR and SSIM of predicted projection maps");
  Options ev_opt(eval_sc);
  ev_opt.add("pred", ev.pred, "Directory with pm_b2/pm_b3.tsr, or of such directories", true);
  ev_opt.add("gt", ev.gt, "Matching ground-truth directory", true);
  ev_opt.add("out", ev.out, "Output directory", true);

  GradcheckArgs gc;
  auto* gc_sc = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable operation");
  Options gc_opt(gc_sc);
  std::vector<std::string> which{"all"};
  for (const auto& g : gradsuite::groups()) which.push_back(g);
  gc_opt.add("which", gc.which, "all, conv, dpm, cmm or predictor")->check(CLI::IsMember(which));
  gc_opt.add("seed", gc.seed, "First seed");
  gc_opt.add("seeds", gc.seeds, "Number of seeds");
  gc_opt.add("out", gc.out, "Optional report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    auto dispatch = [&](Options& o, auto&& fn) {
      o.resolve();
      return fn(o.echo());
    };
    if (gen_cmd->parsed()) return dispatch(gen_opt, [&](const json& j) { return gen_phantom(gen, j, out); });
    if (train_sc->parsed()) return dispatch(tr_opt, [&](const json& j) { return train_cmd(tr, j, out); });
    if (fit_sc->parsed()) return dispatch(fit_opt, [&](const json& j) { return fit_cmd(fit, j, out); });
    if (infer_sc->parsed()) return dispatch(inf_opt, [&](const json& j) { return infer_cmd(inf, j, out); });
    if (project_sc->parsed()) return dispatch(pr_opt, [&](const json& j) { return project_cmd(pr, j, out); });
    if (transfer_sc->parsed()) return dispatch(tf_opt, [&](const json& j) { return transfer_cmd(tf, j, out); });
    if (eval_sc->parsed()) return dispatch(ev_opt, [&](const json& j) { return eval_cmd(ev, j, out); });
    if (gc_sc->parsed()) return dispatch(gc_opt, [&](const json& j) { return gradcheck_cmd(gc, j, out); });
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace octproj::cli
