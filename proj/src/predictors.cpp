#include "octproj/predictors.hpp"

#include <cmath>
#include <fstream>

#include "octproj/io.hpp"

namespace octproj::pred {

using ad::Tape;
using ad::Var;
using nlohmann::json;

void PredictorConfig::validate() const {
  if (H < 2 || W < 4 || H % 2 != 0 || W % 2 != 0) {
    throw ContractError("predictor input must have even H >= 2 and even W >= 4, got " + std::to_string(H) + "x" +
                        std::to_string(W));
  }
  if (channels.empty()) throw ContractError("predictor needs at least one stage");
  for (std::size_t c : channels) {
    if (c == 0) throw ContractError("predictor stage with zero channels");
  }
  if (outputs == 0) throw ContractError("predictor needs at least one output channel");
}

std::size_t PredictorConfig::collapse_height() const {
  std::size_t h = H2();
  for (std::size_t i = 0; i < channels.size(); ++i) h = (h + 1) / 2;
  return h;
}

json PredictorConfig::to_json() const { return {{"H", H}, {"W", W}, {"channels", channels}, {"outputs", outputs}}; }

PredictorConfig PredictorConfig::from_json(const json& j) {
  PredictorConfig c;
  c.H = j.at("H").get<std::size_t>();
  c.W = j.at("W").get<std::size_t>();
  c.channels = j.at("channels").get<std::vector<std::size_t>>();
  c.outputs = j.at("outputs").get<std::size_t>();
  c.validate();
  return c;
}

namespace {

std::vector<NamedTensor> layout(const PredictorConfig& cfg) {
  std::vector<NamedTensor> p;
  std::size_t cin = 1;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const std::size_t cout = cfg.channels[i];
    p.push_back({"conv" + std::to_string(i) + ".weight", Tensor({cout, cin, 3, 3})});
    p.push_back({"conv" + std::to_string(i) + ".bias", Tensor({cout})});
    cin = cout;
  }
  p.push_back({"head.weight", Tensor({cfg.outputs, cin, cfg.collapse_height(), 1})});
  p.push_back({"head.bias", Tensor({cfg.outputs})});
  return p;
}

}  // namespace

ConvPredictor ConvPredictor::zeros(PredictorConfig cfg) {
  cfg.validate();
  ConvPredictor m;
  m.cfg_ = std::move(cfg);
  m.params_ = layout(m.cfg_);
  return m;
}

ConvPredictor::ConvPredictor(PredictorConfig cfg, std::uint64_t seed, std::vector<double> head_bias) {
  *this = zeros(std::move(cfg));
  Rng rng(seed, "conv-predictor");
  for (std::size_t i = 0; i + 1 < params_.size(); i += 2) {
    Tensor& w = params_[i].value;
    const std::size_t fan_in = w.size() / w.dim(0);
    // relu stages use the Kaiming gain; the linear head uses gain 1.
    const bool head = i + 2 == params_.size();
    const double bound = std::sqrt((head ? 3.0 : 6.0) / double(fan_in));
    for (auto& v : w.data()) v = float(rng.uniform(-bound, bound));
  }
  if (!head_bias.empty()) {
    Tensor& b = params_.back().value;
    if (head_bias.size() != b.size()) throw ShapeError("head bias needs one value per output channel");
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = float(head_bias[i]);
  }
}

ConvPredictor::ConvPredictor(PredictorConfig cfg, std::vector<NamedTensor> params) {
  *this = zeros(std::move(cfg));
  if (params.size() != params_.size()) throw ShapeError("predictor expects " + std::to_string(params_.size()) + " tensors");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != params_[i].name || params[i].value.dims() != params_[i].value.dims()) {
      throw ShapeError("predictor tensor '" + params[i].name + "' " + shape_str(params[i].value.dims()) +
                       " does not match expected '" + params_[i].name + "' " + shape_str(params_[i].value.dims()));
    }
  }
  params_ = std::move(params);
}

std::size_t ConvPredictor::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Var> ConvPredictor::bind(Tape& tape, bool trainable) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.leaf(to_f64(p.value), trainable));
  return out;
}

Var ConvPredictor::forward(std::span<const Var> bound, Var slice) const {
  if (bound.size() != params_.size()) throw ContractError("predictor bound to the wrong number of tensors");
  if (slice.dims() != Shape{cfg_.H, cfg_.W}) {
    throw ShapeError("predictor expects a " + shape_str({cfg_.H, cfg_.W}) + " slice, got " + shape_str(slice.dims()));
  }
  Var x = ad::area_downsample(ad::reshape(slice, {1, cfg_.H, cfg_.W}), 2, 2);
  const ad::Conv2dOptions same{.pad_h = 1, .pad_w = 1};
  for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
    x = ad::relu(ad::add_channel_bias(ad::conv2d(x, bound[2 * i], same), bound[2 * i + 1]));
    x = ad::area_downsample(x, 2, 1);
  }
  const std::size_t n = bound.size();
  x = ad::add_channel_bias(ad::conv2d(x, bound[n - 2]), bound[n - 1]);
  x = ad::reshape(x, {cfg_.outputs, cfg_.W2()});
  return ad::upsample_linear_1d(x, 2);
}

Var curves_from_raw(Var raw, bool monotone) {
  return ad::scale(monotone ? dpm::monotone_reparam(raw) : ad::tanh(raw), kCurveLimit);
}

Tensor64 raw_from_curves(const Tensor64& curves, bool monotone) {
  if (curves.ndim() != 2) throw ShapeError("raw_from_curves expects [K, W]");
  const std::size_t K = curves.dim(0), W = curves.dim(1);
  Tensor64 unit = curves;
  for (auto& v : unit.data()) v /= kCurveLimit;
  Tensor64 raw(curves.dims());
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t k = 0; k < K; ++k) {
      const double c = unit.at(k, w);
      if (!(c > -1.0 && c < 1.0)) throw ContractError("curves must lie strictly inside (-1, 1)");
      if (!monotone || k == 0) {
        raw.at(k, w) = std::atanh(c);
        continue;
      }
      const double prev = unit.at(k - 1, w);
      const double h = 1.0 - prev, gap = c - prev;
      if (!(gap > 0.0)) throw ContractError("monotone curves must be strictly increasing");
      const double q = std::clamp(h, 1e-12, 3.0) * std::atanh(gap / h) / dpm::kDefaultGapScale;
      raw.at(k, w) = q > 30.0 ? q : std::log(std::expm1(q));
    }
  }
  return raw;
}

Var predict_curves(const ConvPredictor& model, std::span<const Var> bound, Var slice, bool monotone) {
  return curves_from_raw(model.forward(bound, slice), monotone);
}

Var predict_pm_direct(const ConvPredictor& model, std::span<const Var> bound, Var slice) {
  if (model.config().outputs != 1) throw ShapeError("direct regressor must have one output channel");
  return model.forward(bound, slice);
}

InitMode init_mode_from_string(const std::string& s) {
  if (s == "equispaced") return InitMode::equispaced;
  if (s == "random") return InitMode::random;
  throw ContractError("init mode must be 'equispaced' or 'random', got '" + s + "'");
}

Tensor64 init_free_coords(std::size_t K, std::size_t W, InitMode mode, Rng& rng, bool monotone) {
  if (K == 0 || W == 0) throw ContractError("init_free_coords needs K, W >= 1");
  if (mode == InitMode::random) {
    std::vector<double> v(K * W);
    for (auto& x : v) x = rng.normal(0.0, 0.1);
    return Tensor64({K, W}, std::move(v));
  }
  Tensor64 curves({K, W});
  for (std::size_t k = 0; k < K; ++k) {
    const double c = K == 1 ? 0.0 : -0.5 + double(k) / double(K - 1);
    for (std::size_t w = 0; w < W; ++w) curves.at(k, w) = c;
  }
  return raw_from_curves(curves, monotone);
}

std::string to_string(Pipeline p) { return p == Pipeline::cnn_dpm ? "cnn_dpm" : "cnn_only"; }

Pipeline pipeline_from_string(const std::string& s) {
  if (s == "cnn_dpm") return Pipeline::cnn_dpm;
  if (s == "cnn_only") return Pipeline::cnn_only;
  throw ContractError("pipeline must be 'cnn_dpm' or 'cnn_only', got '" + s + "'");
}

Model Model::create(Pipeline pipeline, const PredictorConfig& base, std::uint64_t seed, bool monotone,
                    std::size_t samples) {
  Model m;
  m.pipeline = pipeline;
  m.monotone = monotone;
  m.samples = samples;
  PredictorConfig cfg = base;
  if (pipeline == Pipeline::cnn_dpm) {
    cfg.outputs = dpm::kNumLayers;
    Tensor64 eq({dpm::kNumLayers, 1});
    for (std::size_t k = 0; k < dpm::kNumLayers; ++k) eq[k] = kEquispacedCurves[k];
    const Tensor64 bias = raw_from_curves(eq, monotone);
    m.names = {"net"};
    m.nets.emplace_back(cfg, stream_key(seed, "model/net"), bias.vec());
  } else {
    cfg.outputs = 1;
    m.names = {"b2", "b3"};
    for (const auto& n : m.names) m.nets.emplace_back(cfg, stream_key(seed, "model/" + n));
  }
  return m;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& net : nets) n += net.parameter_count();
  return n;
}

std::vector<NamedTensor> Model::flat_params() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    for (const auto& p : nets[i].params()) out.push_back({names[i] + "." + p.name, p.value});
  }
  return out;
}

void Model::set_flat_params(const std::vector<NamedTensor>& flat) {
  std::size_t at = 0;
  for (std::size_t i = 0; i < nets.size(); ++i) {
    for (auto& p : nets[i].params()) {
      if (at >= flat.size() || flat[at].name != names[i] + "." + p.name || flat[at].value.dims() != p.value.dims()) {
        throw ShapeError("parameter list does not match the model layout");
      }
      p.value = flat[at++].value;
    }
  }
  if (at != flat.size()) throw ShapeError("parameter list has extra tensors");
}

SliceOutputs run_model(const Model& model, std::span<const Var> bound, Var slice) {
  SliceOutputs out;
  if (model.pipeline == Pipeline::cnn_dpm) {
    out.curves = predict_curves(model.nets[0], bound, slice, model.monotone);
    const std::size_t W = slice.dims()[1];
    auto band = [&](dpm::Band b) {
      const Var line = dpm::project_column(slice, ad::select(out.curves, b.upper), ad::select(out.curves, b.lower),
                                           model.samples, model.pool);
      return ad::reshape(line, {1, W});
    };
    out.pm_b2 = band(dpm::kBandB2);
    out.pm_b3 = band(dpm::kBandB3);
    return out;
  }
  const std::size_t n0 = model.nets[0].params().size();
  out.pm_b2 = predict_pm_direct(model.nets[0], bound.subspan(0, n0), slice);
  out.pm_b3 = predict_pm_direct(model.nets[1], bound.subspan(n0), slice);
  return out;
}

namespace {

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  const Model& m = ckpt.model;
  json tensors = json::object();
  for (const auto& p : m.flat_params()) {
    const std::string file = p.name + ".tsr";
    io::write_tsr(p.value, dir / file);
    tensors[p.name] = {{"file", file}, {"dims", p.value.dims()}};
  }
  json nets = json::array();
  for (std::size_t i = 0; i < m.nets.size(); ++i) nets.push_back({{"name", m.names[i]}, {"config", m.nets[i].config().to_json()}});
  json manifest = {{"pipeline", to_string(m.pipeline)},
                   {"monotone", m.monotone},
                   {"samples", m.samples},
                   {"pool", dpm::to_string(m.pool)},
                   {"nets", nets},
                   {"tensors", tensors},
                   {"step", ckpt.step},
                   {"config", ckpt.config}};
  if (ckpt.cmm) {
    io::write_tsr(ckpt.cmm->params(), dir / "cmm.tsr");
    write_json(dir / "subjects.json", ckpt.cmm->subjects());
    manifest["cmm"] = {{"file", "cmm.tsr"}, {"subjects", "subjects.json"}};
  }
  write_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  Checkpoint ck;
  try {
    Model& m = ck.model;
    m.pipeline = pipeline_from_string(manifest.at("pipeline").get<std::string>());
    m.monotone = manifest.at("monotone").get<bool>();
    m.samples = manifest.at("samples").get<std::size_t>();
    m.pool = dpm::pool_mode_from_string(manifest.value("pool", std::string("mean")));
    const json& tensors = manifest.at("tensors");
    for (const auto& n : manifest.at("nets")) {
      const std::string name = n.at("name").get<std::string>();
      const PredictorConfig cfg = PredictorConfig::from_json(n.at("config"));
      std::vector<NamedTensor> params = ConvPredictor::zeros(cfg).params();
      for (auto& p : params) {
        const std::string key = name + "." + p.name;
        if (!tensors.contains(key)) throw FormatError("checkpoint is missing tensor '" + key + "'");
        p.value = io::read_tsr(dir / tensors.at(key).at("file").get<std::string>());
      }
      m.names.push_back(name);
      m.nets.emplace_back(cfg, std::move(params));
    }
    ck.step = manifest.at("step").get<std::uint64_t>();
    ck.config = manifest.value("config", json::object());
    if (manifest.contains("cmm")) {
      const auto subjects = read_json(dir / manifest["cmm"].at("subjects").get<std::string>()).get<std::vector<std::string>>();
      ck.cmm.emplace(subjects, io::read_tsr(dir / manifest["cmm"].at("file").get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw FormatError("checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  return ck;
}

}  // namespace octproj::pred
