#include "octproj/optim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

#include "octproj/errors.hpp"
#include "octproj/io.hpp"
#include "octproj/rng.hpp"

namespace octproj::optim {

using ad::Tape;
using ad::Var;
using json = nlohmann::json;

namespace {

template <typename T>
void adam_impl(BasicTensor<T>& param, const Tensor64& grad, AdamState& st, double lr, const std::string& name,
               const AdamOptions& opt) {
  if (grad.dims() != param.dims()) {
    throw ShapeError("gradient of " + name + " is " + shape_str(grad.dims()) + ", parameter is " +
                     shape_str(param.dims()));
  }
  if (!(lr > 0)) throw ContractError("learning rate must be > 0");
  for (double g : grad.vec()) {
    if (!std::isfinite(g)) {
      throw NumericError("non-finite gradient in " + name + " at step " + std::to_string(st.t + 1));
    }
  }
  if (st.m.empty()) {
    st.m = Tensor64(param.dims());
    st.v = Tensor64(param.dims());
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(opt.beta1, double(st.t));
  const double c2 = 1.0 - std::pow(opt.beta2, double(st.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    st.m[i] = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g;
    st.v[i] = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g * g;
    const double mh = st.m[i] / c1, vh = st.v[i] / c2;
    param[i] = static_cast<T>(double(param[i]) - lr * mh / (std::sqrt(vh) + opt.eps));
  }
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Callers write results
// by index, so the outcome does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

Tensor stack_rows(const std::vector<Tensor64>& rows, Shape dims) {
  std::vector<float> v;
  v.reserve(shape_numel(dims));
  for (const auto& r : rows) {
    for (double x : r.vec()) v.push_back(static_cast<float>(x));
  }
  return Tensor(std::move(dims), std::move(v));
}

Tensor64 row_of(const Tensor& pm, std::size_t d) {
  const std::size_t W = pm.dim(1);
  Tensor64 r({1, W});
  for (std::size_t w = 0; w < W; ++w) r[w] = pm.at(d, w);
  return r;
}

Tensor slice_of(const Tensor& vol, std::size_t d) { return vol.sub(d); }

std::optional<Tensor> read_optional(const fs::path& p) {
  if (!fs::exists(p)) return std::nullopt;
  return io::read_tsr(p);
}

// The combined loss of one slice, with the CMM block [2, 2] when given.
Var slice_loss(const pred::SliceOutputs& out, std::optional<Var> cmm, const Tensor64& gt_b2, const Tensor64& gt_b3,
               double lambda, const obj::FeatureExtractor& fx) {
  Var b2 = out.pm_b2, b3 = out.pm_b3;
  if (cmm) {
    b2 = obj::cmm_apply(b2, ad::element(*cmm, 0), ad::element(*cmm, 1));
    b3 = obj::cmm_apply(b3, ad::element(*cmm, 2), ad::element(*cmm, 3));
  }
  return obj::combined_loss(b2, gt_b2, b3, gt_b3, lambda, fx);
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss " + where);
}

}  // namespace

void adam_step(Tensor& param, const Tensor64& grad, AdamState& state, double lr, const std::string& name,
               const AdamOptions& opt) {
  adam_impl(param, grad, state, lr, name, opt);
}

void adam_step(Tensor64& param, const Tensor64& grad, AdamState& state, double lr, const std::string& name,
               const AdamOptions& opt) {
  adam_impl(param, grad, state, lr, name, opt);
}

double lr_schedule(double lr0, std::size_t epoch, std::size_t total_epochs, double ratio, bool per_epoch) {
  if (per_epoch) return lr0 * std::pow(ratio, double(epoch));
  if (total_epochs <= 1) return lr0;
  return lr0 * std::pow(ratio, double(epoch) / double(total_epochs - 1));
}

// -- data ---------------------------------------------------------------------

Subject load_subject(const fs::path& dir) {
  Subject s;
  const io::Volume v = io::load_volume(dir / "oct");
  s.id = dir.filename().string();
  s.oct = v.data;
  s.gt_b2 = io::read_tsr(dir / "gt_pm_b2.tsr");
  s.gt_b3 = io::read_tsr(dir / "gt_pm_b3.tsr");
  const Shape pm{v.meta.D, v.meta.W};
  if (s.gt_b2.dims() != pm || s.gt_b3.dims() != pm) {
    throw ConsistencyError(dir.string() + ": gt PMs must be " + shape_str(pm));
  }
  s.truth_curves = read_optional(dir / "truth_curves.tsr");
  if (fs::exists(dir / "octa" / "meta.json")) s.octa = io::load_volume(dir / "octa").data;
  s.octa_gt_b2 = read_optional(dir / "octa_pm_b2.tsr");
  s.octa_gt_b3 = read_optional(dir / "octa_pm_b3.tsr");
  return s;
}

std::vector<Subject> load_split(const fs::path& data, const std::string& split, bool with_stress) {
  const fs::path root = data / split;
  if (!fs::is_directory(root)) throw IoError("missing split directory " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (!e.is_directory()) continue;
    const std::string name = e.path().filename().string();
    const bool stress = name.ends_with("_lesion") || name.ends_with("_steep") || name.ends_with("_lowq");
    if (stress && !with_stress) continue;
    dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<Subject> out;
  for (const auto& d : dirs) out.push_back(load_subject(d));
  return out;
}

std::vector<Var> bind_model(const pred::Model& model, Tape& tape, bool trainable) {
  std::vector<Var> out;
  for (const auto& net : model.nets) {
    const auto b = net.bind(tape, trainable);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

// -- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ContractError("lr0 must be > 0");
  if (!(lr_ratio > 0 && lr_ratio <= 1)) throw ContractError("lr_ratio must lie in (0, 1]");
  if (!(cmm_lr_scale > 0)) throw ContractError("cmm_lr_scale must be > 0");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(lambda >= 0)) throw ContractError("lambda must be >= 0");
  if (samples < 2) throw ContractError("samples must be >= 2");
  if (channels.empty()) throw ContractError("channels must not be empty");
}

json TrainConfig::to_json() const {
  return {{"pipeline", pred::to_string(pipeline)},
          {"lr0", lr0},
          {"lr_ratio", lr_ratio},
          {"lr_per_epoch", lr_per_epoch},
          {"cmm_lr_scale", cmm_lr_scale},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lambda", lambda},
          {"samples", samples},
          {"pool", dpm::to_string(pool)},
          {"seed", seed},
          {"cmm_enabled", cmm_enabled},
          {"monotone", monotone},
          {"channels", channels},
          {"feature_seed", feature_seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  if (j.contains("pipeline")) c.pipeline = pred::pipeline_from_string(j.at("pipeline").get<std::string>());
  c.lr0 = j.value("lr0", c.lr0);
  c.lr_ratio = j.value("lr_ratio", c.lr_ratio);
  c.lr_per_epoch = j.value("lr_per_epoch", c.lr_per_epoch);
  c.cmm_lr_scale = j.value("cmm_lr_scale", c.cmm_lr_scale);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda = j.value("lambda", c.lambda);
  c.samples = j.value("samples", c.samples);
  if (j.contains("pool")) c.pool = dpm::pool_mode_from_string(j.at("pool").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.cmm_enabled = j.value("cmm_enabled", c.cmm_enabled);
  c.monotone = j.value("monotone", c.monotone);
  c.channels = j.value("channels", c.channels);
  c.feature_seed = j.value("feature_seed", c.feature_seed);
  return c;
}

json EpochRecord::to_json() const {
  return {{"epoch", epoch},           {"lr", lr},
          {"train_loss", train_loss}, {"val_psnr_b2", val_psnr_b2},
          {"val_ssim_b2", val_ssim_b2}, {"val_psnr_b3", val_psnr_b3},
          {"val_ssim_b3", val_ssim_b3}};
}

json FitConfig::to_json() const {
  return {{"steps", steps},
          {"lr", lr},
          {"lambda", lambda},
          {"samples", samples},
          {"pool", dpm::to_string(pool)},
          {"seed", seed},
          {"monotone", monotone},
          {"init", init == pred::InitMode::random ? "random" : "equispaced"},
          {"cmm_enabled", cmm_enabled},
          {"feature_seed", feature_seed}};
}

// -- inference ------------------------------------------------------------------

Projection infer(const pred::Model& model, const Tensor& vol, std::size_t threads) {
  if (model.nets.empty()) throw ContractError("model has no predictors");
  const auto& cfg = model.nets[0].config();
  if (vol.ndim() != 3 || vol.dim(1) != cfg.H || vol.dim(2) != cfg.W) {
    throw ShapeError("model expects [D, " + std::to_string(cfg.H) + ", " + std::to_string(cfg.W) + "] volumes, got " +
                     shape_str(vol.dims()));
  }
  const std::size_t D = vol.dim(0), W = cfg.W;
  const bool curves = model.pipeline == pred::Pipeline::cnn_dpm;
  std::vector<Tensor64> b2(D), b3(D), cv(D);
  parallel_for(D, threads, [&](std::size_t d) {
    Tape tape(ad::Precision::f32);
    const auto bound = bind_model(model, tape, false);
    const auto out = pred::run_model(model, bound, tape.constant(to_f64(slice_of(vol, d))));
    b2[d] = out.pm_b2.value();
    b3[d] = out.pm_b3.value();
    if (curves) cv[d] = out.curves.value();
  });
  Projection p;
  p.raw_b2 = stack_rows(b2, {D, W});
  p.raw_b3 = stack_rows(b3, {D, W});
  p.pm_b2 = obj::minmax_normalize(p.raw_b2);
  p.pm_b3 = obj::minmax_normalize(p.raw_b3);
  if (curves) p.curves = stack_rows(cv, {D, dpm::kNumLayers, W});
  return p;
}

Projection project_with_curves(const Tensor& vol, const Tensor& curves, std::size_t samples, dpm::PoolMode pool) {
  Projection p;
  p.raw_b2 = dpm::project_volume(vol, curves, dpm::kBandB2, samples, pool);
  p.raw_b3 = dpm::project_volume(vol, curves, dpm::kBandB3, samples, pool);
  p.pm_b2 = obj::minmax_normalize(p.raw_b2);
  p.pm_b3 = obj::minmax_normalize(p.raw_b3);
  p.curves = curves;
  return p;
}

Metrics evaluate(const Projection& p, const Tensor& gt_b2, const Tensor& gt_b3) {
  Metrics m;
  m.psnr_b2 = obj::psnr(p.pm_b2, gt_b2);
  m.ssim_b2 = obj::ssim(p.pm_b2, gt_b2);
  m.psnr_b3 = obj::psnr(p.pm_b3, gt_b3);
  m.ssim_b3 = obj::ssim(p.pm_b3, gt_b3);
  return m;
}

// -- training -------------------------------------------------------------------

namespace {

struct SliceGrad {
  double loss = 0.0;
  std::vector<Tensor64> params;
  Tensor64 cmm;
};

void validation(const pred::Model& model, const std::vector<Subject>& val, std::size_t threads, EpochRecord& rec) {
  if (val.empty()) return;
  for (const auto& s : val) {
    const Metrics m = evaluate(infer(model, s.oct, threads), s.gt_b2, s.gt_b3);
    rec.val_psnr_b2 += m.psnr_b2;
    rec.val_ssim_b2 += m.ssim_b2;
    rec.val_psnr_b3 += m.psnr_b3;
    rec.val_ssim_b3 += m.ssim_b3;
  }
  const double n = double(val.size());
  rec.val_psnr_b2 /= n;
  rec.val_ssim_b2 /= n;
  rec.val_psnr_b3 /= n;
  rec.val_ssim_b3 /= n;
}

}  // namespace

Trainer::Trainer(const std::vector<Subject>& train_set, const TrainConfig& cfg)
    : data_(train_set), cfg_(cfg), fx_(obj::FeatureSpec{cfg.feature_seed}) {
  cfg_.validate();
  if (data_.empty()) throw ContractError("training needs at least one subject");
  const Shape dims = data_.front().oct.dims();
  if (dims.size() != 3) throw ShapeError("volumes must be [D, H, W]");
  for (const auto& s : data_) {
    if (s.oct.dims() != dims) throw ShapeError("training volumes must share extents");
  }
  pred::PredictorConfig base;
  base.H = dims[1];
  base.W = dims[2];
  base.channels = cfg_.channels;
  model_ = pred::Model::create(cfg_.pipeline, base, cfg_.seed, cfg_.monotone, cfg_.samples);
  model_.pool = cfg_.pool;
  if (cfg_.cmm_enabled) {
    std::vector<std::string> ids;
    for (const auto& s : data_) ids.push_back(s.id);
    cmm_.emplace(ids);
  }
  param_state_.resize(model_.flat_params().size());
  cmm_state_.resize(data_.size());
}

pred::Checkpoint Trainer::checkpoint() const {
  pred::Checkpoint c;
  c.model = model_;
  c.cmm = cmm_;
  c.step = steps_;
  c.config = cfg_.to_json();
  return c;
}

double Trainer::step(std::span<const SliceRef> batch, double lr) {
  const std::size_t B = batch.size();
  if (B == 0) throw ContractError("empty batch");
  for (const auto& [si, d] : batch) {
    if (si >= data_.size() || d >= data_[si].oct.dim(0)) throw ContractError("batch entry out of range");
  }
  std::vector<SliceGrad> grads(B);
  parallel_for(B, cfg_.threads, [&](std::size_t b) {
    const auto [si, d] = batch[b];
    const Subject& s = data_[si];
    Tape tape(ad::Precision::f32);
    const auto bound = bind_model(model_, tape, true);
    const auto outs = pred::run_model(model_, bound, tape.constant(to_f64(slice_of(s.oct, d))));
    std::optional<Var> block;
    if (cmm_) block = tape.leaf(to_f64(cmm_->block(s.id)));
    const Var loss = slice_loss(outs, block, row_of(s.gt_b2, d), row_of(s.gt_b3, d), cfg_.lambda, fx_);
    SliceGrad& g = grads[b];
    g.loss = loss.item();
    tape.backward(ad::scale(loss, 1.0 / double(B)));
    for (const auto& v : bound) g.params.push_back(tape.grad(v));
    if (block) g.cmm = tape.grad(*block);
  });

  // Fixed summation order keeps the result independent of the thread count.
  double loss = 0.0;
  for (const auto& g : grads) loss += g.loss;
  check_finite(loss, "at step " + std::to_string(steps_ + 1));
  std::vector<Tensor64> total = std::move(grads[0].params);
  for (std::size_t b = 1; b < B; ++b) {
    for (std::size_t k = 0; k < total.size(); ++k) {
      for (std::size_t i = 0; i < total[k].size(); ++i) total[k][i] += grads[b].params[k][i];
    }
  }
  std::size_t k = 0;
  for (std::size_t n = 0; n < model_.nets.size(); ++n) {
    for (auto& p : model_.nets[n].params()) {
      adam_step(p.value, total[k], param_state_[k], lr, model_.names[n] + "." + p.name);
      ++k;
    }
  }
  if (cmm_) {
    for (std::size_t si = 0; si < data_.size(); ++si) {
      Tensor64 g;
      for (std::size_t b = 0; b < B; ++b) {
        if (batch[b].first != si) continue;
        if (g.empty()) {
          g = grads[b].cmm;
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += grads[b].cmm[i];
        }
      }
      if (g.empty()) continue;
      const std::string& id = data_[si].id;
      Tensor block = cmm_->block(id);
      adam_step(block, g, cmm_state_[si], lr * cfg_.cmm_lr_scale, "cmm[" + id + "]");
      cmm_->set_block(id, block);
    }
  }
  ++steps_;
  return loss / double(B);
}

TrainResult train(const std::vector<Subject>& train_set, const std::vector<Subject>& val_set, const TrainConfig& cfg,
                  const fs::path& out, const EpochHook& hook) {
  Trainer trainer(train_set, cfg);
  std::vector<SliceRef> items;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    for (std::size_t d = 0; d < train_set[i].oct.dim(0); ++d) items.emplace_back(i, d);
  }
  const Rng shuffle_root(cfg.seed, "train/shuffle");

  TrainResult res;
  res.best = trainer.checkpoint();
  double best_score = -std::numeric_limits<double>::infinity();
  if (!val_set.empty()) {
    EpochRecord init;
    validation(trainer.model(), val_set, cfg.threads, init);
    best_score = 0.5 * (init.val_ssim_b2 + init.val_ssim_b3);
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg.lr0, epoch, cfg.epochs, cfg.lr_ratio, cfg.lr_per_epoch);
    Rng rng = shuffle_root.split("epoch" + std::to_string(epoch));
    auto order = items;
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, order.size() - start);
      const double loss = trainer.step(std::span(order).subspan(start, B), lr);
      res.step_losses.push_back(loss);
      loss_sum += loss * double(B);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / double(order.size());
    validation(trainer.model(), val_set, cfg.threads, rec);
    res.history.push_back(rec);
    const double score = 0.5 * (rec.val_ssim_b2 + rec.val_ssim_b3);
    if (val_set.empty() || score > best_score) {
      best_score = score;
      res.best = trainer.checkpoint();
      res.best_epoch = epoch + 1;
    }
    if (hook) hook(rec);
  }
  res.last = trainer.checkpoint();

  if (!out.empty()) {
    fs::create_directories(out);
    pred::save_checkpoint(out / "checkpoint", res.best);
    std::ofstream h(out / "history.jsonl");
    if (!h) throw IoError("cannot write " + (out / "history.jsonl").string());
    for (const auto& r : res.history) h << r.to_json().dump() << '\n';
  }
  return res;
}

// -- fitting --------------------------------------------------------------------

FitResult fit_dpm_only(const Tensor& vol, const Tensor& target_b2, const Tensor& target_b3, const FitConfig& cfg,
                       const std::optional<Tensor64>& init_raw) {
  if (vol.ndim() != 3) throw ShapeError("volume must be [D, H, W]");
  const std::size_t D = vol.dim(0), W = vol.dim(2), K = dpm::kNumLayers;
  if (target_b2.dims() != Shape{D, W} || target_b3.dims() != Shape{D, W}) {
    throw ShapeError("targets must be " + shape_str({D, W}));
  }
  if (init_raw && init_raw->dims() != Shape{D, K, W}) throw ShapeError("init_raw must be " + shape_str({D, K, W}));
  if (cfg.steps > 0 && !(cfg.lr > 0)) throw ContractError("lr must be > 0");

  const obj::FeatureExtractor fx(obj::FeatureSpec{cfg.feature_seed});
  const Rng root(cfg.seed, "fit-dpm");
  Tensor64 cmm({2, 2}, {0.0, 1.0, 0.0, 1.0});
  AdamState cmm_state;

  FitResult res;
  res.loss_traces.resize(D);
  std::vector<Tensor64> cv(D), b2(D), b3(D);

  auto forward = [&](Var raw, Var slice) {
    pred::SliceOutputs o;
    o.curves = pred::curves_from_raw(raw, cfg.monotone);
    auto band = [&](dpm::Band b) {
      return ad::reshape(dpm::project_column(slice, ad::select(o.curves, b.upper), ad::select(o.curves, b.lower),
                                             cfg.samples, cfg.pool),
                         {1, W});
    };
    o.pm_b2 = band(dpm::kBandB2);
    o.pm_b3 = band(dpm::kBandB3);
    return o;
  };

  for (std::size_t d = 0; d < D; ++d) {
    Tensor64 raw;
    if (init_raw) {
      raw = Tensor64({K, W});
      for (std::size_t i = 0; i < K * W; ++i) raw[i] = (*init_raw)[d * K * W + i];
    } else {
      Rng rng = root.split("slice" + std::to_string(d));
      raw = pred::init_free_coords(K, W, cfg.init, rng, cfg.monotone);
    }
    const Tensor64 slice = to_f64(slice_of(vol, d));
    const Tensor64 g2 = row_of(target_b2, d), g3 = row_of(target_b3, d);
    AdamState raw_state;
    for (std::size_t it = 0; it < cfg.steps; ++it) {
      Tape tape(ad::Precision::f32);
      const Var r = tape.leaf(raw);
      const auto o = forward(r, tape.constant(slice));
      std::optional<Var> block;
      if (cfg.cmm_enabled) block = tape.leaf(cmm);
      const Var loss = slice_loss(o, block, g2, g3, cfg.lambda, fx);
      check_finite(loss.item(), "at slice " + std::to_string(d) + " step " + std::to_string(it + 1));
      tape.backward(loss);
      res.loss_traces[d].push_back(loss.item());
      adam_step(raw, tape.grad(r), raw_state, cfg.lr, "coords[" + std::to_string(d) + "]");
      if (block) adam_step(cmm, tape.grad(*block), cmm_state, cfg.lr, "cmm");
    }
    Tape tape(ad::Precision::f32);
    const auto o = forward(tape.constant(raw), tape.constant(slice));
    cv[d] = o.curves.value();
    b2[d] = o.pm_b2.value();
    b3[d] = o.pm_b3.value();
  }

  Projection& p = res.projection;
  p.curves = stack_rows(cv, {D, K, W});
  p.raw_b2 = stack_rows(b2, {D, W});
  p.raw_b3 = stack_rows(b3, {D, W});
  p.pm_b2 = obj::minmax_normalize(p.raw_b2);
  p.pm_b3 = obj::minmax_normalize(p.raw_b3);
  res.cmm = to_f32(cmm);
  res.crossing_fraction = dpm::crossing_fraction(p.curves);
  return res;
}

}  // namespace octproj::optim
