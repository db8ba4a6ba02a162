#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "octproj/autodiff.hpp"
#include "octproj/objective.hpp"
#include "octproj/predictors.hpp"
#include "octproj/tensor.hpp"

namespace octproj::optim {

namespace fs = std::filesystem;

// -- Adam ---------------------------------------------------------------------

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Tensor64 m, v;  // empty until the first step
  std::uint64_t t = 0;
};

// Bias-corrected Adam update in place. NumericError on a non-finite gradient,
// naming `name` and the step about to be taken.
void adam_step(Tensor& param, const Tensor64& grad, AdamState& state, double lr, const std::string& name,
               const AdamOptions& opt = {});
void adam_step(Tensor64& param, const Tensor64& grad, AdamState& state, double lr, const std::string& name,
               const AdamOptions& opt = {});

// lr0 * ratio^(epoch / (total - 1)), reaching lr0 * ratio on the last epoch;
// lr0 when total == 1. With per_epoch the decay is ratio^epoch instead.
double lr_schedule(double lr0, std::size_t epoch, std::size_t total_epochs, double ratio = 1e-2,
                   bool per_epoch = false);

// -- data -----------------------------------------------------------------------

struct Subject {
  std::string id;
  Tensor oct;                 // [D, H, W]
  Tensor gt_b2, gt_b3;        // [D, W], min-max normalized
  std::optional<Tensor> truth_curves;  // [D, 3, W]
  std::optional<Tensor> octa;
  std::optional<Tensor> octa_gt_b2, octa_gt_b3;
};

// One subject directory as written by the phantom exporter.
Subject load_subject(const fs::path& dir);
// All subject directories under data/<split>, sorted by name. Stress cases
// (ids with a suffix after the base id) are skipped unless `with_stress`.
std::vector<Subject> load_split(const fs::path& data, const std::string& split, bool with_stress = false);

// One parameter leaf per Model::flat_params() entry.
std::vector<ad::Var> bind_model(const pred::Model& model, ad::Tape& tape, bool trainable);

// -- training -------------------------------------------------------------------

struct TrainConfig {
  pred::Pipeline pipeline = pred::Pipeline::cnn_dpm;
  double lr0 = 1e-4;
  double lr_ratio = 1e-2;
  bool lr_per_epoch = false;
  double cmm_lr_scale = 1.0;  // CMM parameters use lr * cmm_lr_scale
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lambda = obj::kDefaultLambda;
  std::size_t samples = dpm::kDefaultSamples;
  dpm::PoolMode pool = dpm::PoolMode::mean;
  std::uint64_t seed = 0;
  bool cmm_enabled = true;
  bool monotone = false;
  std::vector<std::size_t> channels{8, 16, 16};
  std::uint64_t feature_seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_psnr_b2 = 0.0, val_ssim_b2 = 0.0;
  double val_psnr_b3 = 0.0, val_ssim_b3 = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  pred::Checkpoint best;  // highest mean validation SSIM over B2 and B3
  pred::Checkpoint last;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;  // 0 when no epoch improved on the initialization
};

using SliceRef = std::pair<std::size_t, std::size_t>;  // (subject index, slice)

// Model, CMM table and optimizer state of one training run. Keeps a
// reference to train_set, which must outlive it.
class Trainer {
 public:
  Trainer(const std::vector<Subject>& train_set, const TrainConfig& cfg);

  // One Adam step on the summed gradient of mean loss over `batch`. Only the
  // CMM entries of subjects present in the batch move. Returns the mean loss.
  double step(std::span<const SliceRef> batch, double lr);

  const pred::Model& model() const { return model_; }
  const std::optional<obj::CmmTable>& cmm() const { return cmm_; }
  std::uint64_t steps() const { return steps_; }
  pred::Checkpoint checkpoint() const;

 private:
  const std::vector<Subject>& data_;
  TrainConfig cfg_;
  pred::Model model_;
  std::optional<obj::CmmTable> cmm_;
  obj::FeatureExtractor fx_;
  std::vector<AdamState> param_state_, cmm_state_;
  std::uint64_t steps_ = 0;
};

// Optional per-epoch callback, e.g. for progress output.
using EpochHook = std::function<void(const EpochRecord&)>;

// Writes out/checkpoint/ (best) and out/history.jsonl when `out` is non-empty.
TrainResult train(const std::vector<Subject>& train_set, const std::vector<Subject>& val_set, const TrainConfig& cfg,
                  const fs::path& out = {}, const EpochHook& hook = {});

// -- inference ------------------------------------------------------------------

struct Projection {
  Tensor pm_b2, pm_b3;    // [D, W], min-max normalized by their own range
  Tensor raw_b2, raw_b3;  // before normalization
  Tensor curves;          // [D, 3, W] for cnn_dpm, empty otherwise
};

// ShapeError when vol extents differ from the model's. Slices are independent,
// so any thread count gives identical results.
Projection infer(const pred::Model& model, const Tensor& vol, std::size_t threads = 1);

// Applies known curves to another volume (e.g. OCT curves on OCTA).
Projection project_with_curves(const Tensor& vol, const Tensor& curves, std::size_t samples, dpm::PoolMode pool);

struct Metrics {
  double psnr_b2 = 0.0, ssim_b2 = 0.0;
  double psnr_b3 = 0.0, ssim_b3 = 0.0;
};

Metrics evaluate(const Projection& p, const Tensor& gt_b2, const Tensor& gt_b3);

// -- per-pair fitting -------------------------------------------------------------

struct FitConfig {
  std::size_t steps = 200;
  double lr = 1e-4;
  double lambda = obj::kDefaultLambda;
  std::size_t samples = dpm::kDefaultSamples;
  dpm::PoolMode pool = dpm::PoolMode::mean;
  std::uint64_t seed = 0;
  bool monotone = false;
  pred::InitMode init = pred::InitMode::random;
  bool cmm_enabled = true;
  std::uint64_t feature_seed = 0;

  nlohmann::json to_json() const;
};

struct FitResult {
  Projection projection;  // from the final curves
  std::vector<std::vector<double>> loss_traces;  // per slice, one entry per step
  Tensor cmm;  // [2, 2] (band, {min, max}) after fitting
  double crossing_fraction = 0.0;
};

// Optimizes free curve coordinates of each slice in turn against the target
// PMs. init_raw [D, 3, W] overrides the initialization (raw, pre-squash).
FitResult fit_dpm_only(const Tensor& vol, const Tensor& target_b2, const Tensor& target_b3, const FitConfig& cfg,
                       const std::optional<Tensor64>& init_raw = std::nullopt);

}  // namespace octproj::optim
