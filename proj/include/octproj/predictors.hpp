#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "octproj/autodiff.hpp"
#include "octproj/dpm.hpp"
#include "octproj/objective.hpp"
#include "octproj/rng.hpp"
#include "octproj/tensor.hpp"

namespace octproj::pred {

namespace fs = std::filesystem;

// Input [H, W] -> 2x2 area mean -> per stage: conv3x3 + bias + relu, then
// halve the height -> (remaining height x 1) conv to `outputs` channels ->
// linear upsampling back to W. Output is [outputs, W] before any squashing.
struct PredictorConfig {
  std::size_t H = 128, W = 128;
  std::vector<std::size_t> channels{8, 16, 16};
  std::size_t outputs = dpm::kNumLayers;

  void validate() const;
  std::size_t H2() const { return (H + 1) / 2; }
  std::size_t W2() const { return W / 2; }
  // Height left for the collapsing convolution.
  std::size_t collapse_height() const;

  nlohmann::json to_json() const;
  static PredictorConfig from_json(const nlohmann::json& j);
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

class ConvPredictor {
 public:
  ConvPredictor() = default;
  // Kaiming-uniform weights from `seed`; zero biases except the head bias,
  // which is `head_bias` when given (one value per output channel).
  ConvPredictor(PredictorConfig cfg, std::uint64_t seed, std::vector<double> head_bias = {});
  static ConvPredictor zeros(PredictorConfig cfg);
  // Rebuilds from stored tensors; names and dims must match the layout.
  ConvPredictor(PredictorConfig cfg, std::vector<NamedTensor> params);

  const PredictorConfig& config() const { return cfg_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& params() { return params_; }
  std::size_t parameter_count() const;

  // One tape leaf per parameter, in params() order.
  std::vector<ad::Var> bind(ad::Tape& tape, bool trainable = true) const;
  // slice [H, W] -> [outputs, W]. ShapeError when extents differ from the config.
  ad::Var forward(std::span<const ad::Var> bound, ad::Var slice) const;

 private:
  PredictorConfig cfg_;
  std::vector<NamedTensor> params_;
};

// [3, W] layer curves in (-1, 1): tanh of the head output, or the ordered
// reparameterization when `monotone`.
ad::Var predict_curves(const ConvPredictor& model, std::span<const ad::Var> bound, ad::Var slice,
                       bool monotone = false);
// [1, W] raw projection line.
ad::Var predict_pm_direct(const ConvPredictor& model, std::span<const ad::Var> bound, ad::Var slice);

// Squashed curves are scaled by this so they stay strictly inside (-1, 1)
// even where tanh saturates in floating point.
inline constexpr double kCurveLimit = 1.0 - 1e-6;

// Maps raw [K, W] to curves: tanh, or dpm::monotone_reparam, times kCurveLimit.
ad::Var curves_from_raw(ad::Var raw, bool monotone);
// Inverse of curves_from_raw for curves strictly inside (-1, 1); monotone
// mode additionally needs them strictly increasing in k.
Tensor64 raw_from_curves(const Tensor64& curves, bool monotone);

inline const std::vector<double> kEquispacedCurves{-0.5, 0.0, 0.5};

enum class InitMode { equispaced, random };
InitMode init_mode_from_string(const std::string& s);

// Free per-pair coordinates [K, W]: equispaced gives curves (-0.5, 0, 0.5)
// (K = 3) or evenly spread in (-1, 1); random is N(0, 0.1^2).
Tensor64 init_free_coords(std::size_t K, std::size_t W, InitMode mode, Rng& rng, bool monotone = false);

// -- pipelines and checkpoints ------------------------------------------------

enum class Pipeline { cnn_dpm, cnn_only };
std::string to_string(Pipeline p);
Pipeline pipeline_from_string(const std::string& s);

// cnn_dpm: one predictor "net" with 3 curve outputs.
// cnn_only: predictors "b2" and "b3", one output channel each.
struct Model {
  Pipeline pipeline = Pipeline::cnn_dpm;
  bool monotone = false;
  std::size_t samples = dpm::kDefaultSamples;
  dpm::PoolMode pool = dpm::PoolMode::mean;
  std::vector<std::string> names;
  std::vector<ConvPredictor> nets;

  static Model create(Pipeline pipeline, const PredictorConfig& base, std::uint64_t seed, bool monotone = false,
                      std::size_t samples = dpm::kDefaultSamples);
  std::size_t parameter_count() const;
  // All parameters flattened over nets, prefixed "<net>.".
  std::vector<NamedTensor> flat_params() const;
  void set_flat_params(const std::vector<NamedTensor>& flat);
};

// Pre-normalization outputs of one slice.
struct SliceOutputs {
  ad::Var pm_b2, pm_b3;  // [1, W]
  ad::Var curves;        // [3, W], cnn_dpm only
};

// bound: Model::flat_params() order.
SliceOutputs run_model(const Model& model, std::span<const ad::Var> bound, ad::Var slice);

struct Checkpoint {
  Model model;
  std::optional<obj::CmmTable> cmm;
  std::uint64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
};

// Directory of named TSR files plus manifest.json, and cmm.tsr +
// subjects.json when a CMM table is present.
void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& dir);

}  // namespace octproj::pred
