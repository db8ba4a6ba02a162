#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "octproj/autodiff.hpp"
#include "octproj/tensor.hpp"

namespace octproj::obj {

inline constexpr double kCmmEps = 1e-6;
inline constexpr double kDefaultLambda = 0.2;
inline constexpr std::size_t kNumBands = 2;  // B2, B3

// Learnable (min, max) per training subject and band, initialised to (0, 1).
// params() is [S, 2 bands, 2] with the last axis (min, max).
class CmmTable {
 public:
  CmmTable() = default;
  explicit CmmTable(std::vector<std::string> subjects);
  CmmTable(std::vector<std::string> subjects, Tensor params);

  std::size_t size() const { return subjects_.size(); }
  bool empty() const { return subjects_.empty(); }
  const std::vector<std::string>& subjects() const { return subjects_; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  // LookupError for unknown ids.
  std::size_t index(const std::string& id) const;

  std::pair<double, double> get(const std::string& id, std::size_t band) const;
  void set(const std::string& id, std::size_t band, double lo, double hi);

  const Tensor& params() const { return params_; }
  Tensor& params() { return params_; }
  // The [2, 2] block of one subject.
  Tensor block(const std::string& id) const;
  void set_block(const std::string& id, const Tensor& block);

 private:
  std::vector<std::string> subjects_;
  std::map<std::string, std::size_t> index_;
  Tensor params_;
};

// (I - lo) / max(eps, hi - lo); lo and hi are single-element nodes.
ad::Var cmm_apply(ad::Var pred, ad::Var lo, ad::Var hi);

// Mean absolute difference.
ad::Var l1_loss(ad::Var a, const Tensor64& b);

struct FeatureSpec {
  std::uint64_t seed = 0;
  std::size_t scales = 2;
  std::size_t channels = 8;
  // Mean-subtracted kernels respond to structure only, not to offsets.
  bool zero_mean = true;
};

// Frozen random 3x3 filter bank applied at dyadic scales with |.| activation.
// Inputs are 2-D maps; borders are replicated so zero-mean kernels give an
// exactly zero response on constant regions.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureSpec spec = {});

  const FeatureSpec& spec() const { return spec_; }
  const std::vector<Tensor64>& kernels() const { return kernels_; }  // [C, 1, 3, 3] per scale
  std::uint64_t checksum() const;

  // x [H, W] -> one [C, H_s, W_s] node per scale.
  std::vector<ad::Var> features(ad::Var x) const;

 private:
  FeatureSpec spec_;
  std::vector<Tensor64> kernels_;
};

// sum_s mean |F_s(a) - F_s(b)|; b is a constant target.
ad::Var feature_loss(ad::Var a, const Tensor64& b, const FeatureExtractor& fx);

// l1 + feature loss of one band.
ad::Var band_loss(ad::Var pred, const Tensor64& gt, const FeatureExtractor& fx);

// L_B2 + lambda * L_B3 on already normalized predictions.
ad::Var combined_loss(ad::Var pred_b2, const Tensor64& gt_b2, ad::Var pred_b3, const Tensor64& gt_b3, double lambda,
                      const FeatureExtractor& fx);

// 10 log10(range^2 / MSE); +inf for identical inputs.
double psnr(const Tensor& a, const Tensor& b, double range = 1.0);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

// Mean local SSIM over all fully covered window positions (no padding).
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {});
// Same aggregation of the contrast-structure factor alone (luminance dropped).
double ssim_contrast_structure(const Tensor& a, const Tensor& b, const SsimOptions& opt = {});

// Min-max normalization of a whole map; spans below eps give all zeros.
Tensor minmax_normalize(const Tensor& t, double eps = 1e-8);

}  // namespace octproj::obj
