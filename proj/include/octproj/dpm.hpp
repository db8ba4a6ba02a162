#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "octproj/autodiff.hpp"
#include "octproj/tensor.hpp"

// Differentiable projection: uniform sampling between two layer curves,
// bilinear resampling of the B-scan, and vertical pooling into one PM line.
//
// Coordinate convention (used everywhere): normalized -1 is the centre of the
// first row/column and +1 the centre of the last, so a normalized coordinate
// c maps to pixel position (c + 1) / 2 * (extent - 1).
namespace octproj::dpm {

enum class PoolMode { mean, max };

PoolMode pool_mode_from_string(const std::string& s);
std::string to_string(PoolMode m);

// Layer-pair selection: B2 = ILM..OPL (curves 0, 1), B3 = OPL..BM (curves 1, 2).
struct Band {
  std::size_t upper = 0;
  std::size_t lower = 1;
};
inline constexpr Band kBandB2{0, 1};
inline constexpr Band kBandB3{1, 2};
Band band_from_string(const std::string& s);

inline constexpr std::size_t kDefaultSamples = 64;
inline constexpr std::size_t kNumLayers = 3;

// Normalized abscissa of column w in an image of width W (0 when W == 1).
double column_abscissa(std::size_t w, std::size_t W);
double to_pixel(double normalized, std::size_t extent);
double to_normalized(double pixel, std::size_t extent);

// upper, lower: [W] -> grid [M, W, 2] with grid[j][w] = (x_w, y_jw),
// y_jw = upper_w + t_j (lower_w - upper_w), t_j = j / (M - 1).
ad::Var build_sampling_grid(ad::Var upper, ad::Var lower, std::size_t M);

// img [H, W_img], grid [M, W, 2] -> [M, W]. Coordinates are clamped to the
// image (border behaviour); gradients flow to both image and grid.
ad::Var bilinear_sample(ad::Var img, ad::Var grid);

// One projection line: pool(bilinear_sample(slice, grid(upper, lower)), rows).
ad::Var project_column(ad::Var slice, ad::Var upper, ad::Var lower, std::size_t M, PoolMode mode);

// vol [D, H, W], curves [D, K, W] -> PM [D, W]; no normalization.
Tensor project_volume(const Tensor& vol, const Tensor& curves, Band band, std::size_t M, PoolMode mode);

// Reference projection over whole pixel rows [upper_px[w], lower_px[w]].
Tensor64 oracle_project(const Tensor& slice, const std::vector<int>& upper_px, const std::vector<int>& lower_px,
                        PoolMode mode);

inline constexpr double kDefaultGapScale = 0.25;

// raw [K, W] (unconstrained) -> ordered curves [K, W] in [-1, 1]:
//   c_0 = tanh(raw_0)
//   c_k = c_{k-1} + h tanh(s softplus(raw_k) / h),  h = 1 - c_{k-1}
// so each gap starts out as s * softplus(raw_k) and the headroom to +1 is
// never exceeded.
ad::Var monotone_reparam(ad::Var raw, double gap_scale = kDefaultGapScale);

// Fraction of columns (over all leading indices) where some curve k lies
// strictly below curve k + 1 in normalized coordinates, i.e. c_k > c_{k+1}.
// curves: [K, W] or [D, K, W].
double crossing_fraction(const Tensor& curves);

}  // namespace octproj::dpm
