#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "octproj/tensor.hpp"

// Synthetic retina: three smooth layer surfaces (ILM, OPL, BM), a bright
// inner band, a darker outer band, vessel tubes in the inner band that cast
// shadows into the outer band, and a paired OCTA volume with bright vessels.
namespace octproj::phantom {

namespace fs = std::filesystem;

struct PhantomSpec {
  std::size_t D = 32, H = 128, W = 128;
  std::uint64_t seed = 0;
  std::string subject_id = "phantom_000";

  // Surfaces: base row fractions of (H - 1), rounded to whole rows, plus a
  // cosine series shared by all layers and a smaller per-layer series.
  std::array<double, 3> base_rows{0.28, 0.5, 0.72};
  std::size_t harmonics = 3;
  double amplitude = 0.08;       // bound on the shared term, normalized units
  double layer_amplitude = 0.02;  // bound on each per-layer term
  double min_gap_px = 12.0;

  std::size_t vessels = 6;
  double radius_min = 1.5, radius_max = 3.5;
  double contrast_min = 0.3, contrast_max = 0.6;

  // Relative en-face reflectivity variation, drawn independently for the
  // inner and outer bands.
  double texture = 0.3;

  double noise = 0.02;
  double inner = 0.55, outer = 0.25, background = 0.05;

  // Stress options.
  bool lesion = false;
  double lowq_noise_factor = 1.0;  // noise multiplier in the lower-right en-face quadrant

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);
};

struct Vessel {
  std::vector<std::array<double, 3>> centerline;  // (slice, row, column) in pixels
  double radius = 0.0;
  double contrast = 0.0;
};

struct PhantomTruth {
  Tensor curves;  // [D, 3, W], normalized rows
  std::vector<Vessel> vessels;
  Tensor gt_pm_b2, gt_pm_b3;          // [D, W], min-max normalized
  Tensor gt_raw_b2, gt_raw_b3;        // before normalization
  Tensor octa_pm_b2, octa_pm_b3;      // OCTA projections, normalized
  Tensor octa_raw_b2, octa_raw_b3;
};

struct Phantom {
  PhantomSpec spec;
  Tensor oct;   // [D, H, W], on the 16-bit lattice
  Tensor octa;
  PhantomTruth truth;
};

// ContractError when the surfaces cannot keep min_gap_px or leave the image.
Phantom generate(const PhantomSpec& spec);

// Mean of the column-wise linear interpolant of vol between two row
// positions, by trapezoidal rule with `samples` points. vol [D, H, W],
// upper/lower [D, W] in pixel rows.
Tensor band_average(const Tensor& vol, const Tensor64& upper_px, const Tensor64& lower_px, std::size_t samples = 256);

enum class StressKind { lesion, steep, lowq };
std::string to_string(StressKind k);

// Variants of `spec`: lesion blurs the OPL locally, steep multiplies surface
// amplitudes by 4, lowq multiplies noise by 5 in the lower-right quadrant.
PhantomSpec stress_spec(const PhantomSpec& spec, StressKind kind);
std::vector<Phantom> stress_cases(const PhantomSpec& spec);

struct Split {
  std::vector<std::string> train, val, test;
};

// val = test = max(1, floor(0.2 n)), remainder to train; assignment shuffled by seed.
Split split_subjects(const std::vector<std::string>& ids, std::uint64_t seed);

// Writes {train,val,test}/<id>/ with oct/, octa/, truth_curves.tsr and the
// gt PMs (PGM + TSR), plus dataset.json at the root. Needs n >= 3.
Split export_dataset(const fs::path& out_dir, std::size_t n_subjects, const PhantomSpec& base, bool stress = false);

// Writes one subject directory; the directory name is the subject id.
void save_subject(const fs::path& dir, const Phantom& p);

}  // namespace octproj::phantom
