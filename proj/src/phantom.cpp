#include "octproj/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "octproj/dpm.hpp"
#include "octproj/io.hpp"
#include "octproj/objective.hpp"
#include "octproj/rng.hpp"

namespace octproj::phantom {

using nlohmann::json;

void PhantomSpec::validate() const {
  if (D < 1 || H < 16 || W < 2) throw ContractError("phantom needs D >= 1, H >= 16, W >= 2");
  if (!(amplitude >= 0 && layer_amplitude >= 0)) throw ContractError("surface amplitudes must be >= 0");
  if (!(radius_min > 0 && radius_min <= radius_max)) throw ContractError("invalid vessel radius range");
  if (!(contrast_min >= 0 && contrast_min <= contrast_max && contrast_max <= 1)) {
    throw ContractError("vessel contrast must lie in [0, 1]");
  }
  if (!(noise >= 0 && lowq_noise_factor >= 0)) throw ContractError("noise must be >= 0");
  if (!(texture >= 0 && texture < 1)) throw ContractError("texture must lie in [0, 1)");
  for (double v : {inner, outer, background}) {
    if (!(v >= 0 && v <= 1)) throw ContractError("base intensities must lie in [0, 1]");
  }
  if (!(base_rows[0] < base_rows[1] && base_rows[1] < base_rows[2])) throw ContractError("base rows must increase");
}

json PhantomSpec::to_json() const {
  return {{"D", D},
          {"H", H},
          {"W", W},
          {"seed", seed},
          {"subject_id", subject_id},
          {"base_rows", base_rows},
          {"harmonics", harmonics},
          {"amplitude", amplitude},
          {"layer_amplitude", layer_amplitude},
          {"texture", texture},
          {"min_gap_px", min_gap_px},
          {"vessels", vessels},
          {"radius", {radius_min, radius_max}},
          {"contrast", {contrast_min, contrast_max}},
          {"noise", noise},
          {"intensities", {{"inner", inner}, {"outer", outer}, {"background", background}}},
          {"lesion", lesion},
          {"lowq_noise_factor", lowq_noise_factor}};
}

PhantomSpec PhantomSpec::from_json(const json& j) {
  PhantomSpec s;
  s.D = j.value("D", s.D);
  s.H = j.value("H", s.H);
  s.W = j.value("W", s.W);
  s.seed = j.value("seed", s.seed);
  s.subject_id = j.value("subject_id", s.subject_id);
  s.base_rows = j.value("base_rows", s.base_rows);
  s.harmonics = j.value("harmonics", s.harmonics);
  s.amplitude = j.value("amplitude", s.amplitude);
  s.layer_amplitude = j.value("layer_amplitude", s.layer_amplitude);
  s.texture = j.value("texture", s.texture);
  s.min_gap_px = j.value("min_gap_px", s.min_gap_px);
  s.vessels = j.value("vessels", s.vessels);
  if (j.contains("radius")) {
    s.radius_min = j["radius"].at(0);
    s.radius_max = j["radius"].at(1);
  }
  if (j.contains("contrast")) {
    s.contrast_min = j["contrast"].at(0);
    s.contrast_max = j["contrast"].at(1);
  }
  s.noise = j.value("noise", s.noise);
  if (j.contains("intensities")) {
    const json& i = j["intensities"];
    s.inner = i.value("inner", s.inner);
    s.outer = i.value("outer", s.outer);
    s.background = i.value("background", s.background);
  }
  s.lesion = j.value("lesion", s.lesion);
  s.lowq_noise_factor = j.value("lowq_noise_factor", s.lowq_noise_factor);
  s.validate();
  return s;
}

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::size_t kTextureOrder = 5;

// Random 2-D cosine series over (slice, column) with sum |coef| == bound.
class CosineSurface {
 public:
  CosineSurface(Rng rng, std::size_t order, double bound, std::size_t D, std::size_t W) : D_(D), W_(W) {
    double total = 0.0;
    for (std::size_t i = 0; i <= order; ++i) {
      for (std::size_t j = 0; j <= order; ++j) {
        if (i == 0 && j == 0) continue;
        Term t{double(i), double(j), std::abs(rng.normal()) / std::pow(1.0 + double(i + j), 2.0),
               rng.uniform(0.0, 2 * kPi), rng.uniform(0.0, 2 * kPi)};
        total += t.coef;
        terms_.push_back(t);
      }
    }
    for (auto& t : terms_) t.coef = total > 0 ? t.coef * bound / total : 0.0;
  }

  double operator()(double d, double w) const {
    const double u = W_ > 1 ? w / double(W_ - 1) : 0.0;
    const double v = D_ > 1 ? d / double(D_ - 1) : 0.0;
    double s = 0.0;
    for (const auto& t : terms_) s += t.coef * std::cos(kPi * t.fu * u + t.pu) * std::cos(kPi * t.fv * v + t.pv);
    return s;
  }

 private:
  struct Term {
    double fu, fv, coef, pu, pv;
  };
  std::size_t D_, W_;
  std::vector<Term> terms_;
};

struct Surfaces {
  std::array<std::size_t, 3> base;
  CosineSurface shared;
  std::vector<CosineSurface> layer;
  double half;  // (H - 1) / 2

  double row(std::size_t k, double d, double w) const {
    return double(base[k]) + half * (shared(d, w) + layer[k](d, w));
  }
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Overlap of [a, b] with [lo, hi].
double overlap(double a, double b, double lo, double hi) { return std::max(0.0, std::min(b, hi) - std::max(a, lo)); }

double segment_distance(double py, double px, const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dy = b[0] - a[0], dx = b[2] - a[2];
  const double len2 = dy * dy + dx * dx;
  double t = len2 > 0 ? ((py - a[0]) * dy + (px - a[2]) * dx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ey = a[0] + t * dy - py, ex = a[2] + t * dx - px;
  return std::sqrt(ey * ey + ex * ex);
}

}  // namespace

Tensor band_average(const Tensor& vol, const Tensor64& upper_px, const Tensor64& lower_px, std::size_t samples) {
  if (vol.ndim() != 3) throw ShapeError("band_average expects [D, H, W]");
  const std::size_t D = vol.dim(0), H = vol.dim(1), W = vol.dim(2);
  if (upper_px.dims() != Shape{D, W} || lower_px.dims() != Shape{D, W}) throw ShapeError("band_average: curve dims");
  if (samples < 2) throw ContractError("band_average needs >= 2 samples");
  Tensor out({D, W});
  std::vector<double> f(samples);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t w = 0; w < W; ++w) {
      const double a = upper_px.at(d, w), b = lower_px.at(d, w);
      for (std::size_t j = 0; j < samples; ++j) {
        const double y = std::clamp(a + (b - a) * double(j) / double(samples - 1), 0.0, double(H - 1));
        const std::size_t r0 = std::min(std::size_t(y), H - 2);
        const double fr = y - double(r0);
        f[j] = (1 - fr) * vol[(d * H + r0) * W + w] + fr * vol[(d * H + r0 + 1) * W + w];
      }
      double acc = 0.0;
      for (std::size_t j = 0; j + 1 < samples; ++j) acc += 0.5 * (f[j] + f[j + 1]);
      out.at(d, w) = float(acc / double(samples - 1));
    }
  }
  return out;
}

Phantom generate(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t D = spec.D, H = spec.H, W = spec.W;
  const Rng root(spec.seed, spec.subject_id);

  Surfaces surf{{}, CosineSurface(root.split("surface/shared"), spec.harmonics, spec.amplitude, D, W), {},
                0.5 * double(H - 1)};
  for (std::size_t k = 0; k < 3; ++k) {
    surf.base[k] = std::size_t(std::lround(spec.base_rows[k] * double(H - 1)));
    surf.layer.emplace_back(root.split("surface/layer" + std::to_string(k)), spec.harmonics, spec.layer_amplitude, D, W);
  }

  Phantom ph;
  ph.spec = spec;
  PhantomTruth& truth = ph.truth;
  truth.curves = Tensor({D, 3, W});
  // Rows are taken back from the stored normalized curves so every consumer
  // sees the same band edges.
  Tensor64 rows[3] = {Tensor64({D, W}), Tensor64({D, W}), Tensor64({D, W})};
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t w = 0; w < W; ++w) {
      for (std::size_t k = 0; k < 3; ++k) {
        const float c = float(dpm::to_normalized(surf.row(k, double(d), double(w)), H));
        truth.curves.at(d, k, w) = c;
        rows[k].at(d, w) = dpm::to_pixel(c, H);
      }
      const double r0 = rows[0].at(d, w), r1 = rows[1].at(d, w), r2 = rows[2].at(d, w);
      if (r0 < 1.0 || r2 > double(H) - 2.0 || r1 - r0 < spec.min_gap_px || r2 - r1 < spec.min_gap_px) {
        char msg[200];
        std::snprintf(msg, sizeof msg,
                      "phantom surfaces infeasible at slice %zu column %zu: rows %.2f/%.2f/%.2f, min gap %.1f, H %zu", d,
                      w, r0, r1, r2, spec.min_gap_px, H);
        throw ContractError(msg);
      }
    }
  }

  // Vessels: smooth en-face paths at a fixed fraction of the inner band depth.
  struct VesselField {
    std::vector<double> dist;   // en-face distance to the centerline, [D * W]
    std::vector<double> depth;  // centre row, [D * W]
    double radius, contrast;
  };
  std::vector<VesselField> fields;
  for (std::size_t v = 0; v < spec.vessels; ++v) {
    Rng rng = root.split("vessel" + std::to_string(v));
    Vessel vessel;
    vessel.radius = rng.uniform(spec.radius_min, spec.radius_max);
    vessel.contrast = rng.uniform(spec.contrast_min, spec.contrast_max);
    const double frac = rng.uniform(0.3, 0.7);
    const double Dm = double(D - 1), Wm = double(W - 1);
    std::array<double, 2> p0, p1;
    if (v % 3 != 2) {  // across the width
      p0 = {rng.uniform(0.0, Dm), 0.0};
      p1 = {rng.uniform(0.0, Dm), Wm};
    } else {  // across the slices
      p0 = {0.0, rng.uniform(0.1 * Wm, 0.9 * Wm)};
      p1 = {Dm, rng.uniform(0.1 * Wm, 0.9 * Wm)};
    }
    const double len = std::hypot(p1[0] - p0[0], p1[1] - p0[1]);
    const double wiggle = rng.uniform(-0.12, 0.12) * len;
    const double waves = double(1 + rng.below(3));
    const double phase = rng.uniform(0.0, kPi);
    const double ny = len > 0 ? -(p1[1] - p0[1]) / len : 0.0, nx = len > 0 ? (p1[0] - p0[0]) / len : 0.0;
    const std::size_t n_pts = 96;
    for (std::size_t i = 0; i < n_pts; ++i) {
      const double t = double(i) / double(n_pts - 1);
      const double off = wiggle * std::sin(kPi * waves * t + phase) * std::sin(kPi * t);
      const double d = p0[0] + t * (p1[0] - p0[0]) + off * ny;
      const double w = p0[1] + t * (p1[1] - p0[1]) + off * nx;
      const double top = surf.row(0, d, w), mid = surf.row(1, d, w);
      vessel.centerline.push_back({d, top + frac * (mid - top), w});
    }
    VesselField f{std::vector<double>(D * W), std::vector<double>(D * W), vessel.radius, vessel.contrast};
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t w = 0; w < W; ++w) {
        double best = 1e300;
        for (std::size_t i = 0; i + 1 < n_pts; ++i) {
          best = std::min(best, segment_distance(double(d), double(w), vessel.centerline[i], vessel.centerline[i + 1]));
        }
        f.dist[d * W + w] = best;
        const double top = rows[0].at(d, w), mid = rows[1].at(d, w);
        f.depth[d * W + w] = top + frac * (mid - top);
      }
    }
    truth.vessels.push_back(std::move(vessel));
    fields.push_back(std::move(f));
  }

  // Optional lesion: local blur of the OPL transition.
  double lesion_d = 0, lesion_w = 0;
  const double lesion_sigma = 0.06 * double(W), lesion_depth = 3.0;
  if (spec.lesion) {
    Rng rng = root.split("lesion");
    lesion_d = rng.uniform(0.3, 0.7) * double(D - 1);
    lesion_w = rng.uniform(0.3, 0.7) * double(W - 1);
  }

  // Independent en-face reflectivity of the two bands.
  const CosineSurface tex_inner(root.split("texture/inner"), kTextureOrder, spec.texture, D, W);
  const CosineSurface tex_outer(root.split("texture/outer"), kTextureOrder, spec.texture, D, W);

  Rng noise_rng = root.split("noise/oct");
  Rng octa_rng = root.split("noise/octa");
  std::vector<float> oct(D * H * W), octa(D * H * W);
  constexpr double kEdge = 0.5;  // soft edge width of vessel tubes, pixels
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t w = 0; w < W; ++w) {
      const double r0 = rows[0].at(d, w), r1 = rows[1].at(d, w), r2 = rows[2].at(d, w);
      const std::size_t at = d * W + w;
      double shadow = 0.0;
      for (const auto& f : fields) shadow = std::max(shadow, f.contrast * sigmoid((f.radius - f.dist[at]) / kEdge));
      const bool lowq = d >= D / 2 && w >= W / 2;
      const double sigma = spec.noise * (lowq ? spec.lowq_noise_factor : 1.0);
      const double inner = spec.inner * (1.0 + tex_inner(double(d), double(w)));
      const double outer = spec.outer * (1.0 + tex_outer(double(d), double(w)));
      double lesion_weight = 0.0;
      if (spec.lesion) {
        const double dd = double(d) - lesion_d, dw = double(w) - lesion_w;
        lesion_weight = 0.9 * std::exp(-(dd * dd + dw * dw) / (2 * lesion_sigma * lesion_sigma));
      }
      for (std::size_t r = 0; r < H; ++r) {
        const double y = double(r);
        const double f_in = overlap(y - 0.5, y + 0.5, r0, r1);
        const double f_out = overlap(y - 0.5, y + 0.5, r1, r2);
        double dark = 0.0, flow = 0.0;
        for (const auto& f : fields) {
          const double dz = y - f.depth[at];
          const double p = sigmoid((f.radius - std::sqrt(f.dist[at] * f.dist[at] + dz * dz)) / kEdge);
          dark = std::max(dark, f.contrast * p);
          flow = std::max(flow, (0.4 + f.contrast) * p);
        }
        double v = spec.background * (1.0 - f_in - f_out) + inner * f_in * (1.0 - dark) + outer * f_out * (1.0 - shadow);
        if (lesion_weight > 0) {
          const double dz = y - r1;
          const double mix = lesion_weight * std::exp(-dz * dz / (2 * lesion_depth * lesion_depth));
          v += mix * (0.5 * (spec.inner + spec.outer) - v);
        }
        const std::size_t idx = (d * H + r) * W + w;
        oct[idx] = float(std::clamp(v + (sigma > 0 ? noise_rng.normal(0.0, sigma) : 0.0), 0.0, 1.0));
        octa[idx] = float(std::clamp(0.03 + flow + (sigma > 0 ? octa_rng.normal(0.0, sigma) : 0.0), 0.0, 1.0));
      }
    }
  }
  ph.oct = io::quantize(Tensor({D, H, W}, std::move(oct)), 65535);
  ph.octa = io::quantize(Tensor({D, H, W}, std::move(octa)), 65535);

  truth.gt_raw_b2 = band_average(ph.oct, rows[0], rows[1]);
  truth.gt_raw_b3 = band_average(ph.oct, rows[1], rows[2]);
  truth.octa_raw_b2 = band_average(ph.octa, rows[0], rows[1]);
  truth.octa_raw_b3 = band_average(ph.octa, rows[1], rows[2]);
  truth.gt_pm_b2 = obj::minmax_normalize(truth.gt_raw_b2);
  truth.gt_pm_b3 = obj::minmax_normalize(truth.gt_raw_b3);
  truth.octa_pm_b2 = obj::minmax_normalize(truth.octa_raw_b2);
  truth.octa_pm_b3 = obj::minmax_normalize(truth.octa_raw_b3);
  return ph;
}

std::string to_string(StressKind k) {
  switch (k) {
    case StressKind::lesion: return "lesion";
    case StressKind::steep: return "steep";
    case StressKind::lowq: return "lowq";
  }
  return "?";
}

PhantomSpec stress_spec(const PhantomSpec& spec, StressKind kind) {
  PhantomSpec s = spec;
  switch (kind) {
    case StressKind::lesion: s.lesion = true; break;
    case StressKind::steep:
      s.amplitude *= 4.0;
      s.layer_amplitude *= 4.0;
      break;
    case StressKind::lowq: s.lowq_noise_factor = 5.0; break;
  }
  return s;
}

std::vector<Phantom> stress_cases(const PhantomSpec& spec) {
  std::vector<Phantom> out;
  for (StressKind k : {StressKind::lesion, StressKind::steep, StressKind::lowq}) out.push_back(generate(stress_spec(spec, k)));
  return out;
}

Split split_subjects(const std::vector<std::string>& ids, std::uint64_t seed) {
  const std::size_t n = ids.size();
  if (n < 3) throw ContractError("need >= 3 subjects, got " + std::to_string(n));
  const std::size_t held = std::max<std::size_t>(1, n / 5);
  std::vector<std::string> order = ids;
  Rng(seed, "split").shuffle(order);
  Split s;
  s.val.assign(order.begin(), order.begin() + long(held));
  s.test.assign(order.begin() + long(held), order.begin() + long(2 * held));
  s.train.assign(order.begin() + long(2 * held), order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

namespace {

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void save_subject(const fs::path& dir, const Phantom& p) {
  fs::create_directories(dir);
  io::VolumeMeta meta;
  meta.subject_id = dir.filename().string();
  meta.D = p.spec.D;
  meta.H = p.spec.H;
  meta.W = p.spec.W;
  io::save_volume(dir / "oct", meta, p.oct);
  meta.modality = io::Modality::OCTA;
  io::save_volume(dir / "octa", meta, p.octa);
  const PhantomTruth& t = p.truth;
  io::write_tsr(t.curves, dir / "truth_curves.tsr");
  const std::pair<const char*, const Tensor*> pms[] = {{"gt_pm_b2", &t.gt_pm_b2},     {"gt_pm_b3", &t.gt_pm_b3},
                                                       {"octa_pm_b2", &t.octa_pm_b2}, {"octa_pm_b3", &t.octa_pm_b3}};
  for (const auto& [name, tensor] : pms) {
    io::write_tsr(*tensor, dir / (std::string(name) + ".tsr"));
    io::write_pgm(*tensor, dir / (std::string(name) + ".pgm"), 65535);
  }
  io::write_tsr(t.gt_raw_b2, dir / "gt_raw_b2.tsr");
  io::write_tsr(t.gt_raw_b3, dir / "gt_raw_b3.tsr");
  io::write_tsr(t.octa_raw_b2, dir / "octa_raw_b2.tsr");
  io::write_tsr(t.octa_raw_b3, dir / "octa_raw_b3.tsr");
  json vessels = json::array();
  for (const auto& v : t.vessels) {
    vessels.push_back({{"radius", v.radius}, {"contrast", v.contrast}, {"centerline", v.centerline}});
  }
  write_json(dir / "vessels.json", vessels);
  write_json(dir / "spec.json", p.spec.to_json());
}

Split export_dataset(const fs::path& out_dir, std::size_t n_subjects, const PhantomSpec& base, bool stress) {
  if (n_subjects < 3) throw ContractError("need >= 3 subjects, got " + std::to_string(n_subjects));
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n_subjects; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "phantom_%03zu", i);
    ids.emplace_back(buf);
  }
  const Split split = split_subjects(ids, base.seed);
  auto spec_for = [&](const std::string& id) {
    PhantomSpec s = base;
    s.subject_id = id;
    return s;
  };
  const std::pair<const char*, const std::vector<std::string>*> parts[] = {
      {"train", &split.train}, {"val", &split.val}, {"test", &split.test}};
  for (const auto& [name, list] : parts) {
    for (const auto& id : *list) save_subject(out_dir / name / id, generate(spec_for(id)));
  }
  json stress_ids = json::array();
  if (stress) {
    const PhantomSpec s0 = spec_for(split.test.front());
    for (StressKind k : {StressKind::lesion, StressKind::steep, StressKind::lowq}) {
      // Same subject stream as the base volume, so only the stress factor differs.
      const std::string id = s0.subject_id + "_" + to_string(k);
      save_subject(out_dir / "test" / id, generate(stress_spec(s0, k)));
      stress_ids.push_back(id);
    }
  }
  write_json(out_dir / "dataset.json", {{"seed", base.seed},
                                        {"subjects", n_subjects},
                                        {"spec", base.to_json()},
                                        {"splits", {{"train", split.train}, {"val", split.val}, {"test", split.test}}},
                                        {"stress", stress_ids}});
  return split;
}

}  // namespace octproj::phantom
