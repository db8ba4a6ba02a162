#include "octproj/objective.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "octproj/rng.hpp"

namespace octproj::obj {

using ad::Tape;
using ad::Var;

CmmTable::CmmTable(std::vector<std::string> subjects)
    : CmmTable(subjects, [&] {
        Tensor p({std::max<std::size_t>(subjects.size(), 1), kNumBands, 2});
        for (std::size_t i = 1; i < p.size(); i += 2) p[i] = 1.0f;
        return p;
      }()) {}

CmmTable::CmmTable(std::vector<std::string> subjects, Tensor params)
    : subjects_(std::move(subjects)), params_(std::move(params)) {
  if (subjects_.empty()) throw ContractError("CMM table needs at least one subject");
  if (params_.dims() != Shape{subjects_.size(), kNumBands, 2}) {
    throw ShapeError("CMM parameters " + shape_str(params_.dims()) + " do not match " +
                     std::to_string(subjects_.size()) + " subjects");
  }
  for (std::size_t i = 0; i < subjects_.size(); ++i) {
    if (!index_.emplace(subjects_[i], i).second) throw ContractError("duplicate subject id '" + subjects_[i] + "'");
  }
}

std::size_t CmmTable::index(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw LookupError("subject '" + id + "' has no CMM entry");
  return it->second;
}

std::pair<double, double> CmmTable::get(const std::string& id, std::size_t band) const {
  const std::size_t base = (index(id) * kNumBands + band) * 2;
  return {params_[base], params_[base + 1]};
}

void CmmTable::set(const std::string& id, std::size_t band, double lo, double hi) {
  const std::size_t base = (index(id) * kNumBands + band) * 2;
  params_[base] = float(lo);
  params_[base + 1] = float(hi);
}

Tensor CmmTable::block(const std::string& id) const { return params_.sub(index(id)); }

void CmmTable::set_block(const std::string& id, const Tensor& block) {
  if (block.dims() != Shape{kNumBands, 2}) throw ShapeError("CMM block must be [2, 2]");
  const std::size_t base = index(id) * kNumBands * 2;
  for (std::size_t i = 0; i < block.size(); ++i) params_[base + i] = block[i];
}

Var cmm_apply(Var pred, Var lo, Var hi) {
  if (lo.size() != 1 || hi.size() != 1) throw ShapeError("CMM bounds must be single values");
  const Var span = ad::clamp(ad::sub(hi, lo), kCmmEps, std::numeric_limits<double>::max());
  return ad::div(ad::sub(pred, lo), span);
}

Var l1_loss(Var a, const Tensor64& b) {
  if (a.dims() != b.dims()) throw ShapeError("l1_loss: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  return ad::mean(ad::abs(ad::sub(a, a.tape().constant(b))));
}

FeatureExtractor::FeatureExtractor(FeatureSpec spec) : spec_(spec) {
  if (spec_.scales == 0 || spec_.channels == 0) throw ContractError("feature extractor needs >= 1 scale and channel");
  const Rng base(spec_.seed, "feature-bank");
  for (std::size_t s = 0; s < spec_.scales; ++s) {
    Rng rng = base.split("scale" + std::to_string(s));
    std::vector<double> k(spec_.channels * 9);
    for (std::size_t c = 0; c < spec_.channels; ++c) {
      double* w = &k[c * 9];
      double mean = 0.0;
      for (int i = 0; i < 9; ++i) mean += (w[i] = rng.normal());
      mean /= 9.0;
      double norm = 0.0;
      for (int i = 0; i < 9; ++i) {
        if (spec_.zero_mean) w[i] -= mean;
        norm += w[i] * w[i];
      }
      norm = std::sqrt(norm);
      for (int i = 0; i < 9; ++i) w[i] /= norm;
    }
    kernels_.emplace_back(Shape{spec_.channels, 1, 3, 3}, std::move(k));
  }
}

std::uint64_t FeatureExtractor::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  for (const Tensor64& k : kernels_) {
    for (double v : k.vec()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 8; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

std::vector<Var> FeatureExtractor::features(Var x) const {
  if (x.dims().size() != 2) throw ShapeError("feature extractor expects a 2-D map, got " + shape_str(x.dims()));
  Tape& tape = x.tape();
  std::vector<Var> out;
  Var cur = ad::reshape(x, {1, x.dims()[0], x.dims()[1]});
  for (std::size_t s = 0; s < spec_.scales; ++s) {
    if (s > 0) cur = ad::area_downsample(cur, 2, 2);
    const Var k = tape.constant(kernels_[s]);
    out.push_back(ad::abs(ad::conv2d(ad::pad_replicate(cur, 1, 1), k)));
  }
  return out;
}

Var feature_loss(Var a, const Tensor64& b, const FeatureExtractor& fx) {
  if (a.dims() != b.dims()) throw ShapeError("feature_loss: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  Tape& tape = a.tape();
  const std::vector<Var> fa = fx.features(a);
  const std::vector<Var> fb = fx.features(tape.constant(b));
  Var total;
  for (std::size_t s = 0; s < fa.size(); ++s) {
    const Var term = ad::mean(ad::abs(ad::sub(fa[s], fb[s])));
    total = total.valid() ? ad::add(total, term) : term;
  }
  return total;
}

Var band_loss(Var pred, const Tensor64& gt, const FeatureExtractor& fx) {
  return ad::add(l1_loss(pred, gt), feature_loss(pred, gt, fx));
}

Var combined_loss(Var pred_b2, const Tensor64& gt_b2, Var pred_b3, const Tensor64& gt_b3, double lambda,
                  const FeatureExtractor& fx) {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be >= 0");
  return ad::add(band_loss(pred_b2, gt_b2, fx), ad::scale(band_loss(pred_b3, gt_b3, fx), lambda));
}

double psnr(const Tensor& a, const Tensor& b, double range) {
  if (a.dims() != b.dims()) throw ShapeError("psnr: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / (se / double(a.size())));
}

namespace {

struct SsimTerms {
  double full = 0.0;
  double cs = 0.0;
};

SsimTerms ssim_terms(const Tensor& a, const Tensor& b, const SsimOptions& opt) {
  if (a.dims() != b.dims()) throw ShapeError("ssim: " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
  if (a.ndim() != 2) throw ShapeError("ssim expects 2-D images");
  const std::size_t n = opt.window;
  const std::size_t H = a.dim(0), W = a.dim(1);
  if (H < n || W < n) {
    throw ContractError("ssim needs images of at least " + std::to_string(n) + "x" + std::to_string(n) + ", got " +
                        shape_str(a.dims()));
  }
  std::vector<double> g(n);
  double gs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = double(i) - double(n - 1) / 2.0;
    gs += g[i] = std::exp(-x * x / (2.0 * opt.sigma * opt.sigma));
  }
  for (double& v : g) v /= gs;

  const double c1 = std::pow(opt.k1 * opt.range, 2), c2 = std::pow(opt.k2 * opt.range, 2);
  const std::size_t Ho = H - n + 1, Wo = W - n + 1;

  // Separable filtering: columns first (valid), then rows.
  auto filter = [&](auto&& pix) {
    std::vector<double> tmp(H * Wo), out(Ho * Wo);
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += g[k] * pix(y, x + k);
        tmp[y * Wo + x] = s;
      }
    }
    for (std::size_t y = 0; y < Ho; ++y) {
      for (std::size_t x = 0; x < Wo; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += g[k] * tmp[(y + k) * Wo + x];
        out[y * Wo + x] = s;
      }
    }
    return out;
  };
  auto A = [&](std::size_t y, std::size_t x) { return double(a[y * W + x]); };
  auto B = [&](std::size_t y, std::size_t x) { return double(b[y * W + x]); };
  const auto mu_a = filter(A), mu_b = filter(B);
  const auto aa = filter([&](std::size_t y, std::size_t x) { return A(y, x) * A(y, x); });
  const auto bb = filter([&](std::size_t y, std::size_t x) { return B(y, x) * B(y, x); });
  const auto ab = filter([&](std::size_t y, std::size_t x) { return A(y, x) * B(y, x); });

  SsimTerms t;
  for (std::size_t i = 0; i < Ho * Wo; ++i) {
    const double va = aa[i] - mu_a[i] * mu_a[i];
    const double vb = bb[i] - mu_b[i] * mu_b[i];
    const double cov = ab[i] - mu_a[i] * mu_b[i];
    const double lum = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    t.full += lum * cs;
    t.cs += cs;
  }
  t.full /= double(Ho * Wo);
  t.cs /= double(Ho * Wo);
  return t;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt) { return ssim_terms(a, b, opt).full; }

double ssim_contrast_structure(const Tensor& a, const Tensor& b, const SsimOptions& opt) {
  return ssim_terms(a, b, opt).cs;
}

Tensor minmax_normalize(const Tensor& t, double eps) {
  const auto [lo_it, hi_it] = std::minmax_element(t.vec().begin(), t.vec().end());
  const double lo = *lo_it, span = double(*hi_it) - lo;
  Tensor out(t.dims(), 0.0f);
  if (span < eps) return out;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = float((double(t[i]) - lo) / span);
  return out;
}

}  // namespace octproj::obj
