#include "octproj/dpm.hpp"

#include <algorithm>
#include <cmath>

namespace octproj::dpm {

using ad::Tape;
using ad::Var;

PoolMode pool_mode_from_string(const std::string& s) {
  if (s == "mean") return PoolMode::mean;
  if (s == "max") return PoolMode::max;
  throw ContractError("pool mode must be 'mean' or 'max', got '" + s + "'");
}

std::string to_string(PoolMode m) { return m == PoolMode::mean ? "mean" : "max"; }

Band band_from_string(const std::string& s) {
  if (s == "b2" || s == "B2") return kBandB2;
  if (s == "b3" || s == "B3") return kBandB3;
  throw ContractError("band must be 'b2' or 'b3', got '" + s + "'");
}

double column_abscissa(std::size_t w, std::size_t W) {
  if (W <= 1) return 0.0;
  return -1.0 + 2.0 * double(w) / double(W - 1);
}

double to_pixel(double normalized, std::size_t extent) { return (normalized + 1.0) * 0.5 * double(extent - 1); }

double to_normalized(double pixel, std::size_t extent) {
  if (extent <= 1) return 0.0;
  return 2.0 * pixel / double(extent - 1) - 1.0;
}

Var build_sampling_grid(Var upper, Var lower, std::size_t M) {
  if (M < 2) throw ContractError("sampling grid needs M >= 2, got " + std::to_string(M));
  if (upper.dims().size() != 1 || upper.dims() != lower.dims()) {
    throw ShapeError("build_sampling_grid: upper " + shape_str(upper.dims()) + " and lower " +
                     shape_str(lower.dims()) + " must be equal 1-D");
  }
  Tape& tape = upper.tape();
  const std::size_t W = upper.size();
  const Tensor64& up = upper.value();
  const Tensor64& lo = lower.value();
  std::vector<double> g(M * W * 2);
  for (std::size_t j = 0; j < M; ++j) {
    const double t = double(j) / double(M - 1);
    for (std::size_t w = 0; w < W; ++w) {
      double* p = &g[(j * W + w) * 2];
      p[0] = column_abscissa(w, W);
      // Endpoints are taken verbatim so rows 0 and M-1 equal the curves exactly.
      p[1] = j == 0 ? up[w] : (j == M - 1 ? lo[w] : up[w] + t * (lo[w] - up[w]));
    }
  }
  return tape.record(Tensor64({M, W, 2}, std::move(g)), {upper, lower},
                     [M, W](const Tensor64& grad, std::span<Tensor64* const> pg) {
                       for (std::size_t j = 0; j < M; ++j) {
                         const double t = double(j) / double(M - 1);
                         for (std::size_t w = 0; w < W; ++w) {
                           const double gy = grad[(j * W + w) * 2 + 1];
                           if (pg[0]) (*pg[0])[w] += (1.0 - t) * gy;
                           if (pg[1]) (*pg[1])[w] += t * gy;
                         }
                       }
                     });
}

namespace {

struct Axis1 {
  std::size_t i0, i1;
  double frac;
  bool inside;  // false when the coordinate was clamped to the border
};

// Continuous pixel coordinate -> two taps. Coordinates within 1e-9 of a
// lattice point snap onto it so on-lattice samples use a single column/row.
Axis1 locate(double pos, std::size_t extent) {
  const double hi = double(extent - 1);
  Axis1 a{0, 0, 0.0, pos >= 0.0 && pos <= hi};
  pos = std::clamp(pos, 0.0, hi);
  const double r = std::round(pos);
  if (std::abs(pos - r) < 1e-9) pos = r;
  if (extent == 1) return a;
  auto i0 = static_cast<std::size_t>(std::floor(pos));
  if (i0 >= extent - 1) i0 = extent - 2;
  a.i0 = i0;
  a.i1 = i0 + 1;
  a.frac = pos - double(i0);
  return a;
}

}  // namespace

Var bilinear_sample(Var img, Var grid) {
  const Tensor64& im = img.value();
  const Tensor64& gr = grid.value();
  if (im.ndim() != 2) throw ShapeError("bilinear_sample image must be [H, W], got " + shape_str(im.dims()));
  if (gr.ndim() != 3 || gr.dim(2) != 2) throw ShapeError("bilinear_sample grid must be [M, W, 2], got " + shape_str(gr.dims()));
  if (&img.tape() != &grid.tape()) throw ContractError("image and grid live on different tapes");
  Tape& tape = img.tape();
  const std::size_t H = im.dim(0), Wi = im.dim(1);
  const std::size_t M = gr.dim(0), W = gr.dim(1);

  struct Sample {
    Axis1 u, v;
  };
  std::vector<Sample> samples(M * W);
  std::vector<double> out(M * W);
  for (std::size_t k = 0; k < M * W; ++k) {
    const double u = (gr[2 * k] + 1.0) * 0.5 * double(Wi - 1);
    const double v = (gr[2 * k + 1] + 1.0) * 0.5 * double(H - 1);
    Sample s{locate(u, Wi), locate(v, H)};
    const double a = im[s.v.i0 * Wi + s.u.i0], b = im[s.v.i0 * Wi + s.u.i1];
    const double c = im[s.v.i1 * Wi + s.u.i0], d = im[s.v.i1 * Wi + s.u.i1];
    const double fu = s.u.frac, fv = s.v.frac;
    out[k] = (1 - fv) * ((1 - fu) * a + fu * b) + fv * ((1 - fu) * c + fu * d);
    samples[k] = s;
  }

  return tape.record(
      Tensor64({M, W}, std::move(out)), {img, grid},
      [&tape, img_id = img.id(), samples = std::move(samples), H, Wi](const Tensor64& g,
                                                                       std::span<Tensor64* const> pg) {
        const Tensor64& im = tape.value(img_id);
        const double du_dx = 0.5 * double(Wi - 1), dv_dy = 0.5 * double(H - 1);
        for (std::size_t k = 0; k < samples.size(); ++k) {
          const Sample& s = samples[k];
          const double fu = s.u.frac, fv = s.v.frac, gk = g[k];
          const std::size_t ia = s.v.i0 * Wi + s.u.i0, ib = s.v.i0 * Wi + s.u.i1;
          const std::size_t ic = s.v.i1 * Wi + s.u.i0, id = s.v.i1 * Wi + s.u.i1;
          if (pg[0]) {
            Tensor64& gi = *pg[0];
            gi[ia] += gk * (1 - fv) * (1 - fu);
            gi[ib] += gk * (1 - fv) * fu;
            gi[ic] += gk * fv * (1 - fu);
            gi[id] += gk * fv * fu;
          }
          if (pg[1]) {
            const double a = im[ia], b = im[ib], c = im[ic], d = im[id];
            if (s.u.inside) (*pg[1])[2 * k] += gk * du_dx * ((1 - fv) * (b - a) + fv * (d - c));
            if (s.v.inside) (*pg[1])[2 * k + 1] += gk * dv_dy * ((1 - fu) * (c - a) + fu * (d - b));
          }
        }
      });
}

Var project_column(Var slice, Var upper, Var lower, std::size_t M, PoolMode mode) {
  if (slice.dims().size() != 2) throw ShapeError("project_column slice must be [H, W], got " + shape_str(slice.dims()));
  if (upper.size() != slice.dims()[1]) {
    throw ShapeError("project_column: curves have " + std::to_string(upper.size()) + " columns, slice has " +
                     std::to_string(slice.dims()[1]));
  }
  Var samples = bilinear_sample(slice, build_sampling_grid(upper, lower, M));
  return mode == PoolMode::mean ? ad::pool_mean_axis(samples, 0) : ad::pool_max_axis(samples, 0);
}

Tensor project_volume(const Tensor& vol, const Tensor& curves, Band band, std::size_t M, PoolMode mode) {
  if (vol.ndim() != 3) throw ShapeError("project_volume expects [D, H, W], got " + shape_str(vol.dims()));
  if (curves.ndim() != 3) throw ShapeError("curves must be [D, K, W], got " + shape_str(curves.dims()));
  const std::size_t D = vol.dim(0), W = vol.dim(2), K = curves.dim(1);
  if (curves.dim(0) != D || curves.dim(2) != W) {
    throw ShapeError("curves " + shape_str(curves.dims()) + " do not match volume " + shape_str(vol.dims()));
  }
  if (!(band.upper < band.lower && band.lower < K)) throw ContractError("invalid band indices for K=" + std::to_string(K));

  std::vector<float> pm(D * W);
  for (std::size_t d = 0; d < D; ++d) {
    Tape tape(ad::Precision::f64);
    Var slice = tape.constant(to_f64(vol.sub(d)));
    const Tensor64 c = to_f64(curves.sub(d));
    Var up = tape.constant(c.sub(band.upper));
    Var lo = tape.constant(c.sub(band.lower));
    const Tensor64 line = project_column(slice, up, lo, M, mode).value();
    for (std::size_t w = 0; w < W; ++w) pm[d * W + w] = static_cast<float>(line[w]);
  }
  return Tensor({D, W}, std::move(pm));
}

Tensor64 oracle_project(const Tensor& slice, const std::vector<int>& upper_px, const std::vector<int>& lower_px,
                        PoolMode mode) {
  if (slice.ndim() != 2) throw ShapeError("oracle_project slice must be [H, W]");
  const std::size_t H = slice.dim(0), W = slice.dim(1);
  if (upper_px.size() != W || lower_px.size() != W) throw ShapeError("oracle_project: curve length != W");
  std::vector<double> out(W);
  for (std::size_t w = 0; w < W; ++w) {
    const int a = upper_px[w], b = lower_px[w];
    if (a < 0 || a > b || b > int(H) - 1) {
      throw ContractError("oracle_project needs 0 <= upper <= lower <= H-1 at column " + std::to_string(w));
    }
    double acc = mode == PoolMode::mean ? 0.0 : -INFINITY;
    for (int r = a; r <= b; ++r) {
      const double v = slice.at(std::size_t(r), w);
      acc = mode == PoolMode::mean ? acc + v : std::max(acc, v);
    }
    out[w] = mode == PoolMode::mean ? acc / double(b - a + 1) : acc;
  }
  return Tensor64({W}, std::move(out));
}

Var monotone_reparam(Var raw, double gap_scale) {
  if (raw.dims().size() != 2) throw ShapeError("monotone_reparam expects [K, W], got " + shape_str(raw.dims()));
  const std::size_t K = raw.dims()[0];
  std::vector<Var> layers;
  layers.push_back(ad::tanh(ad::select(raw, 0)));
  for (std::size_t k = 1; k < K; ++k) {
    const Var prev = layers.back();
    const Var gap = ad::scale(ad::softplus(ad::select(raw, k)), gap_scale);
    const Var headroom = ad::add_scalar(ad::neg(prev), 1.0);
    const Var safe = ad::clamp(headroom, 1e-12, 3.0);
    layers.push_back(ad::add(prev, ad::mul(headroom, ad::tanh(ad::div(gap, safe)))));
  }
  return ad::stack(layers);
}

double crossing_fraction(const Tensor& curves) {
  if (curves.ndim() != 2 && curves.ndim() != 3) throw ShapeError("crossing_fraction expects [K, W] or [D, K, W]");
  const std::size_t D = curves.ndim() == 3 ? curves.dim(0) : 1;
  const std::size_t K = curves.dim(curves.ndim() - 2), W = curves.dim(curves.ndim() - 1);
  std::size_t crossed = 0;
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t w = 0; w < W; ++w) {
      for (std::size_t k = 0; k + 1 < K; ++k) {
        if (curves[(d * K + k) * W + w] > curves[(d * K + k + 1) * W + w]) {
          ++crossed;
          break;
        }
      }
    }
  }
  return double(crossed) / double(D * W);
}

}  // namespace octproj::dpm
