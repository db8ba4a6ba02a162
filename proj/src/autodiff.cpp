#include "octproj/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace octproj::ad {

// ---------------------------------------------------------------- Var/Tape

const Tensor64& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
  const Tensor64& v = value();
  if (v.size() != 1) throw ShapeError("item() on a node with dims " + shape_str(v.dims()));
  return v[0];
}

void Tape::check_owned(Var v) const {
  if (!v.valid() || &v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("variable does not belong to this tape");
  }
}

void Tape::round_to_storage(Tensor64& t) const {
  if (precision_ != Precision::f32) return;
  for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
}

Var Tape::leaf(Tensor64 value, bool requires_grad) {
  if (done_) throw ContractError("tape already consumed by backward(); build a new tape");
  if (value.empty()) throw ShapeError("leaf value must not be empty");
  round_to_storage(value);
  nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor64 value, std::vector<Var> parents, BackwardFn backward) {
  if (done_) throw ContractError("tape already consumed by backward(); build a new tape");
  Node node;
  node.value = std::move(value);
  round_to_storage(node.value);
  for (const Var& p : parents) {
    check_owned(p);
    node.parents.push_back(p.id());
    node.requires_grad = node.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var root) {
  check_owned(root);
  if (done_) throw ContractError("backward() called twice on the same tape");
  Node& r = nodes_[root.id()];
  if (r.value.size() != 1) throw ContractError("backward() root must be scalar, got " + shape_str(r.value.dims()));
  done_ = true;
  if (!r.requires_grad) return;
  r.grad = Tensor64(r.value.dims(), 1.0);

  std::vector<Tensor64*> parent_grads;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.backward) continue;
    parent_grads.clear();
    for (std::size_t pid : n.parents) {
      Node& p = nodes_[pid];
      if (!p.requires_grad) {
        parent_grads.push_back(nullptr);
        continue;
      }
      if (p.grad.empty()) p.grad = Tensor64(p.value.dims(), 0.0);
      parent_grads.push_back(&p.grad);
    }
    n.backward(n.grad, parent_grads);
    for (Tensor64* g : parent_grads) {
      if (g) round_to_storage(*g);
    }
  }
}

Tensor64 Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor64(n.value.dims(), 0.0);
  return n.grad;
}

// ------------------------------------------------------------------ helpers
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound variable");
  return a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (&tape_of(b) != &t) throw ContractError("operands live on different tapes");
  return t;
}

Tensor64 make(const Shape& dims, std::vector<double> v) { return Tensor64(dims, std::move(v)); }

// Elementwise unary op; dfdx(x, y) gives the local derivative.
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  Tape& t = tape_of(x);
  const Tensor64& xv = x.value();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  Tensor64 out = make(xv.dims(), std::move(y));
  return t.record(std::move(out), {x}, [x, dfdx, &t](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    const Tensor64& xv = t.value(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * dfdx(xv[i]);
  });
}

enum class Bcast { none, a_scalar, b_scalar };

Bcast broadcast_kind(Var a, Var b, const char* op) {
  if (a.dims() == b.dims()) return Bcast::none;
  if (b.size() == 1) return Bcast::b_scalar;
  if (a.size() == 1) return Bcast::a_scalar;
  throw ShapeError(std::string(op) + ": dims " + shape_str(a.dims()) + " and " + shape_str(b.dims()) + " differ");
}

// Binary op with scalar broadcast. df returns (d/da, d/db) at (a, b).
template <class F, class D>
Var binary(Var a, Var b, const char* name, F f, D df) {
  Tape& t = tape_of(a, b);
  const Bcast kind = broadcast_kind(a, b, name);
  const Tensor64& av = a.value();
  const Tensor64& bv = b.value();
  const Shape& dims = kind == Bcast::a_scalar ? bv.dims() : av.dims();
  const std::size_t n = shape_numel(dims);
  auto ai = [kind](std::size_t i) { return kind == Bcast::a_scalar ? 0 : i; };
  auto bi = [kind](std::size_t i) { return kind == Bcast::b_scalar ? 0 : i; };
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = f(av[ai(i)], bv[bi(i)]);
  return t.record(make(dims, std::move(y)), {a, b},
                  [a, b, &t, df, ai, bi](const Tensor64& g, std::span<Tensor64* const> pg) {
                    const Tensor64& av = t.value(a.id());
                    const Tensor64& bv = t.value(b.id());
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const auto [da, db] = df(av[ai(i)], bv[bi(i)]);
                      if (pg[0]) (*pg[0])[ai(i)] += g[i] * da;
                      if (pg[1]) (*pg[1])[bi(i)] += g[i] * db;
                    }
                  });
}

struct AxisView {
  std::size_t outer, len, inner;
};

AxisView axis_view(const Shape& dims, std::size_t axis) {
  if (axis >= dims.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(dims));
  AxisView v{1, dims[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= dims[i];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) v.inner *= dims[i];
  return v;
}

Shape drop_axis(const Shape& dims, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i != axis) out.push_back(dims[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

struct Plane {
  std::size_t batch, h, w;
};

Plane trailing_plane(const Shape& dims, const char* op) {
  if (dims.size() < 2) throw ShapeError(std::string(op) + " needs at least 2 dims, got " + shape_str(dims));
  Plane p{1, dims[dims.size() - 2], dims.back()};
  for (std::size_t i = 0; i + 2 < dims.size(); ++i) p.batch *= dims[i];
  return p;
}

}  // namespace

// ---------------------------------------------------------- elementwise ops

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Var div(Var a, Var b) {
  return binary(a, b, "div", [](double x, double y) { return x / y; },
                [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return s * v; }, [s](double) { return s; });
}

Var add_scalar(Var x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double) { return 1.0; });
}

Var neg(Var x) { return scale(x, -1.0); }

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var abs(Var x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double v) {
                 const double y = std::tanh(v);
                 return 1.0 - y * y;
               });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double v) {
    const double s = stable_sigmoid(v);
    return s * (1.0 - s);
  });
}

Var softplus(Var x) {
  return unary(x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }, stable_sigmoid);
}

Var clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp needs lo <= hi");
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ------------------------------------------------------ reductions, reshape

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return t.record(Tensor64({1}, s), {x}, [](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    for (double& v : pg[0]->data()) v += g[0];
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / double(x.size())); }

Var reshape(Var x, Shape dims) {
  Tape& t = tape_of(x);
  if (shape_numel(dims) != x.size()) {
    throw ShapeError("reshape " + shape_str(x.dims()) + " -> " + shape_str(dims) + " changes element count");
  }
  return t.record(x.value().reshaped(std::move(dims)), {x}, [](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  });
}

Var select(Var x, std::size_t i) {
  Tape& t = tape_of(x);
  const Tensor64& xv = x.value();
  if (xv.ndim() < 2) throw ShapeError("select needs ndim >= 2, got " + shape_str(xv.dims()));
  if (i >= xv.dim(0)) throw ShapeError("select index " + std::to_string(i) + " out of range for " + shape_str(xv.dims()));
  const std::size_t n = xv.size() / xv.dim(0);
  return t.record(xv.sub(i), {x}, [i, n](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    for (std::size_t k = 0; k < n; ++k) (*pg[0])[i * n + k] += g[k];
  });
}

Var element(Var x, std::size_t flat_index) {
  Tape& t = tape_of(x);
  if (flat_index >= x.size()) throw ShapeError("element index out of range");
  return t.record(Tensor64({1}, x.value()[flat_index]), {x},
                  [flat_index](const Tensor64& g, std::span<Tensor64* const> pg) {
                    if (pg[0]) (*pg[0])[flat_index] += g[0];
                  });
}

Var stack(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("stack of zero nodes");
  Tape& t = tape_of(xs[0]);
  const Shape& inner = xs[0].dims();
  const std::size_t n = xs[0].size();
  std::vector<double> y;
  y.reserve(n * xs.size());
  for (const Var& x : xs) {
    tape_of(xs[0], x);
    if (x.dims() != inner) throw ShapeError("stack: mixed dims " + shape_str(inner) + " and " + shape_str(x.dims()));
    y.insert(y.end(), x.value().data().begin(), x.value().data().end());
  }
  Shape dims{xs.size()};
  dims.insert(dims.end(), inner.begin(), inner.end());
  return t.record(make(dims, std::move(y)), std::vector<Var>(xs.begin(), xs.end()),
                  [n](const Tensor64& g, std::span<Tensor64* const> pg) {
                    for (std::size_t k = 0; k < pg.size(); ++k) {
                      if (!pg[k]) continue;
                      for (std::size_t i = 0; i < n; ++i) (*pg[k])[i] += g[k * n + i];
                    }
                  });
}

Var pool_mean_axis(Var x, std::size_t axis) {
  Tape& t = tape_of(x);
  const AxisView v = axis_view(x.dims(), axis);
  const Tensor64& xv = x.value();
  std::vector<double> y(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t l = 0; l < v.len; ++l) {
      const double* src = &xv[(o * v.len + l) * v.inner];
      double* dst = &y[o * v.inner];
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
    }
  }
  for (double& e : y) e /= double(v.len);
  return t.record(make(drop_axis(x.dims(), axis), std::move(y)), {x},
                  [v](const Tensor64& g, std::span<Tensor64* const> pg) {
                    if (!pg[0]) return;
                    const double w = 1.0 / double(v.len);
                    for (std::size_t o = 0; o < v.outer; ++o) {
                      for (std::size_t l = 0; l < v.len; ++l) {
                        double* dst = &(*pg[0])[(o * v.len + l) * v.inner];
                        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += w * g[o * v.inner + i];
                      }
                    }
                  });
}

Var pool_max_axis(Var x, std::size_t axis) {
  Tape& t = tape_of(x);
  const AxisView v = axis_view(x.dims(), axis);
  const Tensor64& xv = x.value();
  std::vector<double> y(v.outer * v.inner);
  std::vector<std::size_t> arg(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = 0;
      double bv = xv[o * v.len * v.inner + i];
      for (std::size_t l = 1; l < v.len; ++l) {
        const double c = xv[(o * v.len + l) * v.inner + i];
        if (c > bv) {  // strict: ties keep the lowest index
          bv = c;
          best = l;
        }
      }
      y[o * v.inner + i] = bv;
      arg[o * v.inner + i] = (o * v.len + best) * v.inner + i;
    }
  }
  return t.record(make(drop_axis(x.dims(), axis), std::move(y)), {x},
                  [arg = std::move(arg)](const Tensor64& g, std::span<Tensor64* const> pg) {
                    if (!pg[0]) return;
                    for (std::size_t k = 0; k < arg.size(); ++k) (*pg[0])[arg[k]] += g[k];
                  });
}

// ---------------------------------------------------------- image operators

Var conv2d(Var input, Var kernel, const Conv2dOptions& opt) {
  Tape& t = tape_of(input, kernel);
  const Tensor64& x = input.value();
  const Tensor64& k = kernel.value();
  if (x.ndim() != 3) throw ShapeError("conv2d input must be [C, H, W], got " + shape_str(x.dims()));
  if (k.ndim() != 4) throw ShapeError("conv2d kernel must be [Co, Ci, kh, kw], got " + shape_str(k.dims()));
  if (k.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(k.dim(1)) + " input channels, input has " +
                     std::to_string(x.dim(0)));
  }
  if (opt.stride_h == 0 || opt.stride_w == 0) throw ShapeError("conv2d stride must be >= 1");
  const std::size_t ci_n = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t co_n = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t Hp = H + 2 * opt.pad_h, Wp = W + 2 * opt.pad_w;
  if (kh > Hp || kw > Wp) throw ShapeError("conv2d kernel larger than padded input");
  if ((Hp - kh) % opt.stride_h != 0 || (Wp - kw) % opt.stride_w != 0) {
    throw ShapeError("conv2d: (extent + 2*pad - kernel) not divisible by stride");
  }
  const std::size_t Ho = (Hp - kh) / opt.stride_h + 1, Wo = (Wp - kw) / opt.stride_w + 1;
  const long ph = long(opt.pad_h), pw = long(opt.pad_w);
  const long sh = long(opt.stride_h), sw = long(opt.stride_w);

  // Valid output column range for kernel column kx: ix = ox*sw - pw + kx in [0, W).
  auto ox_range = [=](long kx) {
    long lo = 0;
    while (lo < long(Wo) && lo * sw - pw + kx < 0) ++lo;
    long hi = long(Wo);
    while (hi > lo && (hi - 1) * sw - pw + kx >= long(W)) --hi;
    return std::pair{lo, hi};
  };

  std::vector<double> y(co_n * Ho * Wo, 0.0);
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double kval = k[((co * ci_n + ci) * kh + ky) * kw + kx];
          const auto [lo, hi] = ox_range(long(kx));
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = long(oy) * sh - ph + long(ky);
            if (iy < 0 || iy >= long(H)) continue;
            const double* src = &x[(ci * H + std::size_t(iy)) * W];
            double* dst = &y[(co * Ho + oy) * Wo];
            for (long ox = lo; ox < hi; ++ox) dst[ox] += kval * src[ox * sw - pw + long(kx)];
          }
        }
      }
    }
  }

  return t.record(make({co_n, Ho, Wo}, std::move(y)), {input, kernel},
                  [=, &t, in_id = input.id(), k_id = kernel.id()](const Tensor64& g, std::span<Tensor64* const> pg) {
                    const Tensor64& x = t.value(in_id);
                    const Tensor64& k = t.value(k_id);
                    Tensor64* gx = pg[0];
                    Tensor64* gk = pg[1];
                    for (std::size_t co = 0; co < co_n; ++co) {
                      for (std::size_t ci = 0; ci < ci_n; ++ci) {
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                          for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::size_t kidx = ((co * ci_n + ci) * kh + ky) * kw + kx;
                            const double kval = k[kidx];
                            const auto [lo, hi] = ox_range(long(kx));
                            double kacc = 0.0;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                              const long iy = long(oy) * sh - ph + long(ky);
                              if (iy < 0 || iy >= long(H)) continue;
                              const std::size_t row = (ci * H + std::size_t(iy)) * W;
                              const double* grow = &g[(co * Ho + oy) * Wo];
                              const double* src = &x[row];
                              if (gx) {
                                double* dst = &(*gx)[row];
                                for (long ox = lo; ox < hi; ++ox) dst[ox * sw - pw + long(kx)] += kval * grow[ox];
                              }
                              if (gk) {
                                for (long ox = lo; ox < hi; ++ox) kacc += grow[ox] * src[ox * sw - pw + long(kx)];
                              }
                            }
                            if (gk) (*gk)[kidx] += kacc;
                          }
                        }
                      }
                    }
                  });
}

Var add_channel_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Tensor64& xv = x.value();
  const Tensor64& bv = bias.value();
  if (bv.ndim() != 1 || xv.ndim() < 1 || bv.dim(0) != xv.dim(0)) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bv.dims()) + " vs input " + shape_str(xv.dims()));
  }
  const std::size_t C = xv.dim(0), n = xv.size() / C;
  std::vector<double> y(xv.data().begin(), xv.data().end());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < n; ++i) y[c * n + i] += bv[c];
  }
  return t.record(make(xv.dims(), std::move(y)), {x, bias}, [C, n](const Tensor64& g, std::span<Tensor64* const> pg) {
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (pg[0]) (*pg[0])[c * n + i] += g[c * n + i];
        acc += g[c * n + i];
      }
      if (pg[1]) (*pg[1])[c] += acc;
    }
  });
}

Var area_downsample(Var x, std::size_t fh, std::size_t fw) {
  Tape& t = tape_of(x);
  if (fh == 0 || fw == 0) throw ShapeError("area_downsample factors must be >= 1");
  const Plane p = trailing_plane(x.dims(), "area_downsample");
  const std::size_t Ho = (p.h + fh - 1) / fh, Wo = (p.w + fw - 1) / fw;
  Shape dims = x.dims();
  dims[dims.size() - 2] = Ho;
  dims.back() = Wo;

  // Window (oy, ox) covers rows [oy*fh, min(h, oy*fh+fh)) and likewise for columns.
  auto count = [=](std::size_t oy, std::size_t ox) {
    return double((std::min(p.h, (oy + 1) * fh) - oy * fh) * (std::min(p.w, (ox + 1) * fw) - ox * fw));
  };
  const Tensor64& xv = x.value();
  std::vector<double> y(p.batch * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < p.batch; ++b) {
    for (std::size_t r = 0; r < p.h; ++r) {
      for (std::size_t c = 0; c < p.w; ++c) y[(b * Ho + r / fh) * Wo + c / fw] += xv[(b * p.h + r) * p.w + c];
    }
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) y[(b * Ho + oy) * Wo + ox] /= count(oy, ox);
    }
  }
  return t.record(make(dims, std::move(y)), {x}, [=](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    for (std::size_t b = 0; b < p.batch; ++b) {
      for (std::size_t r = 0; r < p.h; ++r) {
        for (std::size_t c = 0; c < p.w; ++c) {
          const std::size_t oy = r / fh, ox = c / fw;
          (*pg[0])[(b * p.h + r) * p.w + c] += g[(b * Ho + oy) * Wo + ox] / count(oy, ox);
        }
      }
    }
  });
}

Var pad_replicate(Var x, std::size_t pad_h, std::size_t pad_w) {
  Tape& t = tape_of(x);
  const Plane p = trailing_plane(x.dims(), "pad_replicate");
  const std::size_t Ho = p.h + 2 * pad_h, Wo = p.w + 2 * pad_w;
  Shape dims = x.dims();
  dims[dims.size() - 2] = Ho;
  dims.back() = Wo;
  auto src_index = [=](std::size_t b, std::size_t oy, std::size_t ox) {
    const long r = std::clamp(long(oy) - long(pad_h), 0L, long(p.h) - 1);
    const long c = std::clamp(long(ox) - long(pad_w), 0L, long(p.w) - 1);
    return (b * p.h + std::size_t(r)) * p.w + std::size_t(c);
  };
  const Tensor64& xv = x.value();
  std::vector<double> y(p.batch * Ho * Wo);
  for (std::size_t b = 0; b < p.batch; ++b) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) y[(b * Ho + oy) * Wo + ox] = xv[src_index(b, oy, ox)];
    }
  }
  return t.record(make(dims, std::move(y)), {x}, [=](const Tensor64& g, std::span<Tensor64* const> pg) {
    if (!pg[0]) return;
    for (std::size_t b = 0; b < p.batch; ++b) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) (*pg[0])[src_index(b, oy, ox)] += g[(b * Ho + oy) * Wo + ox];
      }
    }
  });
}

Var upsample_linear_1d(Var x, std::size_t factor) {
  Tape& t = tape_of(x);
  const Tensor64& xv = x.value();
  if (xv.ndim() != 2) throw ShapeError("upsample_linear_1d expects [C, W2], got " + shape_str(xv.dims()));
  if (factor == 0) throw ContractError("upsample factor must be >= 1");
  const std::size_t C = xv.dim(0), W2 = xv.dim(1), W = W2 * factor;
  if (W2 < 2 && factor > 1) throw ContractError("upsample_linear_1d needs W2 >= 2 when factor > 1");

  struct Tap {
    std::size_t i0;
    double frac;
  };
  std::vector<Tap> taps(W);
  for (std::size_t w = 0; w < W; ++w) {
    if (W == 1 || W2 == 1) {
      taps[w] = {0, 0.0};
      continue;
    }
    // Integer numerator keeps the endpoints exact.
    const double pos = double(w * (W2 - 1)) / double(W - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 >= W2 - 1) i0 = W2 - 2;
    taps[w] = {i0, pos - double(i0)};
  }
  std::vector<double> y(C * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t w = 0; w < W; ++w) {
      const Tap& tp = taps[w];
      const double a = xv[c * W2 + tp.i0];
      const double b = tp.frac > 0.0 ? xv[c * W2 + tp.i0 + 1] : 0.0;
      y[c * W + w] = (1.0 - tp.frac) * a + tp.frac * b;
    }
  }
  return t.record(make({C, W}, std::move(y)), {x},
                  [C, W, W2, taps = std::move(taps)](const Tensor64& g, std::span<Tensor64* const> pg) {
                    if (!pg[0]) return;
                    for (std::size_t c = 0; c < C; ++c) {
                      for (std::size_t w = 0; w < W; ++w) {
                        const Tap& tp = taps[w];
                        (*pg[0])[c * W2 + tp.i0] += (1.0 - tp.frac) * g[c * W + w];
                        if (tp.frac > 0.0) (*pg[0])[c * W2 + tp.i0 + 1] += tp.frac * g[c * W + w];
                      }
                    }
                  });
}

}  // namespace octproj::ad
