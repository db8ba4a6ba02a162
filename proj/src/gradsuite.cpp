#include "octproj/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "octproj/dpm.hpp"
#include "octproj/errors.hpp"
#include "octproj/gradcheck.hpp"
#include "octproj/objective.hpp"
#include "octproj/predictors.hpp"
#include "octproj/rng.hpp"

namespace octproj::gradsuite {

using namespace octproj::ad;

namespace {

Tensor64 rand(Shape dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(dims));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor64(std::move(dims), std::move(v));
}

// sum(w * y) with fixed random weights.
Var probe(Var y, std::uint64_t seed) {
  Rng rng(seed, "probe");
  return sum(mul(y, y.tape().constant(rand(y.dims(), rng))));
}

using Case = std::function<GradcheckReport(std::uint64_t seed)>;

struct Entry {
  const char* group;
  const char* op;
  Case run;
};

GradcheckReport unary(std::uint64_t seed, const std::function<Var(Var)>& f, Shape dims = {3, 4}) {
  Rng rng(seed, "ops");
  return gradcheck([&](Tape&, std::span<const Var> in) { return probe(f(in[0]), seed); }, {rand(dims, rng)});
}

GradcheckReport binary(std::uint64_t seed, const std::function<Var(Var, Var)>& f, Shape da, Shape db,
                       double blo = -1.0, double bhi = 1.0) {
  Rng rng(seed, "ops");
  const Tensor64 a = rand(da, rng), b = rand(db, rng, blo, bhi);
  return gradcheck([&](Tape&, std::span<const Var> in) { return probe(f(in[0], in[1]), seed); }, {a, b});
}

pred::PredictorConfig toy_predictor() {
  pred::PredictorConfig c;
  c.H = 16;
  c.W = 16;
  c.channels = {3, 4};
  return c;
}

GradcheckReport pipeline_case(std::uint64_t seed, pred::Pipeline pipe) {
  const obj::FeatureExtractor fx({.seed = 3});
  const auto model = pred::Model::create(pipe, toy_predictor(), seed, seed % 2 == 0, 8);
  Rng rng(seed, "pipeline");
  const Tensor64 slice = rand({16, 16}, rng, 0.0, 1.0);
  const Tensor64 g2 = rand({1, 16}, rng, 0.0, 1.0), g3 = rand({1, 16}, rng, 0.0, 1.0);
  std::vector<Tensor64> inputs;
  for (const auto& p : model.flat_params()) inputs.push_back(to_f64(p.value));
  inputs.push_back(Tensor64({1}, 0.1));
  inputs.push_back(Tensor64({1}, 0.9));
  GradcheckOptions opt;
  opt.max_elements_per_input = 3;
  opt.sample_seed = seed;
  return gradcheck(
      [&](Tape& t, std::span<const Var> in) {
        const std::size_t n = in.size() - 2;
        const auto out = pred::run_model(model, in.subspan(0, n), t.constant(slice));
        return obj::combined_loss(obj::cmm_apply(out.pm_b2, in[n], in[n + 1]), g2,
                                  obj::cmm_apply(out.pm_b3, in[n], in[n + 1]), g3, 0.2, fx);
      },
      inputs, opt);
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> all = {
      {"conv", "add", [](auto s) { return binary(s, add, {3, 4}, {3, 4}); }},
      {"conv", "sub", [](auto s) { return binary(s, sub, {3, 4}, {3, 4}); }},
      {"conv", "mul", [](auto s) { return binary(s, mul, {3, 4}, {3, 4}); }},
      {"conv", "div", [](auto s) { return binary(s, div, {3, 4}, {3, 4}, 0.5, 1.5); }},
      {"conv", "mul (scalar)", [](auto s) { return binary(s, mul, {3, 4}, {1}, 0.5, 1.5); }},
      {"conv", "scale", [](auto s) { return unary(s, [](Var x) { return scale(x, -2.5); }); }},
      {"conv", "add_scalar", [](auto s) { return unary(s, [](Var x) { return add_scalar(x, 0.3); }); }},
      {"conv", "square", [](auto s) { return unary(s, [](Var x) { return square(x); }); }},
      {"conv", "abs", [](auto s) { return unary(s, [](Var x) { return abs(x); }); }},
      {"conv", "tanh", [](auto s) { return unary(s, [](Var x) { return tanh(x); }); }},
      {"conv", "relu", [](auto s) { return unary(s, [](Var x) { return relu(x); }); }},
      {"conv", "sigmoid", [](auto s) { return unary(s, [](Var x) { return sigmoid(x); }); }},
      {"conv", "softplus", [](auto s) { return unary(s, [](Var x) { return softplus(x); }); }},
      {"conv", "clamp", [](auto s) { return unary(s, [](Var x) { return clamp(x, -0.5, 0.5); }); }},
      {"conv", "mean", [](auto s) { return unary(s, [](Var x) { return reshape(mean(x), {1}); }); }},
      {"conv", "pool_mean_axis", [](auto s) { return unary(s, [](Var x) { return pool_mean_axis(x, 0); }); }},
      {"conv", "pool_max_axis", [](auto s) { return unary(s, [](Var x) { return pool_max_axis(x, 1); }); }},
      {"conv", "select/stack",
       [](auto s) {
         return unary(s, [](Var x) {
           std::vector<Var> parts{select(x, 2), select(x, 0)};
           return stack(parts);
         });
       }},
      {"conv", "conv2d", [](auto s) { return binary(s, [](Var a, Var b) { return conv2d(a, b); }, {1, 4, 5}, {2, 1, 3, 3}); }},
      {"conv", "conv2d (stride, pad)",
       [](auto s) { return binary(s, [](Var a, Var b) { return conv2d(a, b, {2, 1, 1, 1}); }, {2, 6, 5}, {3, 2, 2, 3}); }},
      {"conv", "add_channel_bias", [](auto s) { return binary(s, add_channel_bias, {2, 6, 5}, {2}); }},
      {"conv", "area_downsample",
       [](auto s) { return unary(s, [](Var x) { return area_downsample(x, 2, 2); }, {2, 5, 5}); }},
      {"conv", "pad_replicate",
       [](auto s) { return unary(s, [](Var x) { return pad_replicate(x, 1, 2); }, {2, 4, 5}); }},
      {"conv", "upsample_linear_1d",
       [](auto s) { return unary(s, [](Var x) { return upsample_linear_1d(x, 2); }, {3, 5}); }},

      {"dpm", "sampling grid",
       [](auto s) {
         return binary(s, [](Var u, Var l) { return dpm::build_sampling_grid(u, l, 5); }, {6}, {6});
       }},
      {"dpm", "bilinear sampler",
       [](auto s) {
         Rng rng(s, "bilinear");
         const Tensor64 img = rand({6, 5}, rng, 0.0, 1.0), grid = rand({4, 5, 2}, rng, -0.95, 0.95);
         return gradcheck([&](Tape&, std::span<const Var> in) { return probe(dpm::bilinear_sample(in[0], in[1]), s); },
                          {img, grid});
       }},
      {"dpm", "project_column (mean)",
       [](auto s) {
         Rng rng(s, "project");
         const Tensor64 img = rand({12, 6}, rng, 0.0, 1.0);
         const Tensor64 up = rand({6}, rng, -0.8, -0.1), lo = rand({6}, rng, 0.1, 0.8);
         return gradcheck(
             [&](Tape&, std::span<const Var> in) {
               return probe(dpm::project_column(in[0], in[1], in[2], 9, dpm::PoolMode::mean), s);
             },
             {img, up, lo});
       }},
      {"dpm", "project_column (max)",
       [](auto s) {
         Rng rng(s, "project");
         const Tensor64 img = rand({12, 6}, rng, 0.0, 1.0);
         const Tensor64 up = rand({6}, rng, -0.8, -0.1), lo = rand({6}, rng, 0.1, 0.8);
         return gradcheck(
             [&](Tape&, std::span<const Var> in) {
               return probe(dpm::project_column(in[0], in[1], in[2], 9, dpm::PoolMode::max), s);
             },
             {img, up, lo});
       }},
      {"dpm", "monotone_reparam",
       [](auto s) { return unary(s, [](Var x) { return dpm::monotone_reparam(x); }, {3, 5}); }},

      {"cmm", "cmm_apply",
       [](auto s) {
         Rng rng(s, "cmm");
         const Tensor64 I = rand({2, 7}, rng, -1.0, 2.0);
         const double lo = rng.uniform(-0.5, 0.3), hi = rng.uniform(0.6, 1.5);
         return gradcheck(
             [&](Tape&, std::span<const Var> in) { return probe(obj::cmm_apply(in[0], in[1], in[2]), s); },
             {I, Tensor64({1}, lo), Tensor64({1}, hi)});
       }},
      {"cmm", "l1_loss",
       [](auto s) {
         Rng rng(s, "l1");
         const Tensor64 a = rand({3, 6}, rng), b = rand({3, 6}, rng);
         return gradcheck([&](Tape&, std::span<const Var> in) { return obj::l1_loss(in[0], b); }, {a});
       }},
      {"cmm", "feature_loss",
       [](auto s) {
         const obj::FeatureExtractor fx({.seed = 4});
         Rng rng(s, "feature");
         const Tensor64 a = rand({5, 9}, rng), b = rand({5, 9}, rng);
         return gradcheck([&](Tape&, std::span<const Var> in) { return obj::feature_loss(in[0], b, fx); }, {a});
       }},
      {"cmm", "combined_loss",
       [](auto s) {
         const obj::FeatureExtractor fx({.seed = 4});
         Rng rng(s, "combined");
         const Tensor64 p2 = rand({1, 12}, rng), g2 = rand({1, 12}, rng);
         const Tensor64 p3 = rand({1, 12}, rng), g3 = rand({1, 12}, rng);
         return gradcheck(
             [&](Tape&, std::span<const Var> in) { return obj::combined_loss(in[0], g2, in[1], g3, 0.2, fx); },
             {p2, p3});
       }},

      {"predictor", "cnn_dpm loss -> weights", [](auto s) { return pipeline_case(s, pred::Pipeline::cnn_dpm); }},
      {"predictor", "cnn_only loss -> weights", [](auto s) { return pipeline_case(s, pred::Pipeline::cnn_only); }},
  };
  return all;
}

}  // namespace

const std::vector<std::string>& groups() {
  static const std::vector<std::string> g{"conv", "dpm", "cmm", "predictor"};
  return g;
}

std::vector<OpResult> run(const std::string& which, std::uint64_t first_seed, std::size_t n_seeds) {
  if (which != "all" && std::find(groups().begin(), groups().end(), which) == groups().end()) {
    throw ContractError("unknown gradcheck group '" + which + "'");
  }
  std::vector<OpResult> out;
  for (const auto& e : entries()) {
    if (which != "all" && which != e.group) continue;
    OpResult r{e.group, e.op};
    for (std::uint64_t s = first_seed; s < first_seed + n_seeds; ++s) {
      const GradcheckReport rep = e.run(s);
      ++r.seeds;
      r.elements += rep.elements.size();
      r.boundary += rep.boundary_count;
      r.max_rel_err = std::max(r.max_rel_err, rep.max_rel_err);
      r.passed = r.passed && rep.passed;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace octproj::gradsuite
