#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "octproj/autodiff.hpp"

namespace octproj::ad {

// Builds a scalar on `tape` from leaves bound to the checked inputs.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradcheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // One-sided slopes disagreeing by more than this (relative to their sum)
  // trigger a look at h / 10 and h / 100: a disagreement that stops
  // shrinking marks a non-differentiable point at x, otherwise the finest
  // step supplies the estimate.
  double kink_tol = 1e-5;
  // 0 checks every element; otherwise this many elements per input, drawn
  // with `sample_seed`.
  std::size_t max_elements_per_input = 0;
  std::uint64_t sample_seed = 0;
};

struct ElementCheck {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;  // |a - n| / max(1e-8, |a| + |n|)
  bool boundary = false;
};

struct GradcheckReport {
  std::vector<ElementCheck> elements;
  double max_rel_err = 0.0;  // over non-boundary elements
  std::size_t boundary_count = 0;
  std::size_t failures = 0;
  bool passed = true;
};

double relative_error(double analytic, double numeric);

// Compares reverse-mode gradients against central differences, everything in
// f64. Boundary (kink) elements are reported but excluded from failures.
GradcheckReport gradcheck(const ScalarFn& fn, const std::vector<Tensor64>& inputs, const GradcheckOptions& opt = {});

}  // namespace octproj::ad
