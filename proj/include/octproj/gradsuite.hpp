#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

// Finite-difference checks of every differentiable operation, grouped as
// conv (tensor and image ops), dpm, cmm (CMM and losses) and predictor.
namespace octproj::gradsuite {

struct OpResult {
  std::string group;
  std::string op;
  std::size_t seeds = 0;
  std::size_t elements = 0;
  std::size_t boundary = 0;  // kink elements excluded from the comparison
  double max_rel_err = 0.0;
  bool passed = true;
};

const std::vector<std::string>& groups();

// which: "all" or one group. Seeds first_seed .. first_seed + n_seeds - 1.
// ContractError for an unknown group.
std::vector<OpResult> run(const std::string& which, std::uint64_t first_seed = 1, std::size_t n_seeds = 10);

}  // namespace octproj::gradsuite
