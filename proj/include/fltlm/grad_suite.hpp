#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fltlm {

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  std::string worst;
  bool passed() const { return max_rel_error < threshold; }
};

/// Central-difference checks of the primitives, the filter losses, the
/// soft-mask scalars and the joint loss on a two-document micro-input.
std::vector<GradCheckCase> run_grad_suite(std::uint64_t seed);

}  // namespace fltlm
