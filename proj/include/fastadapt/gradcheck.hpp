#pragma once

#include <string>
#include <vector>

#include "fastadapt/params.hpp"

namespace fastadapt {

// Gradients smaller than this are compared in absolute terms.
inline constexpr double kRelErrorFloor = 1e-6;

// |a - n| / max(|a|, |n|, kRelErrorFloor)
double relative_error(double analytic, double numeric);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::vector<std::string> failed_parameters() const;
};

// Central differences with step `step` against reverse-mode gradients, for
// every name in `names` (all entries when empty).
GradCheckReport grad_check(const Objective& f, const ParamSet& theta, double step, double tolerance,
                           const NameSet& names = {});

// Same comparison against a caller-supplied analytic gradient.
GradCheckReport compare_gradients(const Objective& f, const ParamSet& theta, const GradMap& analytic, double step,
                                  double tolerance);

}  // namespace fastadapt
