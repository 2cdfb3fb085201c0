#include "fastadapt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fastadapt {

double relative_error(double analytic, double numeric) {
  double denom = std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::string> GradCheckReport::failed_parameters() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (!e.passed) out.push_back(e.name);
  }
  return out;
}

namespace {

double checked_eval(const Objective& f, const ParamSet& p, const NameSet& trainable) {
  double v = evaluate(f, p, trainable);
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport compare_gradients(const Objective& f, const ParamSet& theta, const GradMap& analytic, double step,
                                  double tolerance) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  NameSet trainable;
  for (const auto& [name, _] : analytic) trainable.insert(name);
  checked_eval(f, theta, trainable);
  GradCheckReport report;
  for (const auto& [name, grad] : analytic) {
    const Tensor& base = theta.at(name);
    if (grad.shape() != base.shape()) throw ShapeError("grad_check: gradient shape mismatch for '" + name + "'");
    GradCheckEntry entry;
    entry.name = name;
    std::vector<double> values = base.to_vector();
    for (std::size_t i = 0; i < values.size(); ++i) {
      double orig = values[i];
      ParamSet probe = theta;
      values[i] = orig + step;
      probe.set(name, Tensor(base.shape(), values));
      double up = checked_eval(f, probe, trainable);
      values[i] = orig - step;
      probe.set(name, Tensor(base.shape(), values));
      double down = checked_eval(f, probe, trainable);
      values[i] = orig;
      double numeric = (up - down) / (2.0 * step);
      double err = relative_error(grad[i], numeric);
      if (err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
      }
    }
    entry.passed = entry.max_rel_error < tolerance;
    report.passed = report.passed && entry.passed;
    if (entry.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = entry.max_rel_error;
      report.worst_parameter = name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

GradCheckReport grad_check(const Objective& f, const ParamSet& theta, double step, double tolerance,
                           const NameSet& names) {
  NameSet use = names.empty() ? theta.name_set() : names;
  ValueAndGrad vg = value_and_grad(f, theta, use);
  return compare_gradients(f, theta, vg.grad, step, tolerance);
}

}  // namespace fastadapt
