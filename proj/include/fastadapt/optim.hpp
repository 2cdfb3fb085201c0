#pragma once

#include <map>
#include <string>

#include "fastadapt/params.hpp"

namespace fastadapt {

enum class OptimizerKind { sgd, adam };
OptimizerKind parse_optimizer(const std::string& s);
const char* optimizer_name(OptimizerKind k);

// First-order optimizer over the entries of a ParamSet named in a GradMap.
// Entries absent from the gradient map are never touched.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);

  void step(ParamSet& params, const GradMap& grad);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace fastadapt
