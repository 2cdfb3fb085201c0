#include "fastadapt/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace fastadapt {

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd|adam)");
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(OptimizerKind kind, double lr, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr >= 0.0)) throw std::invalid_argument("optimizer: learning rate must be >= 0");
}

void Optimizer::step(ParamSet& params, const GradMap& grad) {
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    for (const auto& [name, g] : grad) params.set(name, axpy(-lr_, g, params.at(name)));
    return;
  }
  double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grad) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    const Tensor& cur = params.at(name);
    std::vector<double> next = cur.to_vector();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      next[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
    params.set(name, Tensor(cur.shape(), std::move(next)));
  }
}

}  // namespace fastadapt
