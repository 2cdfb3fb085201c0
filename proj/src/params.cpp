#include "fastadapt/params.hpp"

#include <cmath>
#include <stdexcept>

namespace fastadapt {

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::embedding: return "embedding";
    case Partition::encoder: return "encoder";
    case Partition::decoder: return "decoder";
  }
  return "unknown";
}

Partition parse_partition(const std::string& s) {
  if (s == "embedding") return Partition::embedding;
  if (s == "encoder") return Partition::encoder;
  if (s == "decoder") return Partition::decoder;
  throw std::invalid_argument("unknown partition '" + s + "'");
}

void ParamSet::add(const std::string& name, Tensor value, Partition partition) {
  if (!entries_.emplace(name, Entry{std::move(value), partition}).second) {
    throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
  }
}

void ParamSet::set(const std::string& name, Tensor value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  if (it->second.value.shape() != value.shape()) {
    throw ShapeError("ParamSet: '" + name + "' has shape " + shape_str(it->second.value.shape()) + ", got " +
                     shape_str(value.shape()));
  }
  it->second.value = std::move(value);
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  return it->second.value;
}

Partition ParamSet::partition(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  return it->second.partition;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

NameSet ParamSet::name_set() const {
  NameSet out;
  for (const auto& [name, _] : entries_) out.insert(name);
  return out;
}

NameSet ParamSet::names_in(Partition p) const {
  NameSet out;
  for (const auto& [name, e] : entries_) {
    if (e.partition == p) out.insert(name);
  }
  return out;
}

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

std::size_t ParamSet::parameter_count(const NameSet& names) const {
  std::size_t n = 0;
  for (const auto& name : names) n += at(name).size();
  return n;
}

bool ParamSet::same_structure(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, e] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end() || it->second.value.shape() != e.value.shape()) return false;
  }
  return true;
}

bool ParamSet::bit_identical(const ParamSet& other) const { return bit_identical(other, name_set()); }

bool ParamSet::bit_identical(const ParamSet& other, const NameSet& names) const {
  for (const auto& name : names) {
    if (!other.contains(name) || !at(name).same_values(other.at(name))) return false;
  }
  return true;
}

ParamSet add_scaled(const ParamSet& theta, const GradMap& delta, double a) {
  ParamSet out = theta;
  for (const auto& [name, d] : delta) out.set(name, axpy(a, d, theta.at(name)));
  return out;
}

double squared_distance(const ParamSet& a, const ParamSet& b, const NameSet& names) {
  const NameSet& use = names.empty() ? a.name_set() : names;
  double s = 0.0;
  for (const auto& name : use) {
    const Tensor& x = a.at(name);
    const Tensor& y = b.at(name);
    if (x.shape() != y.shape()) throw ShapeError("squared_distance: shape mismatch for '" + name + "'");
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  }
  return s;
}

double distance(const ParamSet& a, const ParamSet& b, const NameSet& names) {
  return std::sqrt(squared_distance(a, b, names));
}

GradMap add(const GradMap& a, const GradMap& b) {
  GradMap out = a;
  for (const auto& [name, t] : b) {
    auto it = out.find(name);
    if (it == out.end()) {
      out.emplace(name, t);
    } else {
      it->second = axpy(1.0, t, it->second);
    }
  }
  return out;
}

GradMap scaled(const GradMap& g, double c) {
  GradMap out;
  for (const auto& [name, t] : g) out.emplace(name, scaled(t, c));
  return out;
}

double squared_norm(const GradMap& g) {
  double s = 0.0;
  for (const auto& [_, t] : g) s += squared_norm(t);
  return s;
}

double norm(const GradMap& g) { return std::sqrt(squared_norm(g)); }

double distance(const GradMap& a, const GradMap& b) {
  double s = 0.0;
  for (const auto& [name, t] : a) {
    auto it = b.find(name);
    if (it == b.end()) {
      s += squared_norm(t);
    } else {
      for (std::size_t i = 0; i < t.size(); ++i) s += (t[i] - it->second[i]) * (t[i] - it->second[i]);
    }
  }
  for (const auto& [name, t] : b) {
    if (!a.count(name)) s += squared_norm(t);
  }
  return std::sqrt(s);
}

bool all_finite(const GradMap& g) {
  for (const auto& [_, t] : g) {
    if (!t.all_finite()) return false;
  }
  return true;
}

VarMap bind(Graph& g, const ParamSet& params, const NameSet& trainable) {
  VarMap vars;
  for (const auto& [name, e] : params) vars.emplace(name, g.parameter(name, e.value, trainable.count(name) != 0));
  return vars;
}

ValueAndGrad value_and_grad(const Objective& f, const ParamSet& params, const NameSet& trainable) {
  Graph g;
  VarMap vars = bind(g, params, trainable);
  Var loss = f(g, vars);
  ValueAndGrad out;
  out.value = loss.value().item();
  if (!std::isfinite(out.value)) throw NumericalError("value_and_grad: non-finite loss");
  out.grad = g.backward(loss);
  return out;
}

double evaluate(const Objective& f, const ParamSet& params, const NameSet& trainable) {
  Graph g;
  g.set_grad_enabled(!trainable.empty());
  VarMap vars = bind(g, params, trainable);
  return f(g, vars).value().item();
}

}  // namespace fastadapt
