#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fastadapt/autodiff.hpp"
#include "fastadapt/tensor.hpp"

namespace fastadapt {

// Which module a parameter belongs to; drives the fine-tuning strategies.
enum class Partition { embedding, encoder, decoder };

const char* partition_name(Partition p);
Partition parse_partition(const std::string& s);

using NameSet = std::set<std::string>;

// Named collection of parameter tensors (theta). Ordered by name so every
// traversal, and therefore every floating-point reduction, is deterministic.
class ParamSet {
 public:
  struct Entry {
    Tensor value;
    Partition partition;
  };

  void add(const std::string& name, Tensor value, Partition partition);
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Partition partition(const std::string& name) const;

  std::vector<std::string> names() const;
  NameSet name_set() const;
  NameSet names_in(Partition p) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  std::size_t parameter_count(const NameSet& names) const;

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  bool same_structure(const ParamSet& other) const;
  bool bit_identical(const ParamSet& other) const;
  bool bit_identical(const ParamSet& other, const NameSet& names) const;

 private:
  std::map<std::string, Entry> entries_;
};

// theta + a * delta over the names present in delta.
ParamSet add_scaled(const ParamSet& theta, const GradMap& delta, double a);
// sum over `names` (all names when empty) of ||a - b||^2
double squared_distance(const ParamSet& a, const ParamSet& b, const NameSet& names = {});
double distance(const ParamSet& a, const ParamSet& b, const NameSet& names = {});

GradMap add(const GradMap& a, const GradMap& b);
GradMap scaled(const GradMap& g, double c);
double norm(const GradMap& g);
double squared_norm(const GradMap& g);
// ||a - b|| over the union of keys (missing entries count as zero).
double distance(const GradMap& a, const GradMap& b);
bool all_finite(const GradMap& g);

// Leaves for every entry; those in `trainable` require grad, the rest are
// recorded as named constants.
VarMap bind(Graph& g, const ParamSet& params, const NameSet& trainable);

// A scalar loss of named parameters recorded on a graph.
using Objective = std::function<Var(Graph&, const VarMap&)>;

// Value and gradient of `f` at `params` for the trainable names.
struct ValueAndGrad {
  double value = 0.0;
  GradMap grad;
};
ValueAndGrad value_and_grad(const Objective& f, const ParamSet& params, const NameSet& trainable);
// Loss value only. Leaves in `trainable` are bound as differentiable so that
// objectives which take gradients internally evaluate correctly.
double evaluate(const Objective& f, const ParamSet& params, const NameSet& trainable = {});

}  // namespace fastadapt
