#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rewritenet/error.hpp"
#include "rewritenet/tensor.hpp"

namespace rewritenet {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("adam: learning_rate must be > 0");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("adam: beta1 must be in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam: beta2 must be in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("adam: epsilon must be > 0");
  }
};

/// Named trainable tensors plus their Adam moments. Iteration order is the
/// lexicographic order of names, which keeps updates and checkpoints stable.
class ParameterRegistry {
 public:
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };

  Tensor& add(const std::string& name, Tensor value) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    value.set_requires_grad(true);
    moments_[name] = Moments{std::vector<double>(value.numel(), 0.0),
                             std::vector<double>(value.numel(), 0.0)};
    return params_.emplace(name, std::move(value)).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Tensor>& parameters() { return params_; }
  const std::map<std::string, Tensor>& parameters() const { return params_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }
  void advance() { ++step_; }

  /// Allocates (or resets) every gradient slot to zeros.
  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Moments> moments_;
  std::int64_t step_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParameterRegistry& registry, double max_norm) {
  double sq = 0.0;
  for (auto& [_, p] : registry.parameters()) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [_, p] : registry.parameters()) {
      for (auto& g : p.grad_buffer()) g *= s;
    }
  }
  return norm;
}

/// One bias-corrected Adam update of every registered parameter, then zeroes
/// the gradients.
inline void adam_step(ParameterRegistry& registry, const AdamConfig& cfg) {
  cfg.validate();
  for (auto& [name, p] : registry.parameters()) {
    if (!p.has_grad()) throw NumericError("adam_step: parameter '" + name + "' has no gradient");
  }
  registry.advance();
  const double t = static_cast<double>(registry.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, p] : registry.parameters()) {
    auto& mom = registry.moments().at(name);
    auto data = p.mutable_data();
    auto grad = p.grad_buffer();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      mom.first[i] = cfg.beta1 * mom.first[i] + (1.0 - cfg.beta1) * g;
      mom.second[i] = cfg.beta2 * mom.second[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = mom.first[i] / c1;
      const double vhat = mom.second[i] / c2;
      data[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
      grad[i] = 0.0;
    }
  }
}

}  // namespace rewritenet
