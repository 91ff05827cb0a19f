#include "ssda/optimizer.hpp"

#include "ssda/error.hpp"

namespace ssda {

void OptimizerConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("optimizer lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer weight_decay must be >= 0");
}

void Sgd::step(const std::vector<Parameter*>& params, double lr) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->size(), 0.0);
  }
  if (velocity_.size() != params.size()) throw ShapeError("optimizer parameter list changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& v = velocity_[i];
    if (v.size() != p.size()) throw ShapeError("optimizer parameter " + p.name + " changed size");
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = cfg_.momentum * v[k] + p.grad[k] + cfg_.weight_decay * p.value[k];
      p.value[k] -= lr * v[k];
    }
  }
}

}  // namespace ssda
