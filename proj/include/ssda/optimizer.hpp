#pragma once

#include <vector>

#include "ssda/layers.hpp"

namespace ssda {

struct OptimizerConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// SGD with heavy-ball momentum and L2 weight decay:
//   v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
// Velocity buffers are positional, so step() must always see the same
// parameter list.
class Sgd {
 public:
  explicit Sgd(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Parameter*>& params, double lr);
  void step(const std::vector<Parameter*>& params) { step(params, cfg_.lr); }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace ssda
