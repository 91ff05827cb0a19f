#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssda/data.hpp"
#include "ssda/model.hpp"

namespace ssda {

struct CalibrationConfig {
  int passes = 5;
  int batch_size = 100;
  double momentum = 0.1;
  std::uint64_t seed = 0;
};

// Re-estimates the running statistics of every encoder and main-head BN layer
// from target images: stats reset to (0, 1), then `passes` shuffled sweeps of
// train-mode forwards with the moving-average update. The first batch
// overwrites the reset values. No learnable parameter
// is touched; pretext head and discriminator are skipped.
void calibrate(Networks& nets, const Dataset& target_train, const CalibrationConfig& cfg);

struct LayerStats {
  std::string name;
  std::vector<double> mean;
  std::vector<double> variance;
};

// Exact per-channel mean and (biased) variance of each encoder/main-head BN
// layer's input over the whole dataset, as if the dataset were one batch.
// Layers are resolved in order: upstream layers normalize with the exact
// statistics already computed for them.
std::vector<LayerStats> bn_stat_oracle(const Networks& nets, const Dataset& dataset, int chunk = 50);

}  // namespace ssda
