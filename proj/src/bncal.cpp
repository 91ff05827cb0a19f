#include "ssda/bncal.hpp"

#include <numeric>

#include "ssda/error.hpp"

namespace ssda {

namespace {

std::vector<BatchNorm2d*> calibrated_layers(Networks& nets) {
  auto layers = nets.encoder.bn_layers();
  auto head = nets.main.bn_layers();
  layers.insert(layers.end(), head.begin(), head.end());
  return layers;
}

}  // namespace

void calibrate(Networks& nets, const Dataset& target_train, const CalibrationConfig& cfg) {
  if (target_train.samples.empty()) throw ConfigError("calibration needs target training images");
  if (cfg.passes < 1) throw ConfigError("calibration passes must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("calibration batch_size must be >= 1");
  if (!(cfg.momentum > 0.0 && cfg.momentum <= 1.0)) throw ConfigError("calibration momentum must be in (0,1]");

  auto layers = calibrated_layers(nets);
  std::vector<double> saved_momentum;
  for (auto* bn : layers) {
    saved_momentum.push_back(bn->state().momentum);
    bn->reset_running_stats();
  }

  const int batch = std::min<int>(cfg.batch_size, static_cast<int>(target_train.size()));
  BatchIterator it(target_train.size(), batch, cfg.seed, true);
  const std::size_t per_pass = (target_train.size() + batch - 1) / batch;
  bool first = true;
  for (int pass = 0; pass < cfg.passes; ++pass)
    for (std::size_t b = 0; b < per_pass; ++b) {
      // The first batch replaces the reset values outright.
      for (auto* bn : layers) bn->state().momentum = first ? 1.0 : cfg.momentum;
      forward_main(nets, to_tensor(target_train, *it.next()), Mode::train);
      first = false;
    }

  for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->state().momentum = saved_momentum[i];
}

std::vector<LayerStats> bn_stat_oracle(const Networks& nets, const Dataset& dataset, int chunk) {
  if (dataset.samples.empty()) throw ConfigError("oracle needs a non-empty dataset");
  Networks work = nets;
  auto layers = calibrated_layers(work);
  std::vector<LayerStats> out;
  for (auto* bn : layers) {
    bn->begin_capture();
    for (std::size_t begin = 0; begin < dataset.size(); begin += chunk) {
      const std::size_t end = std::min(dataset.size(), begin + static_cast<std::size_t>(chunk));
      std::vector<std::size_t> idx(end - begin);
      std::iota(idx.begin(), idx.end(), begin);
      forward_main(work, to_tensor(dataset, idx), Mode::eval);
    }
    const auto stats = *bn->end_capture();
    out.push_back({bn->name(), stats.mean(), stats.variance()});
    bn->state().running_mean = out.back().mean;
    bn->state().running_var = out.back().variance;
  }
  return out;
}

}  // namespace ssda
