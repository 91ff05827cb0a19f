#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssda/bncal.hpp"
#include "ssda/data.hpp"
#include "ssda/metrics.hpp"
#include "ssda/training.hpp"

namespace ssda {

// One experiment: the synthetic domain pair, the training recipe and the
// optional post-training BN calibration. Read from an INI-style file:
//
//   [data]         task, image_size, num_classes, samples_per_class,
//                  test_samples_per_class, hue_rotation, noise_sigma,
//                  blur_radius, background_texture, seed, root
//   [run]          preset, seed, out_dir
//   [train]        every TrainConfig knob (see README)
//   [model]        encoder_channels, discriminator_channels, bn_eps, bn_momentum
//   [calibration]  enabled, passes, batch_size, momentum
struct ExperimentConfig {
  SyntheticShiftSpec data;
  std::filesystem::path data_root = "data";
  std::string preset = "rot";
  TrainConfig train;
  bool calibrate = false;
  CalibrationConfig calibration;
  std::filesystem::path out_dir = "runs";
};

// Preset names: src, tar, bn, rot, mixrot, sprot, adv, rot+adv, rot+adv+bn,
// rot+bn, sprot+adv, sprot+adv+bn, mixrot+adv.
const std::vector<std::string>& preset_names();
// Sets the pretext/adversarial/TAR/calibration switches for a preset.
void apply_preset(ExperimentConfig& cfg, const std::string& preset);

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Applies --seed: training seed and calibration seed (the data seed is part
// of the dataset definition and stays as configured).
void set_run_seed(ExperimentConfig& cfg, std::uint64_t seed);

nlohmann::json to_json(const ExperimentConfig& cfg);
// Digest of every behavior-affecting field (output locations excluded).
std::string config_hash(const ExperimentConfig& cfg);
// <out_dir>/<preset>-<hash>-s<seed>
std::filesystem::path run_directory(const ExperimentConfig& cfg);
// The source-only configuration this experiment is compared against.
ExperimentConfig source_only_variant(const ExperimentConfig& cfg);

struct LoadedData {
  Dataset source_train, source_test, target_train, target_test;
};

LoadedData load_synthetic_data(const std::filesystem::path& root);
LoadedData in_memory_data(const SyntheticShiftSpec& spec);

struct RunSummary {
  std::string preset;
  std::string config_hash;
  std::uint64_t seed = 0;
  MetricsRecord source;
  MetricsRecord target;
  std::optional<MetricsRecord> target_before_calibration;
  std::optional<double> src_relative_gain;

  nlohmann::json to_json() const;
};

// train -> (calibrate) -> eval. When run_dir is given, writes last/best
// checkpoints, metrics.jsonl, final.ckpt, summary.json and config.json there.
RunSummary run_experiment(const ExperimentConfig& cfg, const LoadedData& data,
                          const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                          TrainResult* result = nullptr);

}  // namespace ssda
