#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssda/data.hpp"
#include "ssda/losses.hpp"
#include "ssda/metrics.hpp"
#include "ssda/model.hpp"
#include "ssda/optimizer.hpp"
#include "ssda/pretext.hpp"

namespace ssda {

enum class LrSchedule { constant, poly };

struct TrainConfig {
  Task task = Task::classification;
  PretextMode pretext_mode = PretextMode::rot;
  bool adversarial = false;
  // L_adv on target outputs only instead of both domains.
  bool adversarial_target_only = false;
  // TAR upper bound: supervised training on labeled target data.
  bool target_supervised = false;
  LossWeights weights;
  OptimizerConfig optimizer{0.01, 0.9, 5e-4};
  OptimizerConfig disc_optimizer{0.001, 0.9, 5e-4};
  LrSchedule schedule = LrSchedule::constant;
  double poly_power = 0.9;
  int batch_size_source = 16;
  int batch_size_target = 16;
  int max_iters = 1000;
  int eval_every = 250;
  std::uint64_t seed = 0;
  FeatureTap feature_tap = FeatureTap::middle;
  int crop_size = 16;
  bool expand_all_rotations = true;
  LossNormalization loss_normalization = LossNormalization::mean;
  ArchitectureSpec arch;
  // Re-derive the encoder gradient with independent backward passes every
  // debug_check_every steps and fail on mismatch.
  bool debug_accumulation_check = false;
  int debug_check_every = 1000;

  void validate() const;
  PretextConfig pretext() const { return {pretext_mode, crop_size, expand_all_rotations}; }
  int pretext_labels() const { return pretext_mode == PretextMode::sprot ? 16 : 4; }
};

// Raised when a target-domain ground-truth label reaches a training loss.
class TaintError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Images plus main-task labels for one mini-batch. Target batches used for
// adaptation carry no labels at all.
struct SupervisedBatch {
  Tensor images;
  std::vector<int> labels;  // class ids, or concatenated label maps
  Domain domain = Domain::source;
};

SupervisedBatch make_supervised_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);
Tensor make_image_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);

// Number of times a target-domain label batch reached a training loss in this
// process (instrumentation for the taint guarantee).
std::uint64_t target_label_reads();

// Main-task loss used by every training path. Throws TaintError for target
// labels unless allow_target_labels (the TAR baseline).
LossResult main_task_loss(const Tensor& logits, const SupervisedBatch& batch, Task task, LossNormalization norm,
                          bool allow_target_labels);

struct StepReport {
  int iter = 0;
  std::optional<double> loss_pretext;
  std::optional<double> loss_main;
  std::optional<double> loss_adv;
  std::optional<double> loss_disc;
  double grad_norm_encoder = 0.0;

  nlohmann::json to_json() const;
};

// Owns the networks and optimizer state of one run and executes training
// iterations phase by phase:
//   pretext -> update P -> main -> generator -> update E,S -> discriminator.
// Gradient accumulators are zeroed at the start of each step and left filled
// afterwards so callers can inspect what the update used.
class Trainer {
 public:
  Trainer(Networks nets, TrainConfig cfg);

  Networks& networks() { return nets_; }
  const TrainConfig& config() const { return cfg_; }

  // One iteration of the joint rotation/main-task loop (no adversarial terms).
  StepReport step_alg1(const PretextBatch& target_batch, const SupervisedBatch& source_batch);
  // Joint loop plus prediction-layer alignment against the discriminator.
  StepReport step_adversarial(const PretextBatch& target_batch, const SupervisedBatch& source_batch,
                              const Tensor& target_images);
  // Supervised only (SRC on source data, TAR on target data).
  StepReport step_supervised(const SupervisedBatch& batch);
  // Dispatches on the configuration; pretext and target images may be empty
  // when unused.
  StepReport step(const PretextBatch* target_batch, const SupervisedBatch& source_batch, const Tensor* target_images);

  // Individual phases, exposed for verification.
  void zero_grad() { nets_.zero_grad(); }
  double pretext_phase(const PretextBatch& batch);
  void update_pretext();
  // Returns {L_main, L_adv on the source outputs (if any)}.
  std::pair<double, std::optional<double>> main_phase(const SupervisedBatch& batch, bool with_adversarial);
  double generator_phase(const Tensor& target_images);
  void update_encoder_and_main();
  double discriminator_phase(const Tensor& source_images, const Tensor& target_images);

  int iteration() const { return iter_; }
  double current_lr(double base) const;

 private:
  double adversarial_share(Domain domain) const;
  void check_accumulation(const PretextBatch& target_batch, const SupervisedBatch& source_batch,
                          const std::vector<std::vector<double>>& encoder_grads);

  Networks nets_;
  TrainConfig cfg_;
  Sgd opt_pretext_, opt_main_, opt_disc_;
  int iter_ = 0;
  int source_count_ = 0, target_count_ = 0;
};

// Gradient the encoder would receive from grad(L_main) + lambda_p grad(L_p),
// computed with two independent backward passes on copies of `nets`.
std::vector<std::vector<double>> reference_encoder_gradient(const Networks& nets, const TrainConfig& cfg,
                                                            const PretextBatch& target_batch,
                                                            const SupervisedBatch& source_batch);

struct TrainData {
  const Dataset* source_train = nullptr;
  const Dataset* target_train = nullptr;
  const Dataset* source_test = nullptr;
  const Dataset* target_test = nullptr;
};

struct EvalEntry {
  int iter = 0;
  MetricsRecord source;
  MetricsRecord target;
};

struct TrainResult {
  Networks networks;
  std::vector<StepReport> steps;
  std::vector<EvalEntry> evals;
};

struct TrainOutputs {
  std::filesystem::path dir;  // checkpoints and metrics.jsonl go here
  std::string config_hash;
};

// Full run: max_iters steps, evaluation every eval_every iterations (and at
// the end), best-by-target and last checkpoints when outputs are given.
TrainResult train(const TrainData& data, const TrainConfig& cfg, const TrainOutputs* outputs = nullptr,
                  std::function<void(const StepReport&)> on_step = {});

}  // namespace ssda
