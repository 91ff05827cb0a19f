#include "ssda/training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>

#include "ssda/error.hpp"

namespace ssda {

void TrainConfig::validate() const {
  weights.validate();
  optimizer.validate();
  if (adversarial) disc_optimizer.validate();
  if (batch_size_source < 1 || batch_size_target < 1) throw ConfigError("batch sizes must be >= 1");
  if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (crop_size < 8) throw ConfigError("crop_size must be >= 8");
  if (poly_power <= 0.0) throw ConfigError("poly_power must be > 0");
  if (debug_check_every < 1) throw ConfigError("debug_check_every must be >= 1");
  if (target_supervised && (pretext_mode != PretextMode::none || adversarial))
    throw ConfigError("target_supervised (TAR) runs plain supervised training; pretext and adversarial must be off");
}

namespace {

std::atomic<std::uint64_t> g_target_label_reads{0};

double l2_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const auto* p : params)
    for (double g : p->grad) s += g * g;
  return std::sqrt(s);
}

std::vector<std::vector<double>> collect_grads(const std::vector<Parameter*>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(p->grad);
  return out;
}

template <typename... Groups>
std::vector<Parameter*> concat(Groups... groups) {
  std::vector<Parameter*> out;
  (out.insert(out.end(), groups.begin(), groups.end()), ...);
  return out;
}

}  // namespace

std::uint64_t target_label_reads() { return g_target_label_reads.load(); }

SupervisedBatch make_supervised_batch(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  SupervisedBatch b;
  b.images = to_tensor(dataset, indices);
  b.domain = dataset.domain;
  for (auto i : indices) {
    const auto& s = dataset.samples.at(i);
    if (dataset.task == Task::classification)
      b.labels.push_back(s.class_id);
    else
      b.labels.insert(b.labels.end(), s.label_map.begin(), s.label_map.end());
  }
  return b;
}

Tensor make_image_batch(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  return to_tensor(dataset, indices);
}

LossResult main_task_loss(const Tensor& logits, const SupervisedBatch& batch, Task task, LossNormalization norm,
                          bool allow_target_labels) {
  if (batch.domain == Domain::target) {
    ++g_target_label_reads;
    if (!allow_target_labels) throw TaintError("target-domain labels reached a training loss");
  }
  if (task == Task::classification) return classification_loss(logits, batch.labels);
  return segmentation_loss(logits, batch.labels, norm);
}

nlohmann::json StepReport::to_json() const {
  nlohmann::json losses = nlohmann::json::object();
  auto put = [&](const char* key, const std::optional<double>& v) {
    losses[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  put("pretext", loss_pretext);
  put("main", loss_main);
  put("adv", loss_adv);
  put("disc", loss_disc);
  return {{"iter", iter}, {"losses", losses}, {"grad_norm_encoder", grad_norm_encoder}};
}

// ---------------------------------------------------------------- Trainer

Trainer::Trainer(Networks nets, TrainConfig cfg)
    : nets_(std::move(nets)),
      cfg_(std::move(cfg)),
      opt_pretext_(cfg_.optimizer),
      opt_main_(cfg_.optimizer),
      opt_disc_(cfg_.disc_optimizer) {
  cfg_.validate();
  if (nets_.task != cfg_.task) throw ConfigError("network task does not match the configuration");
  if (cfg_.pretext_mode != PretextMode::none && nets_.pretext_labels != cfg_.pretext_labels())
    throw ConfigError("pretext head size does not match the pretext mode");
}

double Trainer::current_lr(double base) const {
  if (cfg_.schedule == LrSchedule::constant || cfg_.max_iters == 0) return base;
  const double progress = static_cast<double>(iter_) / cfg_.max_iters;
  return base * std::pow(std::max(0.0, 1.0 - progress), cfg_.poly_power);
}

double Trainer::adversarial_share(Domain domain) const {
  if (cfg_.adversarial_target_only) return domain == Domain::target ? 1.0 : 0.0;
  // Phases driven directly, outside step_adversarial, fall back to the configured batch sizes.
  const double source = source_count_ > 0 ? source_count_ : cfg_.batch_size_source;
  const double target = target_count_ > 0 ? target_count_ : cfg_.batch_size_target;
  return (domain == Domain::source ? source : target) / (source + target);
}

double Trainer::pretext_phase(const PretextBatch& batch) {
  Tensor logits = forward_pretext(nets_, batch.patches, Mode::train);
  auto loss = pretext_loss(logits, batch.labels, batch.group_size);
  loss.grad *= cfg_.weights.lambda_p;
  backward_pretext(nets_, loss.grad, true);
  return loss.value;
}

void Trainer::update_pretext() { opt_pretext_.step(nets_.pretext_parameters(), current_lr(cfg_.optimizer.lr)); }

std::pair<double, std::optional<double>> Trainer::main_phase(const SupervisedBatch& batch, bool with_adversarial) {
  Tensor logits = forward_main(nets_, batch.images, Mode::train);
  auto loss = main_task_loss(logits, batch, cfg_.task, cfg_.loss_normalization, cfg_.target_supervised);
  std::optional<double> adv;
  if (with_adversarial) {
    const Tensor probs = softmax_channels(logits);
    const Tensor z = forward_discriminator(nets_, probs, Mode::train);
    auto la = adversarial_loss(z, DomainLabel::source, cfg_.loss_normalization);
    la.grad *= cfg_.weights.lambda_adv * adversarial_share(Domain::source);
    const Tensor d_probs = backward_discriminator(nets_, la.grad, false);
    loss.grad += softmax_channels_backward(probs, d_probs);
    adv = la.value;
  }
  backward_main(nets_, loss.grad, true);
  return {loss.value, adv};
}

double Trainer::generator_phase(const Tensor& target_images) {
  Tensor logits = forward_main(nets_, target_images, Mode::train);
  const Tensor probs = softmax_channels(logits);
  const Tensor z = forward_discriminator(nets_, probs, Mode::train);
  auto la = adversarial_loss(z, DomainLabel::target, cfg_.loss_normalization);
  la.grad *= cfg_.weights.lambda_adv * adversarial_share(Domain::target);
  const Tensor d_probs = backward_discriminator(nets_, la.grad, false);
  backward_main(nets_, softmax_channels_backward(probs, d_probs), true);
  return la.value;
}

void Trainer::update_encoder_and_main() {
  opt_main_.step(concat(nets_.encoder_parameters(), nets_.main_parameters()), current_lr(cfg_.optimizer.lr));
}

double Trainer::discriminator_phase(const Tensor& source_images, const Tensor& target_images) {
  const double total = source_images.n() + target_images.n();
  double value = 0.0;
  for (const auto& [images, domain] :
       {std::pair{&source_images, DomainLabel::source}, std::pair{&target_images, DomainLabel::target}}) {
    const Tensor probs = softmax_channels(forward_main(nets_, *images, Mode::train_frozen_stats));
    const Tensor z = forward_discriminator(nets_, probs, Mode::train);
    auto ld = discriminator_loss(z, domain, cfg_.loss_normalization);
    const double share = images->n() / total;
    ld.grad *= cfg_.weights.lambda_d * share;
    backward_discriminator(nets_, ld.grad, true);
    value += share * ld.value;
  }
  opt_disc_.step(nets_.discriminator_parameters(), current_lr(cfg_.disc_optimizer.lr));
  return value;
}

StepReport Trainer::step_alg1(const PretextBatch& target_batch, const SupervisedBatch& source_batch) {
  if (cfg_.pretext_mode == PretextMode::none) throw ConfigError("step_alg1 needs a pretext task");
  const bool check = cfg_.debug_accumulation_check && iter_ % cfg_.debug_check_every == 0;
  std::vector<std::vector<double>> reference;
  if (check) reference = reference_encoder_gradient(nets_, cfg_, target_batch, source_batch);

  StepReport r;
  r.iter = iter_;
  zero_grad();
  r.loss_pretext = pretext_phase(target_batch);
  update_pretext();
  r.loss_main = main_phase(source_batch, false).first;
  r.grad_norm_encoder = l2_norm(nets_.encoder_parameters());
  if (check) check_accumulation(target_batch, source_batch, reference);
  update_encoder_and_main();
  ++iter_;
  return r;
}

StepReport Trainer::step_adversarial(const PretextBatch& target_batch, const SupervisedBatch& source_batch,
                                     const Tensor& target_images) {
  if (!cfg_.adversarial) throw ConfigError("step_adversarial needs adversarial = true");
  source_count_ = source_batch.images.n();
  target_count_ = target_images.n();
  const bool generator = cfg_.weights.lambda_adv > 0.0;

  StepReport r;
  r.iter = iter_;
  zero_grad();
  if (cfg_.pretext_mode != PretextMode::none) {
    r.loss_pretext = pretext_phase(target_batch);
    update_pretext();
  }
  const auto [main_loss, adv_source] = main_phase(source_batch, generator && !cfg_.adversarial_target_only);
  r.loss_main = main_loss;
  if (generator) {
    const double adv_target = generator_phase(target_images);
    r.loss_adv = adv_source ? adversarial_share(Domain::source) * *adv_source +
                                  adversarial_share(Domain::target) * adv_target
                            : adv_target;
  }
  r.grad_norm_encoder = l2_norm(nets_.encoder_parameters());
  update_encoder_and_main();
  r.loss_disc = discriminator_phase(source_batch.images, target_images);
  ++iter_;
  return r;
}

StepReport Trainer::step_supervised(const SupervisedBatch& batch) {
  StepReport r;
  r.iter = iter_;
  zero_grad();
  r.loss_main = main_phase(batch, false).first;
  r.grad_norm_encoder = l2_norm(nets_.encoder_parameters());
  update_encoder_and_main();
  ++iter_;
  return r;
}

StepReport Trainer::step(const PretextBatch* target_batch, const SupervisedBatch& source_batch,
                         const Tensor* target_images) {
  if (cfg_.adversarial) {
    static const PretextBatch kNoPretext{};
    if (!target_images) throw ConfigError("adversarial step needs target images");
    if (cfg_.pretext_mode != PretextMode::none && !target_batch) throw ConfigError("missing pretext batch");
    return step_adversarial(target_batch ? *target_batch : kNoPretext, source_batch, *target_images);
  }
  if (cfg_.pretext_mode != PretextMode::none) {
    if (!target_batch) throw ConfigError("missing pretext batch");
    return step_alg1(*target_batch, source_batch);
  }
  return step_supervised(source_batch);
}

std::vector<std::vector<double>> reference_encoder_gradient(const Networks& nets, const TrainConfig& cfg,
                                                            const PretextBatch& target_batch,
                                                            const SupervisedBatch& source_batch) {
  Networks pretext_copy = nets;
  pretext_copy.zero_grad();
  Tensor logits = forward_pretext(pretext_copy, target_batch.patches, Mode::train);
  auto lp = pretext_loss(logits, target_batch.labels, target_batch.group_size);
  lp.grad *= cfg.weights.lambda_p;
  backward_pretext(pretext_copy, lp.grad, true);

  Networks main_copy = nets;
  main_copy.zero_grad();
  Tensor main_logits = forward_main(main_copy, source_batch.images, Mode::train);
  auto lm = main_task_loss(main_logits, source_batch, cfg.task, cfg.loss_normalization, cfg.target_supervised);
  backward_main(main_copy, lm.grad, true);

  auto out = collect_grads(main_copy.encoder_parameters());
  const auto from_pretext = collect_grads(pretext_copy.encoder_parameters());
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t k = 0; k < out[i].size(); ++k) out[i][k] += from_pretext[i][k];
  return out;
}

void Trainer::check_accumulation(const PretextBatch&, const SupervisedBatch&,
                                 const std::vector<std::vector<double>>& reference) {
  const auto params = nets_.encoder_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    double diff = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < reference[i].size(); ++k) {
      diff = std::max(diff, std::abs(params[i]->grad[k] - reference[i][k]));
      norm = std::max(norm, std::abs(reference[i][k]));
    }
    if (diff > 1e-6 * std::max(norm, 1e-12))
      throw NumericError("encoder gradient accumulation mismatch in " + params[i]->name + " at iteration " +
                         std::to_string(iter_));
  }
}

// -------------------------------------------------------------- train()

namespace {

class JsonlLog {
 public:
  explicit JsonlLog(const std::filesystem::path* path) {
    if (path) {
      out_.open(*path, std::ios::trunc);
      if (!out_) throw IoError("cannot write " + path->string());
    }
  }
  void write(const nlohmann::json& j) {
    if (out_.is_open()) out_ << j.dump() << '\n';
  }

 private:
  std::ofstream out_;
};

void require_dataset(const Dataset* ds, const char* what) {
  if (!ds || ds->samples.empty()) throw ConfigError(std::string("training needs a non-empty ") + what + " dataset");
}

}  // namespace

TrainResult train(const TrainData& data, const TrainConfig& cfg, const TrainOutputs* outputs,
                  std::function<void(const StepReport&)> on_step) {
  cfg.validate();
  const bool uses_target_images = cfg.pretext_mode != PretextMode::none || cfg.adversarial;
  const Dataset* supervised = cfg.target_supervised ? data.target_train : data.source_train;
  require_dataset(supervised, cfg.target_supervised ? "target_train" : "source_train");
  if (uses_target_images) require_dataset(data.target_train, "target_train");
  if (supervised->task != cfg.task) throw ConfigError("dataset task does not match the configuration");

  const auto& first = supervised->samples.front().image;
  ArchitectureSpec arch = cfg.arch;
  arch.input_channels = first.channels;
  const int pretext_labels = cfg.pretext_mode == PretextMode::none ? 4 : cfg.pretext_labels();
  Trainer trainer(build_networks(arch, cfg.task, pretext_labels, supervised->num_classes, cfg.feature_tap, cfg.seed),
                  cfg);

  std::optional<PretextDataset> pool;
  std::optional<BatchIterator> pretext_iter, target_iter;
  if (cfg.pretext_mode != PretextMode::none) {
    pool.emplace(build_pretext_pool(*data.target_train,
                                    cfg.pretext_mode == PretextMode::mixrot ? data.source_train : nullptr,
                                    cfg.pretext(), splitmix64(cfg.seed ^ 0x70)));
    pretext_iter.emplace(pool->num_images(), cfg.batch_size_target, splitmix64(cfg.seed ^ 0x71), true);
  }
  if (cfg.adversarial) target_iter.emplace(data.target_train->size(), cfg.batch_size_target, splitmix64(cfg.seed ^ 0x72), true);
  BatchIterator source_iter(supervised->size(), cfg.batch_size_source, splitmix64(cfg.seed ^ 0x73), true);

  std::optional<std::filesystem::path> log_path;
  if (outputs) {
    std::filesystem::create_directories(outputs->dir);
    log_path = outputs->dir / "metrics.jsonl";
  }
  JsonlLog log(log_path ? &*log_path : nullptr);
  const CheckpointMeta meta{outputs ? outputs->config_hash : std::string{}, {}};

  TrainResult result{Networks{}, {}, {}};
  double best_target = -1.0;

  auto run_eval = [&](int iter) {
    EvalEntry e;
    e.iter = iter;
    auto& nets = trainer.networks();
    if (data.source_test && !data.source_test->samples.empty()) {
      e.source = evaluate(nets, *data.source_test);
      log.write({{"iter", iter}, {"eval", e.source.to_json()}});
    }
    if (data.target_test && !data.target_test->samples.empty()) {
      e.target = evaluate(nets, *data.target_test);
      log.write({{"iter", iter}, {"eval", e.target.to_json()}});
    }
    if (outputs) {
      save_checkpoint(outputs->dir / "last.ckpt", nets, meta);
      const double t = e.target.units > 0 ? e.target.primary() : -1.0;
      if (t > best_target) {
        best_target = t;
        save_checkpoint(outputs->dir / "best.ckpt", nets, meta);
      }
    }
    result.evals.push_back(std::move(e));
  };

  if (cfg.max_iters == 0) run_eval(0);

  for (int i = 0; i < cfg.max_iters; ++i) {
    const auto src_idx = *source_iter.next();
    const SupervisedBatch source_batch = make_supervised_batch(*supervised, src_idx);
    std::optional<PretextBatch> pretext_batch;
    if (pool) pretext_batch = pool->batch(*pretext_iter->next(), static_cast<std::uint64_t>(i));
    std::optional<Tensor> target_images;
    if (target_iter) target_images = make_image_batch(*data.target_train, *target_iter->next());

    StepReport report;
    try {
      report = trainer.step(pretext_batch ? &*pretext_batch : nullptr, source_batch,
                            target_images ? &*target_images : nullptr);
      for (const auto& v : {report.loss_pretext, report.loss_main, report.loss_adv, report.loss_disc})
        if (v && !std::isfinite(*v)) throw NumericError("non-finite loss");
      if (!std::isfinite(report.grad_norm_encoder)) throw NumericError("non-finite encoder gradient");
    } catch (const NumericError& err) {
      log.write({{"iter", i}, {"error", err.what()}});
      throw NumericError(std::string("training diverged at iteration ") + std::to_string(i) + ": " + err.what());
    }
    log.write(report.to_json());
    if (on_step) on_step(report);
    result.steps.push_back(report);
    if ((i + 1) % cfg.eval_every == 0 || i + 1 == cfg.max_iters) run_eval(i + 1);
  }

  result.networks = std::move(trainer.networks());
  return result;
}

}  // namespace ssda
