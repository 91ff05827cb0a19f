#include <cmath>

#include "doctest.h"
#include "ssda/error.hpp"
#include "ssda/experiment.hpp"
#include "ssda/training.hpp"
#include "support.hpp"

using namespace ssda;
using namespace ssda::testing;

namespace {

TrainConfig tiny_config(PretextMode mode = PretextMode::rot, bool adversarial = false) {
  TrainConfig c;
  c.arch = tiny_arch();
  c.pretext_mode = mode;
  c.adversarial = adversarial;
  c.batch_size_source = 4;
  c.batch_size_target = 4;
  c.max_iters = 6;
  c.eval_every = 3;
  c.seed = 5;
  return c;
}

struct Fixture {
  SyntheticPair pair = generate_synthetic_pair(small_spec());
  PretextDataset pool{PretextConfig{}, 17};

  Fixture() {
    pool = build_pretext_pool(pair.target_train, nullptr, PretextConfig{}, 17);
  }
  TrainData data() const { return {&pair.source_train, &pair.target_train, &pair.source_test, &pair.target_test}; }
  PretextBatch pretext(std::uint64_t draw) const { return pool.batch({draw % 20, (draw + 3) % 20}, draw); }
  SupervisedBatch source(std::size_t at) const {
    return make_supervised_batch(pair.source_train, {at % 24, (at + 5) % 24, (at + 11) % 24, (at + 17) % 24});
  }
  Tensor target_images(std::size_t at) const {
    return make_image_batch(pair.target_train, {(at + 1) % 24, (at + 7) % 24, (at + 13) % 24, (at + 19) % 24});
  }
};

Networks fresh(const TrainConfig& c, int classes = 4) {
  return build_networks(c.arch, c.task, c.pretext_labels(), classes, c.feature_tap, c.seed);
}

std::uint64_t digest(std::vector<Parameter*> a, const std::vector<Parameter*>& b = {}) {
  a.insert(a.end(), b.begin(), b.end());
  return digest_parameters(a);
}

std::vector<double> bn_stats(Networks& nets) {
  std::vector<double> out;
  for (auto* bn : nets.all_bn_layers()) {
    out.insert(out.end(), bn->state().running_mean.begin(), bn->state().running_mean.end());
    out.insert(out.end(), bn->state().running_var.begin(), bn->state().running_var.end());
  }
  return out;
}

}  // namespace

TEST_CASE("encoder gradient equals the sum of independent pretext and main passes") {
  Fixture f;
  TrainConfig c = tiny_config();
  c.weights.lambda_p = 0.7;
  Trainer t(fresh(c), c);
  for (int step = 0; step < 10; ++step) {
    const PretextBatch pb = f.pretext(step);
    const SupervisedBatch sb = f.source(3 * step);
    const auto reference = reference_encoder_gradient(t.networks(), c, pb, sb);
    t.step_alg1(pb, sb);
    const auto got = grads_of(t.networks().encoder_parameters());
    REQUIRE(got.size() == reference.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(max_relative_diff(got[i], reference[i]) < 1e-6);
  }
}

TEST_CASE("the built-in accumulation check runs without tripping") {
  Fixture f;
  TrainConfig c = tiny_config();
  c.debug_accumulation_check = true;
  c.debug_check_every = 1;
  CHECK_NOTHROW(train(f.data(), c));
}

TEST_CASE("lambda_p = 0 reduces the joint step to supervised training") {
  Fixture f;
  TrainConfig c = tiny_config();
  c.weights.lambda_p = 0.0;
  TrainConfig s = c;
  s.pretext_mode = PretextMode::none;
  Trainer joint(fresh(c), c), plain(fresh(c), s);
  for (int step = 0; step < 4; ++step) {
    joint.step_alg1(f.pretext(step), f.source(step));
    plain.step_supervised(f.source(step));
  }
  auto& a = joint.networks();
  auto& b = plain.networks();
  CHECK(digest(a.encoder_parameters(), a.main_parameters()) == digest(b.encoder_parameters(), b.main_parameters()));
}

TEST_CASE("P is updated from the pretext gradient before the main phase runs") {
  Fixture f;
  TrainConfig c = tiny_config();
  Trainer whole(fresh(c), c), phased(fresh(c), c);
  const PretextBatch pb = f.pretext(1);
  const SupervisedBatch sb = f.source(2);
  whole.step_alg1(pb, sb);

  phased.zero_grad();
  phased.pretext_phase(pb);
  const auto p_grads = grads_of(phased.networks().pretext_parameters());
  phased.update_pretext();
  const std::uint64_t p_after = digest(phased.networks().pretext_parameters());
  phased.main_phase(sb, false);
  CHECK(grads_of(phased.networks().pretext_parameters()) == p_grads);
  CHECK(digest(phased.networks().pretext_parameters()) == p_after);
  phased.update_encoder_and_main();
  CHECK(parameter_digest(whole.networks(), true) == parameter_digest(phased.networks(), true));
}

TEST_CASE("zero adversarial weights reduce the adversarial step to the joint step") {
  Fixture f;
  TrainConfig c = tiny_config(PretextMode::rot, true);
  c.weights.lambda_adv = 0.0;
  c.weights.lambda_d = 0.0;
  c.disc_optimizer.weight_decay = 0.0;
  TrainConfig j = c;
  j.adversarial = false;
  Trainer adv(fresh(c), c), joint(fresh(c), j);
  for (int step = 0; step < 4; ++step) {
    const StepReport r = adv.step_adversarial(f.pretext(step), f.source(step), f.target_images(step));
    CHECK_FALSE(r.loss_adv.has_value());
    joint.step_alg1(f.pretext(step), f.source(step));
  }
  CHECK(parameter_digest(adv.networks(), true) == parameter_digest(joint.networks(), true));
}

TEST_CASE("generator phase leaves D's accumulators alone and D phase freezes E, S and BN stats") {
  Fixture f;
  TrainConfig c = tiny_config(PretextMode::rot, true);
  c.weights.lambda_adv = 0.5;
  Trainer t(fresh(c), c);
  t.zero_grad();
  t.main_phase(f.source(0), true);
  t.generator_phase(f.target_images(0));
  for (const auto& g : grads_of(t.networks().discriminator_parameters()))
    for (double v : g) CHECK(v == 0.0);
  double es = 0.0;
  for (const auto& g : grads_of(t.networks().encoder_parameters()))
    for (double v : g) es += std::abs(v);
  CHECK(es > 0.0);

  auto& nets = t.networks();
  const std::uint64_t es_before = digest(nets.encoder_parameters(), nets.main_parameters());
  const std::uint64_t d_before = digest(nets.discriminator_parameters());
  const auto stats_before = bn_stats(nets);
  t.discriminator_phase(f.source(1).images, f.target_images(1));
  CHECK(digest(nets.encoder_parameters(), nets.main_parameters()) == es_before);
  CHECK(bn_stats(nets) == stats_before);
  CHECK(digest(nets.discriminator_parameters()) != d_before);
}

TEST_CASE("D loss stays near ln 2 when the domains are identical") {
  SyntheticShiftSpec spec = small_spec(Task::classification, 8);
  spec.shift = DomainShift{};
  const SyntheticPair pair = generate_synthetic_pair(spec);
  TrainConfig c = tiny_config(PretextMode::rot, true);
  c.max_iters = 40;
  c.eval_every = 40;
  c.disc_optimizer.lr = 0.01;
  std::vector<double> disc;
  train({&pair.source_train, &pair.target_train, nullptr, nullptr}, c,
        nullptr, [&](const StepReport& r) { disc.push_back(*r.loss_disc); });
  double tail = 0.0;
  for (std::size_t i = disc.size() - 10; i < disc.size(); ++i) tail += disc[i] / 10;
  CHECK(std::abs(tail - std::log(2.0)) < 0.05 * std::log(2.0));
}

TEST_CASE("lr = 0 changes only BN running statistics") {
  Fixture f;
  TrainConfig c = tiny_config(PretextMode::rot, true);
  c.optimizer.lr = 0.0;
  c.disc_optimizer.lr = 0.0;
  Networks start = fresh(c);
  const TrainResult r = train(f.data(), c);
  Networks end = r.networks;
  CHECK(parameter_digest(end, false) == parameter_digest(start, false));
  CHECK(parameter_digest(end, true) != parameter_digest(start, true));
}

TEST_CASE("max_iters = 0 returns the initial networks and still evaluates") {
  Fixture f;
  TrainConfig c = tiny_config();
  c.max_iters = 0;
  TrainResult r = train(f.data(), c);
  Networks start = fresh(c);
  CHECK(parameter_digest(r.networks, true) == parameter_digest(start, true));
  CHECK(r.steps.empty());
  CHECK(r.evals.size() == 1);
}

TEST_CASE("training is deterministic in the seed") {
  Fixture f;
  TrainConfig c = tiny_config(PretextMode::rot, true);
  TrainResult a = train(f.data(), c);
  TrainResult b = train(f.data(), c);
  CHECK(parameter_digest(a.networks, true) == parameter_digest(b.networks, true));
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].to_json() == b.steps[i].to_json());
  c.seed = 6;
  TrainResult d = train(f.data(), c);
  CHECK(parameter_digest(a.networks, true) != parameter_digest(d.networks, true));
}

TEST_CASE("target labels are refused by the main loss outside the TAR baseline") {
  Fixture f;
  const SupervisedBatch tb = make_supervised_batch(f.pair.target_train, {0, 1});
  CHECK(tb.domain == Domain::target);
  const Tensor logits(2, 4, 1, 1, 0.0);
  const auto before = target_label_reads();
  CHECK_THROWS_AS(main_task_loss(logits, tb, Task::classification, LossNormalization::mean, false), TaintError);
  CHECK(target_label_reads() == before + 1);
  CHECK_NOTHROW(main_task_loss(logits, tb, Task::classification, LossNormalization::mean, true));
}

TEST_CASE("adaptation runs never read target labels and ignore their values") {
  for (const char* preset : {"rot", "rot+adv", "mixrot", "sprot+adv"}) {
    CAPTURE(preset);
    ExperimentConfig cfg;
    cfg.data = small_spec();
    apply_preset(cfg, preset);
    cfg.train.arch = tiny_arch();
    cfg.train.batch_size_source = cfg.train.batch_size_target = 4;
    cfg.train.max_iters = 4;
    cfg.train.eval_every = 4;
    LoadedData data = in_memory_data(cfg.data);
    LoadedData scrambled = data;
    for (auto& s : scrambled.target_train.samples) s.class_id = (s.class_id + 1) % 4;

    const auto reads = target_label_reads();
    const TrainResult a = train({&data.source_train, &data.target_train, nullptr, nullptr}, cfg.train);
    const TrainResult b = train({&scrambled.source_train, &scrambled.target_train, nullptr, nullptr}, cfg.train);
    CHECK(target_label_reads() == reads);
    Networks na = a.networks, nb = b.networks;
    CHECK(parameter_digest(na, true) == parameter_digest(nb, true));
  }

  ExperimentConfig tar;
  tar.data = small_spec();
  apply_preset(tar, "tar");
  tar.train.arch = tiny_arch();
  tar.train.max_iters = 1;
  LoadedData data = in_memory_data(tar.data);
  const auto reads = target_label_reads();
  train({&data.source_train, &data.target_train, nullptr, nullptr}, tar.train);
  CHECK(target_label_reads() == reads + 1);
}

TEST_CASE("invalid training configurations are rejected") {
  TrainConfig c = tiny_config();
  c.max_iters = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.crop_size = 6;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.target_supervised = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.batch_size_target = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("an optimizer step with lr = 0 leaves parameters unchanged") {
  Parameter p("w", {4});
  p.value = {0.5, -1.0, 2.0, 0.0};
  p.grad = {1.0, 2.0, -3.0, 4.0};
  const auto before = p.value;
  Sgd opt({0.0, 0.9, 5e-4});
  for (int i = 0; i < 3; ++i) opt.step({&p});
  CHECK(p.value == before);
  Sgd moving({0.1, 0.0, 0.0});
  moving.step({&p});
  CHECK(p.value[1] == doctest::Approx(-1.2));
}
