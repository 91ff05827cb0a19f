#include <cmath>

#include "doctest.h"
#include "ssda/bncal.hpp"
#include "ssda/error.hpp"
#include "ssda/metrics.hpp"
#include "support.hpp"

using namespace ssda;
using namespace ssda::testing;

namespace {

struct Fixture {
  SyntheticPair pair = generate_synthetic_pair(small_spec(Task::classification, 16));
  Networks nets = build_networks(tiny_arch(), Task::classification, 4, 4, FeatureTap::middle, 12);

  Fixture() {
    // Source-domain statistics, as after supervised training.
    for (int i = 0; i < 4; ++i)
      forward_main(nets, to_tensor(pair.source_train, {std::size_t(4 * i), std::size_t(4 * i + 1),
                                                       std::size_t(4 * i + 2), std::size_t(4 * i + 3)}),
                   Mode::train);
  }
};

std::vector<BatchNorm2d*> calibrated(Networks& nets) {
  auto layers = nets.encoder.bn_layers();
  for (auto* bn : nets.main.bn_layers()) layers.push_back(bn);
  return layers;
}

// Largest gap between running stats and the exact statistics. Means are
// measured against the channel's standard deviation, variances against
// themselves.
double stat_gap(Networks& nets, const std::vector<LayerStats>& exact) {
  auto layers = calibrated(nets);
  REQUIRE(layers.size() == exact.size());
  double gap = 0.0;
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (std::size_t c = 0; c < exact[l].mean.size(); ++c) {
      const double sd = std::sqrt(exact[l].variance[c]);
      gap = std::max(gap, std::abs(layers[l]->state().running_mean[c] - exact[l].mean[c]) / sd);
      gap = std::max(gap, std::abs(layers[l]->state().running_var[c] - exact[l].variance[c]) / exact[l].variance[c]);
    }
  return gap;
}

Dataset first(const Dataset& ds, std::size_t n) {
  Dataset out = ds;
  out.samples.resize(n);
  return out;
}

}  // namespace

TEST_CASE("oracle statistics of the first BN layer match a hand computation on two images") {
  Fixture f;
  const Dataset two = first(f.pair.target_train, 2);
  const auto exact = bn_stat_oracle(f.nets, two);
  auto& conv = std::get<Conv2d>(f.nets.encoder.stages()[0]->layers()[0]);
  Conv2d copy = conv;
  const Tensor x = to_tensor(two, {0, 1});
  const Tensor y = copy.forward(x, Mode::eval);
  for (int c = 0; c < y.c(); ++c) {
    long double s = 0, s2 = 0;
    const double m = 2.0 * y.plane();
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < y.plane(); ++i) s += y.plane_ptr(n, c)[i];
    const long double mean = s / m;
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < y.plane(); ++i) s2 += std::pow(y.plane_ptr(n, c)[i] - mean, 2);
    CHECK(exact[0].mean[c] == doctest::Approx(static_cast<double>(mean)).epsilon(1e-10));
    CHECK(exact[0].variance[c] == doctest::Approx(static_cast<double>(s2 / m)).epsilon(1e-10));
  }
}

TEST_CASE("oracle statistics are invariant to duplicating the dataset") {
  Fixture f;
  const Dataset ds = first(f.pair.target_train, 10);
  Dataset twice = ds;
  twice.samples.insert(twice.samples.end(), ds.samples.begin(), ds.samples.end());
  const auto a = bn_stat_oracle(f.nets, ds, 4);
  const auto b = bn_stat_oracle(f.nets, twice, 7);
  for (std::size_t l = 0; l < a.size(); ++l) {
    CHECK(max_relative_diff(a[l].mean, b[l].mean) < 1e-10);
    CHECK(max_relative_diff(a[l].variance, b[l].variance) < 1e-10);
  }
}

TEST_CASE("one full-batch pass with momentum 1 reproduces the oracle") {
  Fixture f;
  const Dataset ds = first(f.pair.target_train, 12);
  const auto exact = bn_stat_oracle(f.nets, ds);
  calibrate(f.nets, ds, {1, 12, 1.0, 0});
  CHECK(stat_gap(f.nets, exact) < 1e-10);

  // Running stats then equal the full-batch statistics, so eval reproduces
  // the train-mode forward of that batch.
  std::vector<std::size_t> all(12);
  for (std::size_t i = 0; i < 12; ++i) all[i] = i;
  const Tensor x = to_tensor(ds, all);
  Networks copy = f.nets;
  const Tensor eval = forward_main(f.nets, x, Mode::eval);
  const Tensor train = forward_main(copy, x, Mode::train_frozen_stats);
  for (std::size_t i = 0; i < eval.size(); ++i)
    CHECK(eval.values()[i] == doctest::Approx(train.values()[i]).epsilon(1e-9));
}

TEST_CASE("the first calibration batch replaces the reset statistics") {
  Fixture f;
  const Dataset ds = first(f.pair.target_train, 12);
  const auto exact = bn_stat_oracle(f.nets, ds);
  calibrate(f.nets, ds, {1, 12, 0.1, 0});
  CHECK(stat_gap(f.nets, exact) < 1e-10);
}

TEST_CASE("recalibrating an already calibrated network is stable") {
  Fixture f;
  const Dataset ds = first(f.pair.target_train, 12);
  calibrate(f.nets, ds, {1, 12, 1.0, 0});
  const auto once = bn_stat_oracle(f.nets, ds);
  calibrate(f.nets, ds, {3, 12, 1.0, 0});
  CHECK(stat_gap(f.nets, once) < 1e-3);
}

TEST_CASE("ten passes land within 2% of the exact statistics and the gap shrinks with passes") {
  Fixture f;
  const Dataset target = generate_synthetic_pair(small_spec(Task::classification, 125)).target_train;
  const auto exact = bn_stat_oracle(f.nets, target);
  std::vector<double> gaps;
  for (int passes : {1, 5, 10}) {
    double worst = 0.0, mean = 0.0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Networks nets = f.nets;
      CalibrationConfig cfg;
      cfg.passes = passes;
      cfg.seed = seed;
      calibrate(nets, target, cfg);
      const double gap = stat_gap(nets, exact);
      worst = std::max(worst, gap);
      mean += gap / 4;
    }
    if (passes == 10) CHECK(worst <= 0.02);
    gaps.push_back(mean);
  }
  INFO("mean gaps " << gaps[0] << " " << gaps[1] << " " << gaps[2]);
  CHECK(gaps[0] >= gaps[1]);
  CHECK(gaps[1] >= gaps[2]);
}

TEST_CASE("calibration leaves learnable parameters, P and D untouched") {
  Fixture f;
  const std::uint64_t learnable = parameter_digest(f.nets, false);
  const std::uint64_t with_stats = parameter_digest(f.nets, true);
  const auto p = values_of(f.nets.pretext_parameters());
  const auto d = values_of(f.nets.discriminator_parameters());
  calibrate(f.nets, f.pair.target_train, {});
  CHECK(parameter_digest(f.nets, false) == learnable);
  CHECK(parameter_digest(f.nets, true) != with_stats);
  CHECK(values_of(f.nets.pretext_parameters()) == p);
  CHECK(values_of(f.nets.discriminator_parameters()) == d);
  for (auto* bn : f.nets.all_bn_layers()) CHECK(bn->state().momentum == 0.1);
}

TEST_CASE("calibration on shifted data changes predictions and is deterministic") {
  Fixture f;
  Networks a = f.nets, b = f.nets;
  calibrate(a, f.pair.target_train, {5, 16, 0.1, 9});
  calibrate(b, f.pair.target_train, {5, 16, 0.1, 9});
  CHECK(parameter_digest(a, true) == parameter_digest(b, true));
  const Tensor x = to_tensor(f.pair.target_test, {0, 1, 2, 3});
  CHECK_FALSE(forward_main(a, x, Mode::eval) == forward_main(f.nets, x, Mode::eval));
}

TEST_CASE("invalid calibration settings are rejected") {
  Fixture f;
  CHECK_THROWS_AS(calibrate(f.nets, f.pair.target_train, {0, 16, 0.1, 0}), ConfigError);
  CHECK_THROWS_AS(calibrate(f.nets, f.pair.target_train, {1, 0, 0.1, 0}), ConfigError);
  CHECK_THROWS_AS(calibrate(f.nets, f.pair.target_train, {1, 16, 0.0, 0}), ConfigError);
  CHECK_THROWS_AS(calibrate(f.nets, first(f.pair.target_train, 0), {}), ConfigError);
}
