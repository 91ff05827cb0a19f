#pragma once

// Finite-difference scenarios shared by the gradient unit tests and the
// acceptance binary. Every scenario runs BN in eval mode after a few
// train-mode warm-up passes so that running statistics are non-trivial.

#include <vector>

#include "ssda/gradcheck.hpp"
#include "ssda/losses.hpp"
#include "ssda/model.hpp"
#include "support.hpp"

namespace ssda::testing {

inline void warm_bn(Networks& nets, int size, std::uint64_t seed) {
  for (int i = 0; i < 3; ++i) forward_main(nets, random_tensor(4, 3, size, size, seed + i, 0.0, 1.0), Mode::train);
}

inline std::vector<int> rotation_labels(int groups) {
  std::vector<int> labels;
  for (int g = 0; g < groups; ++g)
    for (int r = 0; r < 4; ++r) labels.push_back(r);
  return labels;
}

inline std::vector<int> random_label_map(int n, int h, int w, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> labels(static_cast<std::size_t>(n) * h * w);
  for (auto& v : labels) {
    const int draw = uniform_int(rng, 0, classes);
    v = draw == classes ? kIgnoreLabel : draw;
  }
  return labels;
}

// E + P under the rotation loss.
inline GradCheckReport check_encoder_pretext(FeatureTap tap, Task task, std::uint64_t seed,
                                             const GradCheckOptions& opt = {}) {
  const int classes = 3;
  Networks nets = build_networks(tiny_arch(), task, 4, classes, tap, seed);
  warm_bn(nets, 16, seed + 10);
  const Tensor patches = random_tensor(8, 3, 8, 8, seed + 20, 0.0, 1.0);
  const auto labels = rotation_labels(2);

  auto loss = [&] {
    const Tensor logits = forward_pretext(nets, patches, Mode::eval);
    return LossProbe{pretext_loss(logits, labels).value, activation_pattern(nets)};
  };
  nets.zero_grad();
  const auto l = pretext_loss(forward_pretext(nets, patches, Mode::eval), labels);
  backward_pretext(nets, l.grad, true);

  auto params = nets.encoder_parameters();
  for (auto* p : nets.pretext_parameters()) params.push_back(p);
  return gradient_check(params, loss, opt);
}

// E + S under the main-task loss.
inline GradCheckReport check_encoder_main(Task task, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  const int classes = 3;
  const int size = task == Task::classification ? 16 : 12;
  Networks nets = build_networks(tiny_arch(), task, 4, classes, FeatureTap::middle, seed);
  warm_bn(nets, size, seed + 10);
  const Tensor images = random_tensor(3, 3, size, size, seed + 20, 0.0, 1.0);
  const std::vector<int> labels = task == Task::classification ? std::vector<int>{0, 2, 1}
                                                               : random_label_map(3, size, size, classes, seed + 30);
  auto main_loss = [&](const Tensor& logits) {
    return task == Task::classification ? classification_loss(logits, labels) : segmentation_loss(logits, labels);
  };
  auto loss = [&] {
    const Tensor logits = forward_main(nets, images, Mode::eval);
    return LossProbe{main_loss(logits).value, activation_pattern(nets)};
  };
  nets.zero_grad();
  const auto l = main_loss(forward_main(nets, images, Mode::eval));
  backward_main(nets, l.grad, true);

  auto params = nets.encoder_parameters();
  for (auto* p : nets.main_parameters()) params.push_back(p);
  return gradient_check(params, loss, opt);
}

// E + S + D: the adversarial loss on a target batch plus the discriminator
// loss on a source batch, through softmax probabilities of S's output.
inline GradCheckReport check_encoder_main_discriminator(Task task, std::uint64_t seed,
                                                        const GradCheckOptions& opt = {}) {
  const int classes = 3;
  const int size = task == Task::classification ? 16 : 24;
  Networks nets = build_networks(tiny_arch(), task, 4, classes, FeatureTap::middle, seed);
  warm_bn(nets, size, seed + 10);
  const Tensor target = random_tensor(2, 3, size, size, seed + 20, 0.0, 1.0);
  const Tensor source = random_tensor(2, 3, size, size, seed + 21, 0.0, 1.0);

  auto loss = [&] {
    const Tensor zt = forward_discriminator(nets, softmax_channels(forward_main(nets, target, Mode::eval)), Mode::eval);
    const std::uint64_t pt = activation_pattern(nets);
    const Tensor zs = forward_discriminator(nets, softmax_channels(forward_main(nets, source, Mode::eval)), Mode::eval);
    const double value =
        adversarial_loss(zt, DomainLabel::target).value + discriminator_loss(zs, DomainLabel::source).value;
    return LossProbe{value, combine_patterns(pt, activation_pattern(nets))};
  };

  nets.zero_grad();
  auto pass = [&](const Tensor& images, bool adversarial) {
    const Tensor probs = softmax_channels(forward_main(nets, images, Mode::eval));
    const Tensor z = forward_discriminator(nets, probs, Mode::eval);
    const auto l =
        adversarial ? adversarial_loss(z, DomainLabel::target) : discriminator_loss(z, DomainLabel::source);
    const Tensor d_probs = backward_discriminator(nets, l.grad, true);
    backward_main(nets, softmax_channels_backward(probs, d_probs), true);
  };
  pass(target, true);
  pass(source, false);

  auto params = nets.encoder_parameters();
  for (auto* p : nets.main_parameters()) params.push_back(p);
  for (auto* p : nets.discriminator_parameters()) params.push_back(p);
  return gradient_check(params, loss, opt);
}

}  // namespace ssda::testing
