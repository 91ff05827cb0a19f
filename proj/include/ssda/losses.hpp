#pragma once

#include <span>

#include "ssda/tensor.hpp"

namespace ssda {

inline constexpr int kIgnoreLabel = 255;

// Pixel/cell losses are averaged over supervised cells (mean) or summed over
// them (sum); either way the result is averaged over the batch.
enum class LossNormalization { mean, sum };

const char* to_string(LossNormalization norm);
LossNormalization parse_loss_normalization(const std::string& text);

struct LossWeights {
  double lambda_p = 1.0;
  double lambda_adv = 0.01;
  double lambda_d = 1.0;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Domain label for the discriminator: 0 = target, 1 = source.
enum class DomainLabel : int { target = 0, source = 1 };

inline DomainLabel flipped(DomainLabel z) {
  return z == DomainLabel::target ? DomainLabel::source : DomainLabel::target;
}

struct LossResult {
  double value = 0.0;
  Tensor grad;  // d(value)/d(logits), same shape as the logits
};

// Rotation loss over N x K x 1 x 1 logits. Rows come in groups of
// group_size copies of one image instance (4 rotations, or 4 rotations of one
// region); the loss averages the per-copy cross-entropy inside each group and
// then over groups.
LossResult pretext_loss(const Tensor& logits, std::span<const int> labels, int group_size = 4);

// Per-pixel cross-entropy on N x C x H x W logits with IGNORE-able labels
// (row-major N*H*W).
LossResult segmentation_loss(const Tensor& logits, std::span<const int> labels,
                             LossNormalization norm = LossNormalization::mean);

LossResult classification_loss(const Tensor& logits, std::span<const int> labels);

// Two-channel cross-entropy on discriminator output Z (N x 2 x H' x W'),
// softmax over channels; z names the true domain for every sample.
LossResult discriminator_loss(const Tensor& z_logits, DomainLabel z,
                              LossNormalization norm = LossNormalization::mean);

// Same as the discriminator loss with the domain flipped: the encoder is
// rewarded when D mistakes the domain.
LossResult adversarial_loss(const Tensor& z_logits, DomainLabel z,
                            LossNormalization norm = LossNormalization::mean);

double joint_objective(double main_loss, double pretext, const LossWeights& w);
double full_objective(double main_loss, double pretext, double adversarial, double discriminator,
                      const LossWeights& w);

}  // namespace ssda
