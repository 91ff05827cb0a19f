#include "ssda/losses.hpp"

#include <cmath>
#include <string>

#include "ssda/error.hpp"

namespace ssda {

const char* to_string(LossNormalization norm) { return norm == LossNormalization::mean ? "mean" : "sum"; }

LossNormalization parse_loss_normalization(const std::string& text) {
  if (text == "mean") return LossNormalization::mean;
  if (text == "sum") return LossNormalization::sum;
  throw ConfigError("unknown loss normalization '" + text + "'");
}

void LossWeights::validate() const {
  if (!(lambda_p >= 0.0) || !(lambda_adv >= 0.0) || !(lambda_d >= 0.0))
    throw ConfigError("loss weights must be non-negative");
}

namespace {

// Cross-entropy of one softmax column at (n, y, x); writes softmax - onehot
// scaled by `scale` into grad.
double cell_cross_entropy(const Tensor& logits, Tensor& grad, int n, int y, int x, int label, double scale) {
  const int classes = logits.c();
  double mx = logits.at(n, 0, y, x);
  for (int c = 1; c < classes; ++c) mx = std::max(mx, logits.at(n, c, y, x));
  double z = 0.0;
  for (int c = 0; c < classes; ++c) z += std::exp(logits.at(n, c, y, x) - mx);
  const double log_z = std::log(z);
  for (int c = 0; c < classes; ++c) {
    const double p = std::exp(logits.at(n, c, y, x) - mx - log_z);
    grad.at(n, c, y, x) += scale * (p - (c == label ? 1.0 : 0.0));
  }
  return -(logits.at(n, label, y, x) - mx - log_z);
}

void require_finite(const Tensor& logits, const char* what) {
  if (!logits.all_finite()) throw NumericError(std::string(what) + ": non-finite logits");
}

}  // namespace

LossResult pretext_loss(const Tensor& logits, std::span<const int> labels, int group_size) {
  require_finite(logits, "pretext_loss");
  const int n = logits.n(), k = logits.c();
  if (logits.h() != 1 || logits.w() != 1) throw ShapeError("pretext_loss expects N x K x 1 x 1 logits");
  if (static_cast<int>(labels.size()) != n) throw ShapeError("pretext_loss: label count mismatch");
  if (n == 0) throw ShapeError("pretext_loss: empty batch");
  if (group_size < 1 || n % group_size != 0)
    throw ShapeError("pretext_loss: batch of " + std::to_string(n) + " is not whole groups of " +
                     std::to_string(group_size));
  const int groups = n / group_size;
  LossResult r{0.0, Tensor(n, k, 1, 1)};
  const double scale = 1.0 / (static_cast<double>(group_size) * groups);
  for (int g = 0; g < groups; ++g) {
    double group_sum = 0.0;
    for (int j = 0; j < group_size; ++j) {
      const int i = g * group_size + j;
      if (labels[i] < 0 || labels[i] >= k)
        throw ShapeError("pretext_loss: label " + std::to_string(labels[i]) + " >= K=" + std::to_string(k));
      group_sum += cell_cross_entropy(logits, r.grad, i, 0, 0, labels[i], scale);
    }
    r.value += group_sum / group_size;
  }
  r.value /= groups;
  return r;
}

LossResult segmentation_loss(const Tensor& logits, std::span<const int> labels, LossNormalization norm) {
  require_finite(logits, "segmentation_loss");
  const int n = logits.n(), c = logits.c(), h = logits.h(), w = logits.w();
  if (labels.size() != static_cast<std::size_t>(n) * h * w) throw ShapeError("segmentation_loss: label map shape");
  for (int label : labels)
    if (label != kIgnoreLabel && (label < 0 || label >= c))
      throw ShapeError("segmentation_loss: label " + std::to_string(label) + " out of range");

  std::vector<int> supervised(n, 0);
  int images = 0;
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < h * w; ++p)
      if (labels[static_cast<std::size_t>(i) * h * w + p] != kIgnoreLabel) ++supervised[i];
    if (supervised[i] > 0) ++images;
  }
  if (images == 0) throw ShapeError("no supervised pixels");

  LossResult r{0.0, Tensor(n, c, h, w)};
  for (int i = 0; i < n; ++i) {
    if (supervised[i] == 0) continue;
    const double per_image = norm == LossNormalization::mean ? 1.0 / supervised[i] : 1.0;
    const double scale = per_image / images;
    double total = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int label = labels[(static_cast<std::size_t>(i) * h + y) * w + x];
        if (label == kIgnoreLabel) continue;
        total += cell_cross_entropy(logits, r.grad, i, y, x, label, scale);
      }
    r.value += total * per_image;
  }
  r.value /= images;
  return r;
}

LossResult classification_loss(const Tensor& logits, std::span<const int> labels) {
  require_finite(logits, "classification_loss");
  const int n = logits.n(), c = logits.c();
  if (logits.h() != 1 || logits.w() != 1) throw ShapeError("classification_loss expects N x C x 1 x 1 logits");
  if (static_cast<int>(labels.size()) != n || n == 0) throw ShapeError("classification_loss: label count mismatch");
  LossResult r{0.0, Tensor(n, c, 1, 1)};
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw ShapeError("classification_loss: label " + std::to_string(labels[i]) + " out of range");
    r.value += cell_cross_entropy(logits, r.grad, i, 0, 0, labels[i], 1.0 / n);
  }
  r.value /= n;
  return r;
}

LossResult discriminator_loss(const Tensor& z_logits, DomainLabel z, LossNormalization norm) {
  require_finite(z_logits, "discriminator_loss");
  if (z_logits.c() != 2) throw ShapeError("domain map must have 2 channels, got " + z_logits.shape_string());
  const int zi = static_cast<int>(z);
  if (zi != 0 && zi != 1) throw ConfigError("domain label must be 0 or 1");
  const int n = z_logits.n();
  if (n == 0) throw ShapeError("discriminator_loss: empty batch");
  const double cells = static_cast<double>(z_logits.plane());
  const double per_image = norm == LossNormalization::mean ? 1.0 / cells : 1.0;
  const double scale = per_image / n;
  LossResult r{0.0, Tensor(n, 2, z_logits.h(), z_logits.w())};
  for (int i = 0; i < n; ++i)
    for (int y = 0; y < z_logits.h(); ++y)
      for (int x = 0; x < z_logits.w(); ++x) r.value += cell_cross_entropy(z_logits, r.grad, i, y, x, zi, scale);
  r.value *= scale;
  return r;
}

LossResult adversarial_loss(const Tensor& z_logits, DomainLabel z, LossNormalization norm) {
  return discriminator_loss(z_logits, flipped(z), norm);
}

double joint_objective(double main_loss, double pretext, const LossWeights& w) {
  return main_loss + w.lambda_p * pretext;
}

double full_objective(double main_loss, double pretext, double adversarial, double discriminator,
                      const LossWeights& w) {
  return main_loss + w.lambda_p * pretext + w.lambda_adv * adversarial + w.lambda_d * discriminator;
}

}  // namespace ssda
