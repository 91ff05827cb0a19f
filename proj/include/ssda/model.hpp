#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssda/layers.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

enum class Task { classification, segmentation };
enum class FeatureTap { middle, final };

const char* to_string(Task task);
const char* to_string(FeatureTap tap);
Task parse_task(const std::string& text);
FeatureTap parse_feature_tap(const std::string& text);

struct ArchitectureSpec {
  int input_channels = 3;
  std::array<int, 4> encoder_channels{32, 64, 128, 128};
  std::array<int, 2> discriminator_channels{64, 128};
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  double discriminator_slope = 0.2;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

nlohmann::json to_json(const ArchitectureSpec& arch);
ArchitectureSpec architecture_from_json(const nlohmann::json& j);

// Shared feature extractor: four conv-BN-ReLU blocks, 2x2 average pooling
// after blocks 1 and 2. "middle" is the output of block 2, "final" of block 4.
class Encoder {
 public:
  struct Features {
    Tensor middle;
    Tensor final;
  };

  Encoder() = default;
  explicit Encoder(const ArchitectureSpec& arch);

  Features forward(const Tensor& x, Mode mode, bool need_final = true);
  // Either gradient may be empty. d_final requires the last forward to have
  // computed the final features.
  Tensor backward(const Tensor& d_middle, const Tensor& d_final, bool accumulate);

  std::vector<Parameter*> parameters();
  std::vector<BatchNorm2d*> bn_layers();
  void init(Rng& rng);

  std::vector<const Sequential*> stages() const { return {&lower_, &upper_}; }
  int middle_channels() const { return middle_channels_; }
  int final_channels() const { return final_channels_; }

 private:
  Sequential lower_;
  Sequential upper_;
  int middle_channels_ = 0;
  int final_channels_ = 0;
};

// Classification: global average pool then affine to C logits (N x C x 1 x 1).
// Segmentation: 1x1 conv to C channels (the prediction layer) then a fixed
// bilinear upsample to the input resolution.
class MainHead {
 public:
  MainHead() = default;
  MainHead(Task task, int in_channels, int num_classes);

  Tensor project(const Tensor& features, Mode mode);
  Tensor project_backward(const Tensor& grad, bool accumulate);
  Tensor upsample(const Tensor& map, int out_h, int out_w);
  Tensor upsample_backward(const Tensor& grad);

  std::vector<Parameter*> parameters() { return project_.parameters(); }
  std::vector<BatchNorm2d*> bn_layers() { return project_.bn_layers(); }
  void init(Rng& rng);

 private:
  Task task_ = Task::classification;
  Sequential project_;
  BilinearUpsample upsample_;
};

// Global average pool then affine to K rotation (or region x rotation) logits.
class PretextHead {
 public:
  PretextHead() = default;
  PretextHead(int in_channels, int num_labels);

  Tensor forward(const Tensor& features, Mode mode) { return net_.forward(features, mode); }
  Tensor backward(const Tensor& grad, bool accumulate) { return net_.backward(grad, accumulate); }
  std::vector<Parameter*> parameters() { return net_.parameters(); }
  std::vector<BatchNorm2d*> bn_layers() { return net_.bn_layers(); }
  void init(Rng& rng);

 private:
  Sequential net_;
};

// Three stride-2 3x3 convs over main-task probabilities; 2 output channels,
// channel 0 = target, channel 1 = source.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const ArchitectureSpec& arch, int num_classes);

  Tensor forward(const Tensor& probs, Mode mode) { return net_.forward(probs, mode); }
  Tensor backward(const Tensor& grad, bool accumulate) { return net_.backward(grad, accumulate); }
  std::vector<Parameter*> parameters() { return net_.parameters(); }
  void init(Rng& rng);
  int input_channels() const { return input_channels_; }
  std::vector<const Sequential*> stages() const { return {&net_}; }

 private:
  Sequential net_;
  int input_channels_ = 0;
};

inline constexpr int kTargetChannel = 0;
inline constexpr int kSourceChannel = 1;

struct Networks {
  ArchitectureSpec arch;
  Task task = Task::classification;
  int num_classes = 0;
  int pretext_labels = 0;
  FeatureTap tap = FeatureTap::middle;

  Encoder encoder;
  MainHead main;
  PretextHead pretext;
  Discriminator discriminator;

  // Parameters grouped by owning network, in a fixed order.
  std::vector<Parameter*> encoder_parameters() { return encoder.parameters(); }
  std::vector<Parameter*> main_parameters() { return main.parameters(); }
  std::vector<Parameter*> pretext_parameters() { return pretext.parameters(); }
  std::vector<Parameter*> discriminator_parameters() { return discriminator.parameters(); }
  std::vector<Parameter*> all_parameters();
  std::vector<BatchNorm2d*> all_bn_layers();
  void zero_grad();
};

// He-normal weights, zero biases and beta, unit gamma. Deterministic in seed.
Networks build_networks(const ArchitectureSpec& arch, Task task, int pretext_labels, int num_classes,
                        FeatureTap tap, std::uint64_t seed);

// S(E(x)): logits, N x C x 1 x 1 (classification) or N x C x H x W (segmentation).
Tensor forward_main(Networks& nets, const Tensor& images, Mode mode);
void backward_main(Networks& nets, const Tensor& grad_logits, bool accumulate);

// P at the configured tap; N x K x 1 x 1 logits.
Tensor forward_pretext(Networks& nets, const Tensor& patches, Mode mode);
void backward_pretext(Networks& nets, const Tensor& grad_logits, bool accumulate);

// Channel count seen by the pretext head for this configuration.
int tap_channels(const Networks& nets);
// Tap feature map for the given images (no pretext head applied).
Tensor tap_features(Networks& nets, const Tensor& images, Mode mode);

// D on softmax probabilities; N x 2 x H' x W'.
Tensor forward_discriminator(Networks& nets, const Tensor& probs, Mode mode);
// Returns d(loss)/d(probs). accumulate=false leaves D's accumulators untouched.
Tensor backward_discriminator(Networks& nets, const Tensor& grad_z, bool accumulate);

// Softmax across the channel dimension at every (n, y, x).
Tensor softmax_channels(const Tensor& logits);
// Vector-Jacobian product of softmax_channels given its output probs.
Tensor softmax_channels_backward(const Tensor& probs, const Tensor& grad_probs);

// Bitwise digest of parameter values (and optionally BN running stats).
std::uint64_t parameter_digest(Networks& nets, bool include_bn_stats);
std::uint64_t digest_parameters(const std::vector<Parameter*>& params);

struct CheckpointMeta {
  std::string config_hash;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, Networks& nets, const CheckpointMeta& meta);
Networks load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace ssda
