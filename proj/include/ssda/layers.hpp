#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda {

// train: batch statistics, running stats updated.
// train_frozen_stats: batch statistics, running stats left alone.
// eval: running statistics.
enum class Mode { train, train_frozen_stats, eval };

inline bool uses_batch_stats(Mode mode) { return mode != Mode::eval; }

struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string name, std::vector<int> shape);
  std::size_t size() const { return value.size(); }
  void zero_grad();
};

// Per-channel sums of a BN layer's input, collected while capture is on.
struct StatCapture {
  std::vector<double> sum;
  std::vector<double> sum_sq;
  double count = 0.0;

  std::vector<double> mean() const;
  std::vector<double> variance() const;
};

struct BNState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

class Conv2d {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad);

  Tensor forward(const Tensor& x, Mode mode);
  // Returns d(loss)/d(input); adds into parameter grads when accumulate is set.
  Tensor backward(const Tensor& grad_out, bool accumulate);

  void init_he(Rng& rng);
  std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int output_extent(int input) const { return (input + 2 * pad_ - k_) / stride_ + 1; }

 private:
  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int in_, out_, k_, stride_, pad_;
  Parameter weight_, bias_;
  RowMatrix cols_;
  int n_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
};

class BatchNorm2d {
 public:
  BatchNorm2d(std::string name, int channels, double eps, double momentum);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);

  std::vector<Parameter*> parameters() { return {&gamma_, &beta_}; }
  BNState& state() { return state_; }
  const BNState& state() const { return state_; }
  const std::string& name() const { return name_; }
  int channels() const { return static_cast<int>(state_.running_mean.size()); }
  void reset_running_stats();

  void begin_capture();
  std::optional<StatCapture> end_capture();

 private:
  std::string name_;
  Parameter gamma_, beta_;
  BNState state_;
  std::optional<StatCapture> capture_;
  Tensor x_hat_;
  std::vector<double> inv_std_;
  bool batch_stats_used_ = false;
};

class Relu {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);
  std::vector<Parameter*> parameters() { return {}; }
  const Tensor& last_input() const { return input_; }

 private:
  Tensor input_;
};

class LeakyRelu {
 public:
  explicit LeakyRelu(double slope) : slope_(slope) {}
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);
  std::vector<Parameter*> parameters() { return {}; }
  const Tensor& last_input() const { return input_; }

 private:
  double slope_;
  Tensor input_;
};

// 2x2 average pooling, stride 2. Odd trailing rows/cols are dropped.
class AvgPool2 {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);
  std::vector<Parameter*> parameters() { return {}; }

 private:
  int h_ = 0, w_ = 0;
};

class GlobalAvgPool {
 public:
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);
  std::vector<Parameter*> parameters() { return {}; }

 private:
  int h_ = 0, w_ = 0;
};

// Fixed bilinear resize (half-pixel centers), no learnable state.
class BilinearUpsample {
 public:
  Tensor forward(const Tensor& x, int out_h, int out_w);
  Tensor backward(const Tensor& grad_out);

 private:
  int h_ = 0, w_ = 0;
};

using Layer = std::variant<Conv2d, BatchNorm2d, Relu, LeakyRelu, AvgPool2, GlobalAvgPool>;

class Sequential {
 public:
  Sequential() = default;

  template <typename L>
  L& add(L layer) {
    layers_.emplace_back(std::move(layer));
    return std::get<L>(layers_.back());
  }

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out, bool accumulate);

  std::vector<Parameter*> parameters();
  std::vector<BatchNorm2d*> bn_layers();
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
};

}  // namespace ssda
