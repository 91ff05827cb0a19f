#include "ssda/layers.hpp"

#include <algorithm>
#include <cmath>

#include "ssda/error.hpp"

namespace ssda {

Parameter::Parameter(std::string name_, std::vector<int> shape_)
    : name(std::move(name_)), shape(std::move(shape_)) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  value.assign(n, 0.0);
  grad.assign(n, 0.0);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

std::vector<double> StatCapture::mean() const {
  std::vector<double> m(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) m[c] = sum[c] / count;
  return m;
}

std::vector<double> StatCapture::variance() const {
  std::vector<double> v(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) {
    const double m = sum[c] / count;
    v[c] = std::max(0.0, sum_sq[c] / count - m * m);
  }
  return v;
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {
  if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1 || pad < 0)
    throw ConfigError("conv " + name + ": invalid geometry");
}

void Conv2d::init_he(Rng& rng) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight_.value) v = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

Tensor Conv2d::forward(const Tensor& x, Mode) {
  if (x.c() != in_)
    throw ShapeError("conv " + weight_.name + ": expected " + std::to_string(in_) +
                     " input channels, got " + x.shape_string());
  n_ = x.n();
  h_ = x.h();
  w_ = x.w();
  oh_ = output_extent(h_);
  ow_ = output_extent(w_);
  if (oh_ < 1 || ow_ < 1) throw ShapeError("conv " + weight_.name + ": input too small " + x.shape_string());

  const int out_plane = oh_ * ow_;
  const Eigen::Index ncols = static_cast<Eigen::Index>(n_) * out_plane;
  cols_.setZero(static_cast<Eigen::Index>(in_) * k_ * k_, ncols);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        double* row = cols_.row((c * k_ + ky) * k_ + kx).data();
        for (int n = 0; n < n_; ++n) {
          const double* src = x.plane_ptr(n, c);
          double* dst = row + static_cast<std::size_t>(n) * out_plane;
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h_) continue;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w_) dst[oy * ow_ + ox] = src[iy * w_ + ix];
            }
          }
        }
      }
    }
  }

  Eigen::Map<const RowMatrix> weight(weight_.value.data(), out_, static_cast<Eigen::Index>(in_) * k_ * k_);
  RowMatrix result = weight * cols_;

  Tensor y(n_, out_, oh_, ow_);
  for (int n = 0; n < n_; ++n) {
    for (int o = 0; o < out_; ++o) {
      const double* src = result.row(o).data() + static_cast<std::size_t>(n) * out_plane;
      double* dst = y.plane_ptr(n, o);
      const double b = bias_.value[o];
      for (int i = 0; i < out_plane; ++i) dst[i] = src[i] + b;
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, bool accumulate) {
  if (grad_out.n() != n_ || grad_out.c() != out_ || grad_out.h() != oh_ || grad_out.w() != ow_)
    throw ShapeError("conv " + weight_.name + ": backward shape " + grad_out.shape_string());
  const int out_plane = oh_ * ow_;
  const Eigen::Index ncols = static_cast<Eigen::Index>(n_) * out_plane;
  const Eigen::Index patch = static_cast<Eigen::Index>(in_) * k_ * k_;

  RowMatrix g(out_, ncols);
  for (int n = 0; n < n_; ++n)
    for (int o = 0; o < out_; ++o)
      std::copy_n(grad_out.plane_ptr(n, o), out_plane, g.row(o).data() + static_cast<std::size_t>(n) * out_plane);

  if (accumulate) {
    Eigen::Map<RowMatrix> dweight(weight_.grad.data(), out_, patch);
    dweight.noalias() += g * cols_.transpose();
    for (int o = 0; o < out_; ++o) bias_.grad[o] += g.row(o).sum();
  }

  Eigen::Map<const RowMatrix> weight(weight_.value.data(), out_, patch);
  RowMatrix dcols = weight.transpose() * g;

  Tensor dx(n_, in_, h_, w_);
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const double* row = dcols.row((c * k_ + ky) * k_ + kx).data();
        for (int n = 0; n < n_; ++n) {
          double* dst = dx.plane_ptr(n, c);
          const double* src = row + static_cast<std::size_t>(n) * out_plane;
          for (int oy = 0; oy < oh_; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h_) continue;
            for (int ox = 0; ox < ow_; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w_) dst[iy * w_ + ix] += src[oy * ow_ + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels, double eps, double momentum)
    : name_(std::move(name)), gamma_(name_ + ".gamma", {channels}), beta_(name_ + ".beta", {channels}) {
  if (channels < 1) throw ConfigError("bn " + name_ + ": channels must be positive");
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  state_.eps = eps;
  state_.momentum = momentum;
  reset_running_stats();
}

void BatchNorm2d::reset_running_stats() {
  const auto c = gamma_.value.size();
  state_.running_mean.assign(c, 0.0);
  state_.running_var.assign(c, 1.0);
}

void BatchNorm2d::begin_capture() {
  capture_ = StatCapture{std::vector<double>(channels(), 0.0), std::vector<double>(channels(), 0.0), 0.0};
}

std::optional<StatCapture> BatchNorm2d::end_capture() {
  auto out = std::move(capture_);
  capture_.reset();
  return out;
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  const int channels_ = channels();
  if (x.c() != channels_) throw ShapeError("bn " + name_ + ": channel mismatch " + x.shape_string());
  const std::size_t plane = x.plane();
  const double m = static_cast<double>(x.n()) * plane;
  if (m < 1) throw ShapeError("bn " + name_ + ": empty batch");

  std::vector<double> mean(channels_, 0.0), var(channels_, 0.0);
  if (uses_batch_stats(mode) || capture_) {
    for (int c = 0; c < channels_; ++c) {
      double s = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const double* p = x.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[c] = s / m;
      double v = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const double* p = x.plane_ptr(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean[c];
          v += d * d;
        }
      }
      var[c] = v / m;
      if (capture_) {
        // Shifted sums keep the oracle accumulation in double exact enough.
        capture_->sum[c] += s;
        capture_->sum_sq[c] += v + s * s / m;
      }
    }
    if (capture_) capture_->count += m;
  }

  batch_stats_used_ = uses_batch_stats(mode);
  if (!batch_stats_used_) {
    mean = state_.running_mean;
    var = state_.running_var;
  } else if (mode == Mode::train) {
    const double mom = state_.momentum;
    for (int c = 0; c < channels_; ++c) {
      state_.running_mean[c] = (1.0 - mom) * state_.running_mean[c] + mom * mean[c];
      state_.running_var[c] = (1.0 - mom) * state_.running_var[c] + mom * var[c];
    }
  }

  inv_std_.assign(channels_, 0.0);
  x_hat_ = Tensor(x.n(), x.c(), x.h(), x.w());
  Tensor y(x.n(), x.c(), x.h(), x.w());
  for (int c = 0; c < channels_; ++c) {
    inv_std_[c] = 1.0 / std::sqrt(var[c] + state_.eps);
    const double g = gamma_.value[c], b = beta_.value[c];
    for (int n = 0; n < x.n(); ++n) {
      const double* p = x.plane_ptr(n, c);
      double* xh = x_hat_.plane_ptr(n, c);
      double* out = y.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mean[c]) * inv_std_[c];
        out[i] = g * xh[i] + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, bool accumulate) {
  if (!grad_out.same_shape(x_hat_)) throw ShapeError("bn " + name_ + ": backward shape " + grad_out.shape_string());
  const int channels_ = channels();
  const std::size_t plane = grad_out.plane();
  const double m = static_cast<double>(grad_out.n()) * plane;
  Tensor dx(grad_out.n(), grad_out.c(), grad_out.h(), grad_out.w());

  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < grad_out.n(); ++n) {
      const double* dy = grad_out.plane_ptr(n, c);
      const double* xh = x_hat_.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    if (accumulate) {
      gamma_.grad[c] += sum_dy_xhat;
      beta_.grad[c] += sum_dy;
    }
    const double scale = gamma_.value[c] * inv_std_[c];
    for (int n = 0; n < grad_out.n(); ++n) {
      const double* dy = grad_out.plane_ptr(n, c);
      const double* xh = x_hat_.plane_ptr(n, c);
      double* out = dx.plane_ptr(n, c);
      if (batch_stats_used_) {
        for (std::size_t i = 0; i < plane; ++i)
          out[i] = scale * (dy[i] - sum_dy / m - xh[i] * sum_dy_xhat / m);
      } else {
        for (std::size_t i = 0; i < plane; ++i) out[i] = scale * dy[i];
      }
    }
  }
  return dx;
}

// ------------------------------------------------------- activations etc.

Tensor Relu::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor Relu::backward(const Tensor& grad_out, bool) {
  if (!grad_out.same_shape(input_)) throw ShapeError("relu: backward shape " + grad_out.shape_string());
  Tensor dx = grad_out;
  auto in = input_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (in[i] <= 0.0) d[i] = 0.0;
  return dx;
}

Tensor LeakyRelu::forward(const Tensor& x, Mode) {
  input_ = x;
  Tensor y = x;
  for (auto& v : y.values()) v = v > 0.0 ? v : slope_ * v;
  return y;
}

Tensor LeakyRelu::backward(const Tensor& grad_out, bool) {
  if (!grad_out.same_shape(input_)) throw ShapeError("leaky relu: backward shape " + grad_out.shape_string());
  Tensor dx = grad_out;
  auto in = input_.values();
  auto d = dx.values();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (in[i] <= 0.0) d[i] *= slope_;
  return dx;
}

Tensor AvgPool2::forward(const Tensor& x, Mode) {
  h_ = x.h();
  w_ = x.w();
  const int oh = h_ / 2, ow = w_ / 2;
  if (oh < 1 || ow < 1) throw ShapeError("avgpool: input too small " + x.shape_string());
  Tensor y(x.n(), x.c(), oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double* p = x.plane_ptr(n, c);
      double* out = y.plane_ptr(n, c);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double* q = p + 2 * oy * w_ + 2 * ox;
          out[oy * ow + ox] = 0.25 * (q[0] + q[1] + q[w_] + q[w_ + 1]);
        }
    }
  return y;
}

Tensor AvgPool2::backward(const Tensor& grad_out, bool) {
  const int oh = grad_out.h(), ow = grad_out.w();
  Tensor dx(grad_out.n(), grad_out.c(), h_, w_);
  for (int n = 0; n < grad_out.n(); ++n)
    for (int c = 0; c < grad_out.c(); ++c) {
      const double* g = grad_out.plane_ptr(n, c);
      double* d = dx.plane_ptr(n, c);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double v = 0.25 * g[oy * ow + ox];
          double* q = d + 2 * oy * w_ + 2 * ox;
          q[0] += v;
          q[1] += v;
          q[w_] += v;
          q[w_ + 1] += v;
        }
    }
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  h_ = x.h();
  w_ = x.w();
  Tensor y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double* p = x.plane_ptr(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      y.at(n, c, 0, 0) = s / static_cast<double>(plane);
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out, bool) {
  Tensor dx(grad_out.n(), grad_out.c(), h_, w_);
  const std::size_t plane = dx.plane();
  for (int n = 0; n < grad_out.n(); ++n)
    for (int c = 0; c < grad_out.c(); ++c) {
      const double v = grad_out.at(n, c, 0, 0) / static_cast<double>(plane);
      double* d = dx.plane_ptr(n, c);
      std::fill(d, d + plane, v);
    }
  return dx;
}

namespace {

struct Tap {
  int lo, hi;
  double frac;  // weight on hi
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(src);
    if (lo > in - 1) lo = in - 1;
    const int hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace

Tensor BilinearUpsample::forward(const Tensor& x, int out_h, int out_w) {
  h_ = x.h();
  w_ = x.w();
  const auto ty = bilinear_taps(h_, out_h);
  const auto tx = bilinear_taps(w_, out_w);
  Tensor y(x.n(), x.c(), out_h, out_w);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const double* p = x.plane_ptr(n, c);
      double* out = y.plane_ptr(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const double top = (1 - b.frac) * p[a.lo * w_ + b.lo] + b.frac * p[a.lo * w_ + b.hi];
          const double bot = (1 - b.frac) * p[a.hi * w_ + b.lo] + b.frac * p[a.hi * w_ + b.hi];
          out[oy * out_w + ox] = (1 - a.frac) * top + a.frac * bot;
        }
      }
    }
  return y;
}

Tensor BilinearUpsample::backward(const Tensor& grad_out) {
  const int out_h = grad_out.h(), out_w = grad_out.w();
  const auto ty = bilinear_taps(h_, out_h);
  const auto tx = bilinear_taps(w_, out_w);
  Tensor dx(grad_out.n(), grad_out.c(), h_, w_);
  for (int n = 0; n < grad_out.n(); ++n)
    for (int c = 0; c < grad_out.c(); ++c) {
      const double* g = grad_out.plane_ptr(n, c);
      double* d = dx.plane_ptr(n, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[ox];
          const double v = g[oy * out_w + ox];
          d[a.lo * w_ + b.lo] += (1 - a.frac) * (1 - b.frac) * v;
          d[a.lo * w_ + b.hi] += (1 - a.frac) * b.frac * v;
          d[a.hi * w_ + b.lo] += a.frac * (1 - b.frac) * v;
          d[a.hi * w_ + b.hi] += a.frac * b.frac * v;
        }
      }
    }
  return dx;
}

// ------------------------------------------------------------ Sequential

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& layer : layers_) h = std::visit([&](auto& l) { return l.forward(h, mode); }, layer);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out, bool accumulate) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
    g = std::visit([&](auto& l) { return l.backward(g, accumulate); }, *it);
  return g;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    auto ps = std::visit([](auto& l) { return l.parameters(); }, layer);
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

std::vector<BatchNorm2d*> Sequential::bn_layers() {
  std::vector<BatchNorm2d*> out;
  for (auto& layer : layers_)
    if (auto* bn = std::get_if<BatchNorm2d>(&layer)) out.push_back(bn);
  return out;
}

}  // namespace ssda
