#include "ssda/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "ssda/error.hpp"

namespace ssda {

Tensor::Tensor(int n, int c, int h, int w, double fill)
    : n_(n), c_(c), h_(h), w_(w) {
  if (n < 0 || c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
  data_.assign(static_cast<std::size_t>(n) * c * h * w, fill);
}

bool Tensor::same_shape(const Tensor& other) const {
  return n_ == other.n_ && c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" +
         std::to_string(w_) + "]";
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other))
    throw ShapeError("tensor add: " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (auto& v : data_) v *= scale;
  return *this;
}

Tensor Tensor::slice_batch(int begin, int end) const {
  if (begin < 0 || end > n_ || begin > end) throw ShapeError("slice_batch out of range");
  Tensor out(end - begin, c_, h_, w_);
  const std::size_t stride = static_cast<std::size_t>(c_) * h_ * w_;
  std::copy(data_.begin() + begin * stride, data_.begin() + end * stride, out.data_.begin());
  return out;
}

Tensor Tensor::concat_batch(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.c_ != b.c_ || a.h_ != b.h_ || a.w_ != b.w_)
    throw ShapeError("concat_batch: " + a.shape_string() + " vs " + b.shape_string());
  Tensor out(a.n_ + b.n_, a.c_, a.h_, a.w_);
  std::copy(a.data_.begin(), a.data_.end(), out.data_.begin());
  std::copy(b.data_.begin(), b.data_.end(), out.data_.begin() + a.data_.size());
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace ssda
