#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ssda {

// Dense batch of feature maps in NCHW order, double precision throughout.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, double fill = 0.0);

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }

  double& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  double at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  // Pointer to the plane of (n, c).
  double* plane_ptr(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const double* plane_ptr(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  bool same_shape(const Tensor& other) const;
  std::string shape_string() const;

  void fill(double value);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double scale);

  // Rows [begin, end) of the batch dimension.
  Tensor slice_batch(int begin, int end) const;
  static Tensor concat_batch(const Tensor& a, const Tensor& b);

  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * c_ + c) * h_ + y) * w_ + x;
  }

  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

}  // namespace ssda
