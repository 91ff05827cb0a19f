#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "ssda/data.hpp"
#include "ssda/model.hpp"
#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace ssda::testing {

inline ArchitectureSpec tiny_arch() {
  ArchitectureSpec a;
  a.encoder_channels = {4, 6, 8, 8};
  a.discriminator_channels = {4, 4};
  return a;
}

inline Tensor random_tensor(int n, int c, int h, int w, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(n, c, h, w);
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

inline Image random_image(int h, int w, int ch, std::uint64_t seed) {
  Image img(h, w, ch);
  Rng rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (auto& v : img.pixels) v = dist(rng);
  return img;
}

inline SyntheticShiftSpec small_spec(Task task = Task::classification, int per_class = 6) {
  SyntheticShiftSpec s;
  s.task = task;
  s.image_size = task == Task::classification ? 32 : 24;
  s.num_classes = task == Task::classification ? 4 : 3;
  s.samples_per_class = per_class;
  s.test_samples_per_class = 3;
  return s;
}

// Cross-entropy of one logit row against a label, via long double
// log-sum-exp.
inline double ce_oracle(const std::vector<double>& logits, int label) {
  long double mx = logits[0];
  for (double v : logits) mx = std::max<long double>(mx, v);
  long double s = 0;
  for (double v : logits) s += std::exp(static_cast<long double>(v) - mx);
  return static_cast<double>(mx + std::log(s) - logits[label]);
}

inline double max_relative_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return scale == 0.0 ? diff : diff / scale;
}

inline std::vector<std::vector<double>> grads_of(const std::vector<Parameter*>& params) {
  std::vector<std::vector<double>> out;
  for (auto* p : params) out.push_back(p->grad);
  return out;
}

inline std::vector<std::vector<double>> values_of(const std::vector<Parameter*>& params) {
  std::vector<std::vector<double>> out;
  for (auto* p : params) out.push_back(p->value);
  return out;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ssda-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace ssda::testing
