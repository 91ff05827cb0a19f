#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ssda/layers.hpp"
#include "ssda/model.hpp"

namespace ssda {

struct GradCheckOptions {
  int samples_per_tensor = 20;      // every coordinate when the tensor is smaller
  double relative_step = 1e-4;      // h = relative_step * max(1, |theta|)
  double tolerance = 1e-4;
  double denominator_floor = 1e-6;  // |a - n| / max(|a|, |n|, floor)
  std::uint64_t seed = 0;
};

// A loss evaluation plus a digest of the rectifier on/off pattern it went
// through. Coordinates whose +-h probes change the pattern sit on a kink of
// the piecewise-linear network and are resampled instead of compared.
struct LossProbe {
  double loss = 0.0;
  std::uint64_t pattern = 0;
};

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped_kinks = 0;
  std::vector<GradCheckEntry> worst;  // descending relative error, at most 10
  std::vector<std::string> short_tensors;  // tensors with fewer coordinates than samples_per_tensor

  bool passed(double tolerance) const { return checked > 0 && max_relative_error <= tolerance; }
};

// Compares each parameter's .grad (filled by the caller's backward pass at
// the current parameter values) against central differences of `loss`.
GradCheckReport gradient_check(const std::vector<Parameter*>& params, const std::function<LossProbe()>& loss,
                               const GradCheckOptions& options = {});

// Digest of the sign pattern of every rectifier input cached by the last
// forward pass through the encoder and discriminator.
std::uint64_t activation_pattern(const Networks& nets);
std::uint64_t combine_patterns(std::uint64_t a, std::uint64_t b);

}  // namespace ssda
