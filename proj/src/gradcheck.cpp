#include "ssda/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssda/error.hpp"
#include "ssda/rng.hpp"

namespace ssda {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void hash_signs(std::uint64_t& h, const Tensor& t) {
  std::uint64_t word = 0;
  int bits = 0;
  for (double v : t.values()) {
    word = (word << 1) | (v > 0.0 ? 1u : 0u);
    if (++bits == 64) {
      h = (h ^ word) * kFnvPrime;
      word = 0;
      bits = 0;
    }
  }
  h = (h ^ word ^ static_cast<std::uint64_t>(bits)) * kFnvPrime;
}

void hash_stage(std::uint64_t& h, const Sequential& seq) {
  for (const auto& layer : seq.layers()) {
    if (const auto* r = std::get_if<Relu>(&layer)) hash_signs(h, r->last_input());
    if (const auto* r = std::get_if<LeakyRelu>(&layer)) hash_signs(h, r->last_input());
  }
}

double probe_loss(const std::function<LossProbe()>& loss, std::uint64_t* pattern) {
  const LossProbe p = loss();
  if (!std::isfinite(p.loss)) throw NumericError("gradient check: non-finite loss");
  *pattern = p.pattern;
  return p.loss;
}

}  // namespace

std::uint64_t activation_pattern(const Networks& nets) {
  std::uint64_t h = kFnvOffset;
  for (const auto* s : nets.encoder.stages()) hash_stage(h, *s);
  for (const auto* s : nets.discriminator.stages()) hash_stage(h, *s);
  return h;
}

std::uint64_t combine_patterns(std::uint64_t a, std::uint64_t b) {
  return a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
}

GradCheckReport gradient_check(const std::vector<Parameter*>& params, const std::function<LossProbe()>& loss,
                               const GradCheckOptions& options) {
  GradCheckReport report;
  std::vector<GradCheckEntry> all;
  std::uint64_t base_pattern = 0;
  probe_loss(loss, &base_pattern);

  for (std::size_t t = 0; t < params.size(); ++t) {
    Parameter& p = *params[t];
    auto& w = p.value;
    const auto& g = p.grad;
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = derive_rng(options.seed, {0x6c4ecULL, t});
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t wanted = std::min<std::size_t>(options.samples_per_tensor, w.size());
    std::size_t done = 0;
    for (std::size_t k = 0; k < order.size() && done < wanted; ++k) {
      const std::size_t i = order[k];
      const double saved = w[i];
      const double h = options.relative_step * std::max(1.0, std::abs(saved));
      std::uint64_t plus_pattern = 0, minus_pattern = 0;
      w[i] = saved + h;
      const double lp = probe_loss(loss, &plus_pattern);
      w[i] = saved - h;
      const double lm = probe_loss(loss, &minus_pattern);
      w[i] = saved;
      if (plus_pattern != base_pattern || minus_pattern != base_pattern) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = g[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), options.denominator_floor});
      const double rel = std::abs(numeric - analytic) / denom;
      all.push_back({p.name, i, analytic, numeric, rel});
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.checked;
      ++done;
    }
    if (done < static_cast<std::size_t>(options.samples_per_tensor)) report.short_tensors.push_back(p.name);
  }
  std::sort(all.begin(), all.end(),
            [](const GradCheckEntry& a, const GradCheckEntry& b) { return a.relative_error > b.relative_error; });
  all.resize(std::min<std::size_t>(all.size(), 10));
  report.worst = std::move(all);
  return report;
}

}  // namespace ssda
