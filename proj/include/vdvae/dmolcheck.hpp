#pragma once

// Self-contained verification of the discretized mixture-of-logistics head:
// bin masses sum to one across random parameter draws (including the edge
// bins and the log-scale floor), and the ancestral sampler's histogram
// matches the analytic bin masses.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vdvae/dmol.hpp"
#include "vdvae/rng.hpp"

namespace vdvae {

struct DmolCheckReport {
  double max_norm_deviation = 0;  // max |sum over 256 bins - 1|
  std::size_t norm_draws = 0;
  int histogram_violations = 0;  // bins outside 3 sigma multinomial error
  std::size_t histogram_draws = 0;
  double norm_tolerance = 1e-5;
  bool pass() const {
    return max_norm_deviation < norm_tolerance && histogram_violations == 0;
  }
  std::string summary() const {
    char line[256];
    std::snprintf(line, sizeof line,
                  "dmol normalization: %zu draws, max |sum-1| = %.3e (tol %.0e) %s\n"
                  "dmol sampler: %zu draws, %d bins beyond 3 sigma %s\n",
                  norm_draws, max_norm_deviation, norm_tolerance,
                  max_norm_deviation < norm_tolerance ? "ok" : "FAIL",
                  histogram_draws, histogram_violations,
                  histogram_violations == 0 ? "ok" : "FAIL");
    return std::string(line);
  }
};

namespace dmolcheck_detail {

// Scalar (1x1x1) single-channel DMoL with K components.
template <typename T = double>
DmolParams<T> scalar_params(const std::vector<double>& logits,
                            const std::vector<double>& means,
                            const std::vector<double>& log_scales) {
  const int K = int(logits.size());
  DmolParams<T> p;
  p.mixtures = K;
  p.channels = 1;
  p.mixture_logits =
      Tensor<T>::from({1, K, 1, 1}, std::vector<T>(logits.begin(), logits.end()));
  p.means = Tensor<T>::from({1, K, 1, 1}, std::vector<T>(means.begin(), means.end()));
  p.log_scales =
      Tensor<T>::from({1, K, 1, 1}, std::vector<T>(log_scales.begin(), log_scales.end()));
  return p;
}

inline double bin_mass(const DmolParams<double>& p, int level) {
  auto x = Tensor<double>::from({1, 1, 1, 1}, {level / 127.5 - 1.0});
  return std::exp(dmol_logprob(x, p).val()[0]);
}

}  // namespace dmolcheck_detail

inline DmolCheckReport run_dmol_check(int norm_draws = 1000,
                                      std::size_t histogram_draws = 100000,
                                      std::uint64_t seed = 0) {
  using namespace dmolcheck_detail;
  DmolCheckReport rep;
  Rng rng(seed ^ 0xD1157ull);

  for (int d = 0; d < norm_draws; ++d) {
    const int K = 1 + int(rng.below(3));
    std::vector<double> logits, means, scales;
    for (int k = 0; k < K; ++k) {
      logits.push_back(2 * rng.uniform() - 1);
      // Force the documented edge cases into the sweep: means exactly at the
      // grid boundary and the clamp floor on the scale.
      if (d % 7 == 0)
        means.push_back(k % 2 ? 1.0 : -1.0);
      else
        means.push_back(2.2 * rng.uniform() - 1.1);
      if (d % 5 == 0)
        scales.push_back(-7.0);
      else
        scales.push_back(-6.0 + 6.0 * rng.uniform());
    }
    auto p = scalar_params(logits, means, scales);
    double total = 0;
    for (int level = 0; level < 256; ++level) total += bin_mass(p, level);
    rep.max_norm_deviation = std::max(rep.max_norm_deviation, std::abs(total - 1.0));
    ++rep.norm_draws;
  }

  // Single-component scalar sampler histogram against analytic bin masses.
  {
    auto p = scalar_params({0.0}, {-0.2}, {-4.5});
    std::vector<double> mass(256);
    for (int level = 0; level < 256; ++level) mass[level] = bin_mass(p, level);
    std::vector<std::size_t> counts(256, 0);
    Rng srng(seed + 0xBADA57ull);
    for (std::size_t i = 0; i < histogram_draws; ++i)
      ++counts[dmol_sample(p, srng)[0]];
    const double n = double(histogram_draws);
    for (int level = 0; level < 256; ++level) {
      const double sigma = std::sqrt(std::max(1e-300, n * mass[level] * (1 - mass[level])));
      if (std::abs(double(counts[level]) - n * mass[level]) > 3 * sigma + 1e-9)
        ++rep.histogram_violations;
    }
    rep.histogram_draws = histogram_draws;
  }
  return rep;
}

}  // namespace vdvae
