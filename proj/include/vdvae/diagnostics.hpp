#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vdvae/config.hpp"
#include "vdvae/dataset.hpp"
#include "vdvae/trainer.hpp"

namespace vdvae {

inline constexpr double kCollapseThresholdBpd = 1e-4;

// Per-layer average KL rate over an evaluation split.
struct RateProfile {
  std::vector<double> kl_bpd;      // mean KL per layer, bits per dim
  std::vector<double> cum_kl_bpd;  // prefix sums of kl_bpd
  std::vector<int> resolutions;    // spatial resolution of each layer
  std::vector<bool> collapsed;     // kl_bpd[i] < kCollapseThresholdBpd

  double total_bpd() const { return cum_kl_bpd.empty() ? 0.0 : cum_kl_bpd.back(); }

  std::string to_csv() const {
    std::string s = "layer,resolution,kl_bpd,cum_kl_bpd\n";
    for (std::size_t i = 0; i < kl_bpd.size(); ++i)
      s += std::to_string(i) + "," + std::to_string(resolutions[i]) + "," +
           format_double(kl_bpd[i]) + "," + format_double(cum_kl_bpd[i]) + "\n";
    return s;
  }
};

// Average per-layer KL (bits/dim) over a split; deterministic in eval_seed.
template <typename T>
RateProfile kl_per_layer(TrainState<T>& s, const Dataset& ds,
                         const std::vector<std::size_t>& split, int batch_size,
                         std::uint64_t eval_seed = 1) {
  if (split.empty()) throw std::invalid_argument("kl_per_layer: empty split");
  Rng noise(eval_seed);
  std::vector<double> accum;
  std::vector<int> resolutions;
  std::size_t batches = 0;
  for (std::size_t at = 0; at < split.size(); at += batch_size, ++batches) {
    std::vector<std::size_t> idx(
        split.begin() + at,
        split.begin() + std::min(split.size(), at + std::size_t(batch_size)));
    auto batch = make_batch<T>(ds, idx, s.stats);
    auto acts = s.model.encode(batch.input);
    DecodeOptions<T> opt;
    opt.posterior_up_to_resolution = s.model_cfg.image_size;
    opt.group_k = s.model_cfg.group_k;
    opt.rng = &noise;
    auto state = s.model.decode(&acts, int(idx.size()), opt);
    const auto& xs = batch.target.shape();
    const double inv = 1.0 / (double(xs[0]) * xs[1] * xs[2] * xs[3]);
    if (accum.empty()) {
      accum.assign(state.layers.size(), 0.0);
      for (const auto& l : state.layers) resolutions.push_back(l.resolution);
    }
    for (std::size_t i = 0; i < state.layers.size(); ++i)
      accum[i] += double(sum(state.layers[i].kl_elem).item()) * inv;
  }
  RateProfile p;
  p.resolutions = resolutions;
  double cum = 0;
  for (double a : accum) {
    double bpd = a / double(batches) / std::log(2.0);
    p.kl_bpd.push_back(bpd);
    cum += bpd;
    p.cum_kl_bpd.push_back(cum);
    p.collapsed.push_back(bpd < kCollapseThresholdBpd);
  }
  return p;
}

// Fraction of all latent variables that live at resolution <= r:
// (sum over spec entries with resolution <= r of count * zdim * res^2) / total.
inline double cumulative_latent_fraction(const BlockSpec& dec_spec, int zdim, int r) {
  double at_or_below = 0, total = 0;
  for (const auto& e : dec_spec.ladder) {
    double n = double(e.count) * zdim * e.resolution * e.resolution;
    total += n;
    if (e.resolution <= r) at_or_below += n;
  }
  if (total == 0) throw std::invalid_argument("cumulative_latent_fraction: empty spec");
  return at_or_below / total;
}

// Converts a planar-channel sample batch (as produced by dmol_sample) to the
// interleaved HWC layout used by Dataset and the PPM writers.
inline std::vector<std::uint8_t> planar_to_hwc(const std::vector<std::uint8_t>& chw,
                                               int n, int h, int w, int c) {
  std::vector<std::uint8_t> out(chw.size());
  const std::size_t plane = std::size_t(h) * w;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < plane; ++i)
        out[(std::size_t(b) * plane + i) * c + ch] =
            chw[(std::size_t(b) * c + ch) * plane + i];
  return out;
}

// Decodes a batch with posteriors used up to `up_to_resolution` and the prior
// (at `temperature`) above it; pixels are drawn from the DMoL head at the same
// temperature. Returns u8 HWC images. up_to_resolution = 0 is a pure prior
// sample; up_to_resolution = image_size is a full reconstruction.
template <typename T>
std::vector<std::uint8_t> partial_reconstruct(TrainState<T>& s, const Dataset& ds,
                                              const std::vector<std::size_t>& indices,
                                              int up_to_resolution, double temperature,
                                              Rng& rng) {
  if (up_to_resolution != 0 && up_to_resolution != s.model_cfg.image_size) {
    bool known = false;
    for (const auto& e : s.model_cfg.dec_spec.ladder)
      if (e.resolution == up_to_resolution) known = true;
    if (!known)
      throw std::invalid_argument("partial_reconstruct: resolution " +
                                  std::to_string(up_to_resolution) +
                                  " is not in the decoder spec");
  }
  auto batch = make_batch<T>(ds, indices, s.stats);
  auto acts = s.model.encode(batch.input);
  DecodeOptions<T> opt;
  opt.posterior_up_to_resolution = up_to_resolution;
  opt.temperature = T(temperature);
  opt.group_k = s.model_cfg.group_k;
  opt.rng = &rng;
  auto state = s.model.decode(&acts, int(indices.size()), opt);
  auto pixels = dmol_sample(s.model.output_params(state.xhat), rng, temperature);
  return planar_to_hwc(pixels, int(indices.size()), s.model_cfg.image_size,
                       s.model_cfg.image_size, s.model_cfg.image_channels);
}

// Unconditional samples: prior decode at `temperature`, DMoL pixels at the
// same temperature. Returns n u8 HWC images.
template <typename T>
std::vector<std::uint8_t> sample_images(TrainState<T>& s, int n, double temperature,
                                        Rng& rng) {
  DecodeOptions<T> opt;
  opt.posterior_up_to_resolution = 0;
  opt.temperature = T(temperature);
  opt.group_k = s.model_cfg.group_k;
  opt.rng = &rng;
  auto state = s.model.decode(nullptr, n, opt);
  auto pixels = dmol_sample(s.model.output_params(state.xhat), rng, temperature);
  return planar_to_hwc(pixels, n, s.model_cfg.image_size, s.model_cfg.image_size,
                       s.model_cfg.image_channels);
}

// One trained configuration in an ablation grid.
struct AblationRow {
  std::string config;
  std::uint64_t seed = 0;
  double val_loss_bpd = 0;
  std::size_t params = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;

  std::string to_csv() const {
    std::string s = "config,seed,val_loss_bpd,params\n";
    for (const auto& r : rows)
      s += r.config + "," + std::to_string(r.seed) + "," + format_double(r.val_loss_bpd) +
           "," + std::to_string(r.params) + "\n";
    return s;
  }
};

namespace detail {

template <typename T>
AblationRow run_ablation_cell(ModelConfig mc, TrainConfig tc, const Dataset& ds,
                              const std::string& label) {
  TrainState<T> s(mc, tc, compute_normalization(ds));
  train_loop(s, ds, nullptr, tc.total_steps);
  AblationRow row;
  row.config = label;
  row.seed = tc.seed;
  row.val_loss_bpd =
      evaluate(s, ds, ds.val_idx, tc.batch_size, /*use_ema=*/true) / std::log(2.0);
  row.params = s.model.params().total_elements();
  return row;
}

}  // namespace detail

// Trains one model per (K, seed) where K consecutive decoder blocks act
// independently; effective depth is total_blocks / K. Parameter counts are
// identical across the grid by construction and asserted here.
template <typename T>
AblationResult depth_ablation(const ModelConfig& base, const TrainConfig& train_base,
                              const Dataset& ds, const std::vector<int>& k_values,
                              const std::vector<std::uint64_t>& seeds) {
  for (int k : k_values) validate_group_k(base.dec_spec, k);
  AblationResult out;
  for (int k : k_values)
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = base;
      mc.group_k = k;
      TrainConfig tc = train_base;
      tc.seed = seed;
      out.rows.push_back(
          detail::run_ablation_cell<T>(mc, tc, ds, "K=" + std::to_string(k)));
    }
  for (const auto& r : out.rows)
    if (r.params != out.rows.front().params)
      throw std::logic_error("depth_ablation: parameter count varies across the grid");
  return out;
}

// Trains one model per decoder spec; all specs must have the same total block
// count so the comparison varies only where capacity sits in the hierarchy.
template <typename T>
AblationResult layer_distribution_ablation(const ModelConfig& base,
                                           const TrainConfig& train_base,
                                           const Dataset& ds,
                                           const std::vector<std::string>& dec_specs,
                                           const std::vector<std::uint64_t>& seeds) {
  if (dec_specs.empty())
    throw std::invalid_argument("layer_distribution_ablation: no specs");
  int total = parse_block_spec(dec_specs.front()).total_blocks();
  for (const auto& spec : dec_specs)
    if (parse_block_spec(spec).total_blocks() != total)
      throw std::invalid_argument(
          "layer_distribution_ablation: specs have unequal total block counts");
  AblationResult out;
  for (const auto& spec : dec_specs)
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = base;
      mc.dec_spec = parse_block_spec(spec);
      TrainConfig tc = train_base;
      tc.seed = seed;
      out.rows.push_back(detail::run_ablation_cell<T>(mc, tc, ds, spec));
    }
  return out;
}

}  // namespace vdvae
