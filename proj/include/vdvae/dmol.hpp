#pragma once

// Discretized mixture of logistics pixel likelihood. Pixels live on the
// 256-level grid rescaled to [-1, 1] with bin half-width 1/255; edge bins
// integrate to +-infinity. RGB inputs use sequential channel coupling
// (green on red, blue on red and green); single-channel data uses the
// coupling-free variant.

#include <cstdint>
#include <vector>

#include "vdvae/ops.hpp"
#include "vdvae/rng.hpp"
#include "vdvae/tensor.hpp"

namespace vdvae {

inline constexpr double kDmolLogScaleFloor = -7.0;
inline constexpr double kDmolBinHalfWidth = 1.0 / 255.0;

template <typename T>
struct DmolParams {
  Tensor<T> mixture_logits;  // (B, K, H, W)
  Tensor<T> means;           // (B, K*C, H, W), component-major (k, c)
  Tensor<T> log_scales;      // (B, K*C, H, W), clamped at -7 inside the likelihood
  Tensor<T> coeffs_raw;      // (B, K*3, H, W), tanh-squashed; undefined when C == 1
  int mixtures = 0;
  int channels = 0;
};

template <typename T>
int dmol_head_channels(int mixtures, int image_channels) {
  return image_channels == 3 ? mixtures * 10 : mixtures * (2 * image_channels + 1);
}

// Splits the (B, head, H, W) output-head map into mixture parameter blocks:
// [K logits][K*C means][K*C log scales][K*3 coupling coefficients (RGB only)].
template <typename T>
DmolParams<T> split_dmol_head(const Tensor<T>& head, int mixtures, int image_channels) {
  const int K = mixtures, C = image_channels;
  if (C != 1 && C != 3)
    throw std::invalid_argument("dmol: only 1- or 3-channel images supported");
  if (head.shape()[1] != dmol_head_channels<T>(K, C))
    throw std::invalid_argument("dmol: head has " + std::to_string(head.shape()[1]) +
                                " channels, expected " +
                                std::to_string(dmol_head_channels<T>(K, C)));
  DmolParams<T> p;
  p.mixtures = K;
  p.channels = C;
  p.mixture_logits = slice_channels(head, 0, K);
  p.means = slice_channels(head, K, K + K * C);
  p.log_scales = slice_channels(head, K + K * C, K + 2 * K * C);
  if (C == 3) p.coeffs_raw = slice_channels(head, K + 2 * K * C, K + 2 * K * C + K * 3);
  return p;
}

namespace detail {

// log-probability mass of one channel's bin under one logistic component.
// x is data (no gradient); m may carry coupling terms.
template <typename T>
Tensor<T> logistic_bin_logprob(const Tensor<T>& x, const Tensor<T>& m,
                               const Tensor<T>& log_scale) {
  auto ls = clamp_min(log_scale, T(kDmolLogScaleFloor));
  auto inv_s = exp(neg(ls));
  auto centered = sub(x, m);
  auto plus_in = mul(add_scalar(centered, T(kDmolBinHalfWidth)), inv_s);
  auto min_in = mul(add_scalar(centered, T(-kDmolBinHalfWidth)), inv_s);

  auto log_cdf_plus = sub(plus_in, softplus(plus_in));  // log sigmoid
  auto log_one_minus_cdf_min = neg(softplus(min_in));
  // sigmoid(a) - sigmoid(b) = sigmoid(a) * sigmoid(-b) * (1 - e^{b-a}):
  // the product form avoids the catastrophic cancellation of subtracting two
  // sigmoids that both sit near 0 or 1, which dominates the f32 gradient error.
  auto gap = scale(inv_s, T(2 * kDmolBinHalfWidth));  // plus_in - min_in
  auto one_minus_exp = neg(add_scalar(exp(neg(gap)), T(-1)));
  auto cdf_delta = mul(mul(sigmoid(plus_in), sigmoid(neg(min_in))), one_minus_exp);
  auto log_delta = log(clamp_min(cdf_delta, T(1e-12)));
  // Mid-bin density fallback for bins whose mass underflows.
  auto mid_in = mul(centered, inv_s);
  auto log_pdf_mid = sub(sub(mid_in, ls), scale(softplus(mid_in), T(2)));
  auto inner_fallback = add_scalar(log_pdf_mid, T(-std::log(127.5)));

  std::vector<std::uint8_t> mass_ok(cdf_delta.size());
  for (std::size_t i = 0; i < mass_ok.size(); ++i)
    mass_ok[i] = cdf_delta.val()[i] > T(1e-5);
  auto inner = select(mass_ok, log_delta, inner_fallback);

  std::vector<std::uint8_t> at_top(x.size()), at_bottom(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    at_top[i] = x.val()[i] > T(0.999);
    at_bottom[i] = x.val()[i] < T(-0.999);
  }
  return select(at_top, log_one_minus_cdf_min, select(at_bottom, log_cdf_plus, inner));
}

}  // namespace detail

// Per-pixel log-likelihood (joint over channels), (B,1,H,W). x is the image
// in [-1,1] quantized to the 256-level grid and carries no gradient.
template <typename T>
Tensor<T> dmol_logprob(const Tensor<T>& x, const DmolParams<T>& p) {
  const int K = p.mixtures, C = p.channels;
  if (x.shape()[1] != C) throw std::invalid_argument("dmol_logprob: channel mismatch");
  for (T v : x.val()) {
    double t = (double(v) + 1.0) * 127.5;
    if (t < -1e-4 || t > 255.0 + 1e-4 || std::abs(t - std::round(t)) > 1e-4)
      throw std::invalid_argument("dmol_logprob: input off the quantization grid");
  }

  auto log_pi = sub(p.mixture_logits,
                    broadcast_channels(logsumexp_channels(p.mixture_logits), K));

  std::vector<Tensor<T>> comp_terms;
  comp_terms.reserve(K);
  std::vector<Tensor<T>> xc(C);
  for (int c = 0; c < C; ++c) xc[c] = slice_channels(x, c, c + 1);

  for (int k = 0; k < K; ++k) {
    Tensor<T> chan_sum;
    for (int c = 0; c < C; ++c) {
      auto m = slice_channels(p.means, k * C + c, k * C + c + 1);
      if (C == 3 && c == 1) {
        auto rg = tanh(slice_channels(p.coeffs_raw, k * 3 + 0, k * 3 + 1));
        m = add(m, mul(rg, xc[0]));
      } else if (C == 3 && c == 2) {
        auto br = tanh(slice_channels(p.coeffs_raw, k * 3 + 1, k * 3 + 2));
        auto gb = tanh(slice_channels(p.coeffs_raw, k * 3 + 2, k * 3 + 3));
        m = add(m, add(mul(br, xc[0]), mul(gb, xc[1])));
      }
      auto ls = slice_channels(p.log_scales, k * C + c, k * C + c + 1);
      auto lp = detail::logistic_bin_logprob(xc[c], m, ls);
      chan_sum = chan_sum.defined() ? add(chan_sum, lp) : lp;
    }
    comp_terms.push_back(add(chan_sum, slice_channels(log_pi, k, k + 1)));
  }
  return logsumexp_channels(concat_channels(comp_terms));
}

// Draws pixels from the mixture: Gumbel-max component selection, inverse-CDF
// logistic sampling, sequential R->G->B coupling, then quantize and clamp.
// Output is u8 NCHW. Raw (unclamped) log scales are honored, so a very
// negative log scale degenerates to rounded means.
template <typename T>
std::vector<std::uint8_t> dmol_sample(const DmolParams<T>& p, Rng& rng,
                                      double temperature = 1.0) {
  const int K = p.mixtures, C = p.channels;
  const auto& ls = p.mixture_logits.shape();
  const int B = ls[0], H = ls[2], W = ls[3];
  const std::size_t plane = std::size_t(H) * W;
  std::vector<std::uint8_t> out(std::size_t(B) * C * plane);
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      double best_v = -1e300;
      for (int k = 0; k < K; ++k) {
        double g = double(p.mixture_logits.val()[(std::size_t(b) * K + k) * plane + i]) +
                   temperature * rng.gumbel();
        if (g > best_v) {
          best_v = g;
          best = k;
        }
      }
      double prev[3] = {0, 0, 0};
      for (int c = 0; c < C; ++c) {
        std::size_t pidx = (std::size_t(b) * K * C + std::size_t(best) * C + c) * plane + i;
        double m = double(p.means.val()[pidx]);
        if (C == 3 && c == 1)
          m += std::tanh(double(
                   p.coeffs_raw.val()[(std::size_t(b) * K * 3 + best * 3 + 0) * plane + i])) *
               prev[0];
        if (C == 3 && c == 2) {
          m += std::tanh(double(
                   p.coeffs_raw.val()[(std::size_t(b) * K * 3 + best * 3 + 1) * plane + i])) *
               prev[0];
          m += std::tanh(double(
                   p.coeffs_raw.val()[(std::size_t(b) * K * 3 + best * 3 + 2) * plane + i])) *
               prev[1];
        }
        double s = std::exp(double(p.log_scales.val()[pidx]));
        double u = rng.uniform_open();
        double xv = m + s * temperature * (std::log(u) - std::log1p(-u));
        prev[c] = std::min(1.0, std::max(-1.0, xv));
        double q = std::round((xv + 1.0) * 127.5);
        out[(std::size_t(b) * C + c) * plane + i] =
            std::uint8_t(std::min(255.0, std::max(0.0, q)));
      }
    }
  return out;
}

}  // namespace vdvae
