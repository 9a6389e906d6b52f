#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vdvae/config.hpp"
#include "vdvae/dmol.hpp"
#include "vdvae/gaussian.hpp"
#include "vdvae/ops.hpp"

namespace vdvae {

template <typename T>
struct ElboResult {
  Tensor<T> total_loss;            // scalar graph node, nats per subpixel
  double nll_per_subpixel = 0;     // reconstruction term, nats
  std::vector<double> kl_per_layer;  // nats per subpixel, one entry per layer
  double total_nats = 0;
  double bits_per_dim = 0;
};

// Per-subpixel negative ELBO: (-sum log p(x|z) + sum_layers KL) / (B * C * H * W).
template <typename T>
ElboResult<T> elbo(const Tensor<T>& x, const TopDownState<T>& state,
                   const DmolParams<T>& out_params) {
  const auto& xs = x.shape();
  const double subpixels = double(xs[0]) * xs[1] * xs[2] * xs[3];
  const T inv = T(1.0 / subpixels);

  auto logp = dmol_logprob(x, out_params);
  auto nll = scale(neg(sum(logp)), inv);
  if (!std::isfinite(double(nll.item())))
    throw std::runtime_error("elbo: non-finite reconstruction term");

  ElboResult<T> r;
  r.nll_per_subpixel = double(nll.item());
  Tensor<T> total = nll;
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    auto kl = scale(sum(state.layers[i].kl_elem), inv);
    if (!std::isfinite(double(kl.item())))
      throw std::runtime_error("elbo: non-finite KL at layer " + std::to_string(i));
    r.kl_per_layer.push_back(double(kl.item()));
    total = add(total, kl);
  }
  r.total_loss = total;
  r.total_nats = double(total.item());
  r.bits_per_dim = r.total_nats / std::log(2.0);
  return r;
}

// KL part of the training objective, summed over layers and elements.
//
// In the standard-prior phase the posterior is pulled toward N(0,I) while the
// prior is fitted to the frozen posterior. The prior-fitting term enters with
// its own value subtracted out (x - detach(x)), so it contributes gradients to
// the prior parameters only and never changes the reported loss value; when
// the prior equals N(0,I) the phase loss therefore matches the true KL exactly.
template <typename T>
Tensor<T> kl_phase_sum(const TopDownState<T>& state, KlPhase phase) {
  Tensor<T> total;
  for (const auto& l : state.layers) {
    Tensor<T> term;
    if (phase == KlPhase::true_kl_phase) {
      term = sum(l.kl_elem);
    } else {
      auto std_prior = GaussianParams<T>::standard(l.z.shape());
      GaussianParams<T> q_frozen{detach(l.q.mean), detach(l.q.log_std)};
      auto anchor = sum(gaussian_kl(l.q, std_prior));
      auto fit = sum(gaussian_kl(q_frozen, l.p));
      term = add(anchor, sub(fit, detach(fit)));
    }
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace vdvae
