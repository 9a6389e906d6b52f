#pragma once

#include "vdvae/ops.hpp"
#include "vdvae/tensor.hpp"

namespace vdvae {

// Diagonal Gaussian given by mean and log standard deviation maps.
template <typename T>
struct GaussianParams {
  Tensor<T> mean;
  Tensor<T> log_std;

  void check() const {
    check_same_shape(mean, log_std, "GaussianParams");
  }

  static GaussianParams standard(const std::vector<int>& shape) {
    return {Tensor<T>::zeros(shape), Tensor<T>::zeros(shape)};
  }
};

// mean + temperature * exp(log_std) * eps, differentiable in mean/log_std.
template <typename T>
Tensor<T> gaussian_sample(const GaussianParams<T>& g, const Tensor<T>& eps, T temperature) {
  g.check();
  check_same_shape(g.mean, eps, "gaussian_sample");
  return add(g.mean, mul(scale(exp(g.log_std), temperature), eps));
}

// Per-element KL(q || p) in closed form:
//   log(sp/sq) + (sq^2 + (mq-mp)^2) / (2 sp^2) - 1/2
template <typename T>
Tensor<T> gaussian_kl(const GaussianParams<T>& q, const GaussianParams<T>& p) {
  q.check();
  p.check();
  check_same_shape(q.mean, p.mean, "gaussian_kl");
  auto log_ratio = sub(p.log_std, q.log_std);
  auto var_term = scale(exp(scale(sub(q.log_std, p.log_std), T(2))), T(0.5));
  auto dmean = sub(q.mean, p.mean);
  auto mean_term = scale(mul(mul(dmean, dmean), exp(scale(p.log_std, T(-2)))), T(0.5));
  return add_scalar(add(log_ratio, add(var_term, mean_term)), T(-0.5));
}

// Per-layer posterior/prior record produced by the top-down pass.
template <typename T>
struct LayerRecord {
  GaussianParams<T> q;
  GaussianParams<T> p;
  Tensor<T> z;
  Tensor<T> kl_elem;  // elementwise true KL(q || p); graph node
  int resolution = 0;
};

template <typename T>
struct TopDownState {
  std::vector<LayerRecord<T>> layers;
  Tensor<T> xhat;  // final feature map fed to the output head
};

}  // namespace vdvae
