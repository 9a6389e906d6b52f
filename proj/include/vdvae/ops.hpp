#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vdvae/tensor.hpp"

namespace vdvae {

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<T> val,
                      std::vector<NodePtr<T>> parents,
                      std::function<void(TensorNode<T>&)> backprop) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  for (auto& p : parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor<T>(std::move(n));
}

// dfdx(x, y) is evaluated lazily during backward.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF dfdx) {
  std::vector<T> out(a.size());
  const auto& x = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_result<T>(a.shape(), std::move(out), {a.node_ptr()},
                        [dfdx](TensorNode<T>& n) {
                          auto& p = *n.parents[0];
                          if (!p.requires_grad) return;
                          p.ensure_grad();
                          for (std::size_t i = 0; i < n.val.size(); ++i)
                            p.grad[i] += n.grad[i] * dfdx(p.val[i], n.val[i]);
                        });
}

}  // namespace detail

// ---- elementwise binary -----------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] + b.val()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [](TensorNode<T>& n) {
                                  for (auto& pp : n.parents) {
                                    if (!pp->requires_grad) continue;
                                    pp->ensure_grad();
                                    for (std::size_t i = 0; i < n.val.size(); ++i)
                                      pp->grad[i] += n.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] - b.val()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [](TensorNode<T>& n) {
                                  auto& pa = *n.parents[0];
                                  auto& pb = *n.parents[1];
                                  if (pa.requires_grad) {
                                    pa.ensure_grad();
                                    for (std::size_t i = 0; i < n.val.size(); ++i)
                                      pa.grad[i] += n.grad[i];
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    for (std::size_t i = 0; i < n.val.size(); ++i)
                                      pb.grad[i] -= n.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] * b.val()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [](TensorNode<T>& n) {
                                  auto& pa = *n.parents[0];
                                  auto& pb = *n.parents[1];
                                  if (pa.requires_grad) {
                                    pa.ensure_grad();
                                    for (std::size_t i = 0; i < n.val.size(); ++i)
                                      pa.grad[i] += n.grad[i] * pb.val[i];
                                  }
                                  if (pb.requires_grad) {
                                    pb.ensure_grad();
                                    for (std::size_t i = 0; i < n.val.size(); ++i)
                                      pb.grad[i] += n.grad[i] * pa.val[i];
                                  }
                                });
}

// ---- elementwise unary ------------------------------------------------------

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); },
                       [](T, T y) { return T(1) - y * y; });
}

namespace detail {
template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}
template <typename T>
T softplus_scalar(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}
}  // namespace detail

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return detail::sigmoid_scalar(x); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary(a, [](T x) { return detail::softplus_scalar(x); },
                       [](T x, T) { return detail::sigmoid_scalar(x); });
}

// Exact GELU, x * Phi(x) with the erf-based normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  return detail::unary(
      a,
      [](T x) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        return T(0.5 * double(x) * (1.0 + std::erf(double(x) * inv_sqrt2)));
      },
      [](T x, T) {
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        double phi = 0.5 * (1.0 + std::erf(double(x) * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x));
        return T(phi + double(x) * pdf);
      });
}

// max(x, c); subgradient passes where x >= c, zero where clamped.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x < c ? c : x; },
                       [c](T x, T) { return x >= c ? T(1) : T(0); });
}

// out[i] = mask[i] ? a[i] : b[i]. The mask is data, not graph; no gradient
// flows through the condition.
template <typename T>
Tensor<T> select(const std::vector<std::uint8_t>& mask, const Tensor<T>& a,
                 const Tensor<T>& b) {
  check_same_shape(a, b, "select");
  if (mask.size() != a.size()) throw std::invalid_argument("select: mask length mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] ? a.val()[i] : b.val()[i];
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
  return detail::make_result<T>(a.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
                                [m](TensorNode<T>& n) {
                                  auto& pa = *n.parents[0];
                                  auto& pb = *n.parents[1];
                                  // Both inputs participate in the op, so both get a
                                  // grad buffer even if the mask never picks them.
                                  if (pa.requires_grad) pa.ensure_grad();
                                  if (pb.requires_grad) pb.ensure_grad();
                                  for (std::size_t i = 0; i < n.val.size(); ++i) {
                                    auto& p = (*m)[i] ? pa : pb;
                                    if (!p.requires_grad) continue;
                                    p.grad[i] += n.grad[i];
                                  }
                                });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.val()) s += v;
  return detail::make_result<T>({1}, {s}, {a.node_ptr()}, [](TensorNode<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (std::size_t i = 0; i < p.val.size(); ++i) p.grad[i] += n.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), T(1) / T(a.size()));
}

// ---- shape / channel ops ----------------------------------------------------

namespace detail {
template <typename T>
void check_nchw(const Tensor<T>& a, const char* op) {
  if (a.shape().size() != 4)
    throw std::invalid_argument(std::string(op) + ": expected NCHW tensor, got " +
                                shape_str(a.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  detail::check_nchw(parts[0], "concat_channels");
  int B = parts[0].shape()[0], H = parts[0].shape()[2], W = parts[0].shape()[3];
  int C = 0;
  for (const auto& p : parts) {
    detail::check_nchw(p, "concat_channels");
    if (p.shape()[0] != B || p.shape()[2] != H || p.shape()[3] != W)
      throw std::invalid_argument("concat_channels: incompatible shapes");
    C += p.shape()[1];
  }
  std::vector<T> out(std::size_t(B) * C * H * W);
  const std::size_t plane = std::size_t(H) * W;
  std::vector<detail::NodePtr<T>> parents;
  std::vector<int> channels;
  for (const auto& p : parts) {
    parents.push_back(p.node_ptr());
    channels.push_back(p.shape()[1]);
  }
  for (int b = 0; b < B; ++b) {
    std::size_t coff = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      int pc = channels[pi];
      const T* src = parts[pi].val().data() + std::size_t(b) * pc * plane;
      T* dst = out.data() + (std::size_t(b) * C + coff) * plane;
      std::copy(src, src + std::size_t(pc) * plane, dst);
      coff += std::size_t(pc);
    }
  }
  return detail::make_result<T>({B, C, H, W}, std::move(out), std::move(parents),
                                [B, C, plane, channels](TensorNode<T>& n) {
                                  for (int b = 0; b < B; ++b) {
                                    std::size_t coff = 0;
                                    for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
                                      int pc = channels[pi];
                                      auto& p = *n.parents[pi];
                                      if (p.requires_grad) {
                                        p.ensure_grad();
                                        const T* src =
                                            n.grad.data() + (std::size_t(b) * C + coff) * plane;
                                        T* dst = p.grad.data() + std::size_t(b) * pc * plane;
                                        for (std::size_t i = 0; i < std::size_t(pc) * plane; ++i)
                                          dst[i] += src[i];
                                      }
                                      coff += std::size_t(pc);
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int c0, int c1) {
  detail::check_nchw(a, "slice_channels");
  int B = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for C=" + std::to_string(C));
  int SC = c1 - c0;
  const std::size_t plane = std::size_t(H) * W;
  std::vector<T> out(std::size_t(B) * SC * plane);
  for (int b = 0; b < B; ++b) {
    const T* src = a.val().data() + (std::size_t(b) * C + c0) * plane;
    std::copy(src, src + std::size_t(SC) * plane,
              out.data() + std::size_t(b) * SC * plane);
  }
  return detail::make_result<T>({B, SC, H, W}, std::move(out), {a.node_ptr()},
                                [B, C, c0, SC, plane](TensorNode<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int b = 0; b < B; ++b) {
                                    const T* src = n.grad.data() + std::size_t(b) * SC * plane;
                                    T* dst = p.grad.data() + (std::size_t(b) * C + c0) * plane;
                                    for (std::size_t i = 0; i < std::size_t(SC) * plane; ++i)
                                      dst[i] += src[i];
                                  }
                                });
}

// (1,C,H,W) -> (B,C,H,W)
template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& a, int B) {
  detail::check_nchw(a, "broadcast_batch");
  if (a.shape()[0] != 1) throw std::invalid_argument("broadcast_batch: batch extent must be 1");
  const std::size_t n = a.size();
  std::vector<T> out(std::size_t(B) * n);
  for (int b = 0; b < B; ++b)
    std::copy(a.val().begin(), a.val().end(), out.begin() + std::size_t(b) * n);
  std::vector<int> shape = a.shape();
  shape[0] = B;
  return detail::make_result<T>(std::move(shape), std::move(out), {a.node_ptr()},
                                [B, n](TensorNode<T>& n_) {
                                  auto& p = *n_.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int b = 0; b < B; ++b)
                                    for (std::size_t i = 0; i < n; ++i)
                                      p.grad[i] += n_.grad[std::size_t(b) * n + i];
                                });
}

// (B,1,H,W) -> (B,C,H,W)
template <typename T>
Tensor<T> broadcast_channels(const Tensor<T>& a, int C) {
  detail::check_nchw(a, "broadcast_channels");
  if (a.shape()[1] != 1)
    throw std::invalid_argument("broadcast_channels: channel extent must be 1");
  int B = a.shape()[0], H = a.shape()[2], W = a.shape()[3];
  const std::size_t plane = std::size_t(H) * W;
  std::vector<T> out(std::size_t(B) * C * plane);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      std::copy(a.val().begin() + std::size_t(b) * plane,
                a.val().begin() + std::size_t(b + 1) * plane,
                out.begin() + (std::size_t(b) * C + c) * plane);
  return detail::make_result<T>({B, C, H, W}, std::move(out), {a.node_ptr()},
                                [B, C, plane](TensorNode<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int b = 0; b < B; ++b)
                                    for (int c = 0; c < C; ++c) {
                                      const T* src =
                                          n.grad.data() + (std::size_t(b) * C + c) * plane;
                                      T* dst = p.grad.data() + std::size_t(b) * plane;
                                      for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
                                    }
                                });
}

// log-sum-exp over the channel axis, (B,C,H,W) -> (B,1,H,W)
template <typename T>
Tensor<T> logsumexp_channels(const Tensor<T>& a) {
  detail::check_nchw(a, "logsumexp_channels");
  int B = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  const std::size_t plane = std::size_t(H) * W;
  std::vector<T> out(std::size_t(B) * plane);
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      T m = a.val()[(std::size_t(b) * C) * plane + i];
      for (int c = 1; c < C; ++c)
        m = std::max(m, a.val()[(std::size_t(b) * C + c) * plane + i]);
      T s = 0;
      for (int c = 0; c < C; ++c)
        s += std::exp(a.val()[(std::size_t(b) * C + c) * plane + i] - m);
      out[std::size_t(b) * plane + i] = m + std::log(s);
    }
  return detail::make_result<T>(
      {B, 1, H, W}, std::move(out), {a.node_ptr()}, [B, C, plane](TensorNode<T>& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int b = 0; b < B; ++b)
          for (std::size_t i = 0; i < plane; ++i) {
            T lse = n.val[std::size_t(b) * plane + i];
            T g = n.grad[std::size_t(b) * plane + i];
            for (int c = 0; c < C; ++c) {
              std::size_t idx = (std::size_t(b) * C + c) * plane + i;
              p.grad[idx] += g * std::exp(p.val[idx] - lse);
            }
          }
      });
}

// ---- spatial ops ------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& a, int factor) {
  detail::check_nchw(a, "avg_pool");
  int B = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  if (factor < 1 || H % factor != 0 || W % factor != 0)
    throw std::invalid_argument("avg_pool: spatial size " + std::to_string(H) + "x" +
                                std::to_string(W) + " not divisible by factor " +
                                std::to_string(factor));
  int OH = H / factor, OW = W / factor;
  std::vector<T> out(std::size_t(B) * C * OH * OW);
  const T inv = T(1) / T(factor * factor);
  for (int bc = 0; bc < B * C; ++bc) {
    const T* in = a.val().data() + std::size_t(bc) * H * W;
    T* o = out.data() + std::size_t(bc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        // Mean as first + mean(deltas): exact on constant windows, so the
        // avg_pool(nn_upsample(x)) composition is the identity bit for bit.
        const T first = in[(oh * factor) * W + ow * factor];
        T s = 0;
        for (int dh = 0; dh < factor; ++dh)
          for (int dw = 0; dw < factor; ++dw)
            s += in[(oh * factor + dh) * W + ow * factor + dw] - first;
        o[oh * OW + ow] = first + s * inv;
      }
  }
  return detail::make_result<T>({B, C, OH, OW}, std::move(out), {a.node_ptr()},
                                [B, C, H, W, OH, OW, factor, inv](TensorNode<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int bc = 0; bc < B * C; ++bc) {
                                    const T* g = n.grad.data() + std::size_t(bc) * OH * OW;
                                    T* pg = p.grad.data() + std::size_t(bc) * H * W;
                                    for (int oh = 0; oh < OH; ++oh)
                                      for (int ow = 0; ow < OW; ++ow) {
                                        T gv = g[oh * OW + ow] * inv;
                                        for (int dh = 0; dh < factor; ++dh)
                                          for (int dw = 0; dw < factor; ++dw)
                                            pg[(oh * factor + dh) * W + ow * factor + dw] += gv;
                                      }
                                  }
                                });
}

template <typename T>
Tensor<T> nn_upsample(const Tensor<T>& a, int factor) {
  detail::check_nchw(a, "nn_upsample");
  if (factor < 1) throw std::invalid_argument("nn_upsample: factor must be >= 1");
  int B = a.shape()[0], C = a.shape()[1], H = a.shape()[2], W = a.shape()[3];
  int OH = H * factor, OW = W * factor;
  std::vector<T> out(std::size_t(B) * C * OH * OW);
  for (int bc = 0; bc < B * C; ++bc) {
    const T* in = a.val().data() + std::size_t(bc) * H * W;
    T* o = out.data() + std::size_t(bc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) o[oh * OW + ow] = in[(oh / factor) * W + ow / factor];
  }
  return detail::make_result<T>({B, C, OH, OW}, std::move(out), {a.node_ptr()},
                                [B, C, H, W, OH, OW, factor](TensorNode<T>& n) {
                                  auto& p = *n.parents[0];
                                  if (!p.requires_grad) return;
                                  p.ensure_grad();
                                  for (int bc = 0; bc < B * C; ++bc) {
                                    const T* g = n.grad.data() + std::size_t(bc) * OH * OW;
                                    T* pg = p.grad.data() + std::size_t(bc) * H * W;
                                    for (int oh = 0; oh < OH; ++oh)
                                      for (int ow = 0; ow < OW; ++ow)
                                        pg[(oh / factor) * W + ow / factor] += g[oh * OW + ow];
                                  }
                                });
}

// ---- conv2d -----------------------------------------------------------------

// Cross-correlation, NCHW input, (OC, IC/groups, k, k) weight. Channels are
// partitioned into `groups` consecutive runs.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride, int padding, int groups = 1) {
  detail::check_nchw(input, "conv2d");
  if (weight.shape().size() != 4) throw std::invalid_argument("conv2d: weight must be rank 4");
  const int B = input.shape()[0], IC = input.shape()[1], H = input.shape()[2],
            W = input.shape()[3];
  const int OC = weight.shape()[0], ICg = weight.shape()[1], K = weight.shape()[2];
  if (weight.shape()[3] != K) throw std::invalid_argument("conv2d: kernel must be square");
  if (groups < 1 || IC % groups != 0 || OC % groups != 0)
    throw std::invalid_argument("conv2d: channels not divisible by groups (" +
                                std::to_string(IC) + "/" + std::to_string(OC) + " by " +
                                std::to_string(groups) + ")");
  if (ICg != IC / groups)
    throw std::invalid_argument("conv2d: weight input channels " + std::to_string(ICg) +
                                " != " + std::to_string(IC / groups));
  if (bias.shape() != std::vector<int>{OC})
    throw std::invalid_argument("conv2d: bias must have shape (OC)");
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  const int OH = (H + 2 * padding - K) / stride + 1;
  const int OW = (W + 2 * padding - K) / stride + 1;
  if (OH < 1 || OW < 1) throw std::invalid_argument("conv2d: output size would be empty");
  const int OCg = OC / groups;

  // Inclusive output ranges for which the tap (kh,kw) reads inside the image.
  // Captured by value: these outlive this call inside the backward closure.
  auto lo = [=](int k) { return std::max(0, (padding - k + stride - 1) / stride); };
  auto hi_h = [=](int k) { return std::min(OH - 1, (H - 1 - k + padding) / stride); };
  auto hi_w = [=](int k) { return std::min(OW - 1, (W - 1 - k + padding) / stride); };

  std::vector<T> out(std::size_t(B) * OC * OH * OW);
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g)
      for (int ocl = 0; ocl < OCg; ++ocl) {
        const int oc = g * OCg + ocl;
        T* o = out.data() + (std::size_t(b) * OC + oc) * OH * OW;
        const T bz = bias.val()[oc];
        for (int i = 0; i < OH * OW; ++i) o[i] = bz;
        for (int icl = 0; icl < ICg; ++icl) {
          const int ic = g * ICg + icl;
          const T* in = input.val().data() + (std::size_t(b) * IC + ic) * H * W;
          const T* wrow = weight.val().data() + (std::size_t(oc) * ICg + icl) * K * K;
          for (int kh = 0; kh < K; ++kh) {
            const int oh0 = lo(kh), oh1 = hi_h(kh);
            for (int kw = 0; kw < K; ++kw) {
              const T wv = wrow[kh * K + kw];
              if (wv == T(0)) continue;
              const int ow0 = lo(kw), ow1 = hi_w(kw);
              for (int oh = oh0; oh <= oh1; ++oh) {
                const T* irow = in + (oh * stride + kh - padding) * W - padding + kw;
                T* orow = o + oh * OW;
                for (int ow = ow0; ow <= ow1; ++ow) orow[ow] += wv * irow[ow * stride];
              }
            }
          }
        }
      }

  auto backprop = [B, IC, H, W, OC, ICg, K, OH, OW, OCg, stride, padding, lo, hi_h,
                   hi_w](TensorNode<T>& n) {
    auto& pin = *n.parents[0];
    auto& pw = *n.parents[1];
    auto& pb = *n.parents[2];
    const int groups = IC / ICg;
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < OC; ++oc) {
          const T* g = n.grad.data() + (std::size_t(b) * OC + oc) * OH * OW;
          T s = 0;
          for (int i = 0; i < OH * OW; ++i) s += g[i];
          pb.grad[oc] += s;
        }
    }
    if (pin.requires_grad) pin.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (!pin.requires_grad && !pw.requires_grad) return;
    for (int b = 0; b < B; ++b)
      for (int g = 0; g < groups; ++g)
        for (int ocl = 0; ocl < OCg; ++ocl) {
          const int oc = g * OCg + ocl;
          const T* go = n.grad.data() + (std::size_t(b) * OC + oc) * OH * OW;
          for (int icl = 0; icl < ICg; ++icl) {
            const int ic = g * ICg + icl;
            const T* in = pin.val.data() + (std::size_t(b) * IC + ic) * H * W;
            T* gin = pin.requires_grad
                         ? pin.grad.data() + (std::size_t(b) * IC + ic) * H * W
                         : nullptr;
            const T* wrow = pw.val.data() + (std::size_t(oc) * ICg + icl) * K * K;
            T* gw = pw.requires_grad
                        ? pw.grad.data() + (std::size_t(oc) * ICg + icl) * K * K
                        : nullptr;
            for (int kh = 0; kh < K; ++kh) {
              const int oh0 = lo(kh), oh1 = hi_h(kh);
              for (int kw = 0; kw < K; ++kw) {
                const int ow0 = lo(kw), ow1 = hi_w(kw);
                const T wv = wrow[kh * K + kw];
                T wacc = 0;
                for (int oh = oh0; oh <= oh1; ++oh) {
                  const int ibase = (oh * stride + kh - padding) * W - padding + kw;
                  const T* grow = go + oh * OW;
                  for (int ow = ow0; ow <= ow1; ++ow) {
                    const T gv = grow[ow];
                    if (gw) wacc += gv * in[ibase + ow * stride];
                    if (gin) gin[ibase + ow * stride] += gv * wv;
                  }
                }
                if (gw) gw[kh * K + kw] += wacc;
              }
            }
          }
        }
  };
  return detail::make_result<T>({B, OC, OH, OW}, std::move(out),
                                {input.node_ptr(), weight.node_ptr(), bias.node_ptr()},
                                std::move(backprop));
}

// ---- linear -----------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2)
    throw std::invalid_argument("linear: expects (B,F) input and (O,F) weight");
  const int B = x.shape()[0], F = x.shape()[1], O = w.shape()[0];
  if (w.shape()[1] != F || b.shape() != std::vector<int>{O})
    throw std::invalid_argument("linear: shape mismatch");
  std::vector<T> out(std::size_t(B) * O);
  for (int i = 0; i < B; ++i)
    for (int o = 0; o < O; ++o) {
      T s = b.val()[o];
      for (int f = 0; f < F; ++f) s += x.val()[i * F + f] * w.val()[o * F + f];
      out[i * O + o] = s;
    }
  return detail::make_result<T>(
      {B, O}, std::move(out), {x.node_ptr(), w.node_ptr(), b.node_ptr()},
      [B, F, O](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pw = *n.parents[1];
        auto& pb = *n.parents[2];
        if (px.requires_grad) px.ensure_grad();
        if (pw.requires_grad) pw.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (int i = 0; i < B; ++i)
          for (int o = 0; o < O; ++o) {
            const T g = n.grad[i * O + o];
            if (pb.requires_grad) pb.grad[o] += g;
            for (int f = 0; f < F; ++f) {
              if (px.requires_grad) px.grad[i * F + f] += g * pw.val[o * F + f];
              if (pw.requires_grad) pw.grad[o * F + f] += g * px.val[i * F + f];
            }
          }
      });
}

// ---- detach / grad utilities ------------------------------------------------

// Value-identical copy through which no gradient flows.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = a.shape();
  n->val = a.val();
  return Tensor<T>(std::move(n));
}

// Single L2 norm over the concatenation of all parameter gradients. NaN in
// any gradient propagates to the result. Parameters that did not take part
// in the graph (e.g. encoder levels a shallow decoder never reads) have no
// gradient buffer and contribute zero.
template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) ss += double(g) * double(g);
  }
  return std::sqrt(ss);
}

}  // namespace vdvae
