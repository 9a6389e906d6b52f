#pragma once

// Finite-difference gradient oracle over the whole op library. The reference
// values never touch an op's backward path: every derivative is checked
// against central difference quotients in double precision. Float gradients
// are checked against the same double-precision quotients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "vdvae/dmol.hpp"
#include "vdvae/gaussian.hpp"
#include "vdvae/ops.hpp"
#include "vdvae/rng.hpp"
#include "vdvae/tensor.hpp"

namespace vdvae {

struct OpCheckEntry {
  std::string op;
  std::size_t cases = 0;
  std::size_t grads_checked = 0;
  double max_rel_err_f64 = 0;
  double max_rel_err_f32 = 0;
};

struct OpCheckReport {
  std::vector<OpCheckEntry> entries;
  double rtol_f64 = 1e-6;
  double rtol_f32 = 1e-3;

  bool pass() const {
    for (const auto& e : entries)
      if (!(e.max_rel_err_f64 < rtol_f64) || !(e.max_rel_err_f32 < rtol_f32))
        return false;
    return true;
  }

  std::string summary() const {
    std::string s;
    char line[160];
    for (const auto& e : entries) {
      bool ok = e.max_rel_err_f64 < rtol_f64 && e.max_rel_err_f32 < rtol_f32;
      std::snprintf(line, sizeof line,
                    "%-20s cases=%-3zu grads=%-6zu f64=%.3e f32=%.3e %s\n",
                    e.op.c_str(), e.cases, e.grads_checked, e.max_rel_err_f64,
                    e.max_rel_err_f32, ok ? "ok" : "FAIL");
      s += line;
    }
    return s;
  }
};

namespace opcheck_detail {

// Raw leaf data plus shapes, shared between the f64 and f32 instantiations.
struct LeafSet {
  std::vector<std::vector<int>> shapes;
  std::vector<std::vector<double>> data;

  void add(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    shapes.push_back(std::move(shape));
    data.push_back(std::move(v));
  }

  template <typename T>
  std::vector<Tensor<T>> materialize() const {
    std::vector<Tensor<T>> out;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      std::vector<T> v(data[i].begin(), data[i].end());
      out.push_back(Tensor<T>::from(shapes[i], std::move(v)));
      out.back().set_requires_grad(true);
    }
    return out;
  }
};

// Checks one (leaves, graph builder) pair in f64 against finite differences
// and in f32 against the same f64 quotients; accumulates into `entry`.
template <typename F>
void check_case(OpCheckEntry& entry, const LeafSet& ls, F&& build, double step = 1e-5) {
  auto leaves64 = ls.materialize<double>();
  auto leaves32 = ls.materialize<float>();
  auto loss64 = build(leaves64);
  auto loss32 = build(leaves32);
  loss64.backward();
  loss32.backward();

  for (std::size_t li = 0; li < leaves64.size(); ++li) {
    auto& vals = leaves64[li].val();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      const double up = build(leaves64).item();
      vals[i] = saved - step;
      const double dn = build(leaves64).item();
      vals[i] = saved;
      const double fd = (up - dn) / (2 * step);
      const double a64 = leaves64[li].grad()[i];
      const double a32 = double(leaves32[li].grad()[i]);
      auto rel = [&](double a) {
        return std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      };
      entry.max_rel_err_f64 = std::max(entry.max_rel_err_f64, rel(a64));
      entry.max_rel_err_f32 = std::max(entry.max_rel_err_f32, rel(a32));
      ++entry.grads_checked;
    }
  }
  ++entry.cases;
}

inline std::vector<int> random_nchw(Rng& rng) {
  return {1 + int(rng.below(2)), 1 + int(rng.below(4)), 1 + int(rng.below(4)),
          1 + int(rng.below(4))};
}

// Value-dependent scalar reduction so constant-Jacobian ops still produce
// input-dependent leaf gradients.
template <typename T>
Tensor<T> quad(const Tensor<T>& t) {
  return sum(mul(t, add_scalar(t, T(0.5))));
}

}  // namespace opcheck_detail

// Runs `shapes_per_op` random-shape finite-difference checks for every
// differentiable op. Deterministic in `seed`.
inline OpCheckReport run_gradient_oracle(int shapes_per_op = 20, std::uint64_t seed = 0) {
  using namespace opcheck_detail;
  OpCheckReport report;
  Rng rng(seed ^ 0xC0FFEEull);

  auto run = [&](const std::string& name, auto&& make_leaves, auto&& build) {
    OpCheckEntry e;
    e.op = name;
    for (int c = 0; c < shapes_per_op; ++c) {
      LeafSet ls;
      make_leaves(ls, rng);
      check_case(e, ls, build);
    }
    report.entries.push_back(e);
  };

  auto two_same = [](LeafSet& ls, Rng& r) {
    auto s = random_nchw(r);
    ls.add(s, r);
    ls.add(s, r);
  };
  auto one = [](LeafSet& ls, Rng& r) { ls.add(random_nchw(r), r); };

  run("add", two_same,
      [](const auto& l) { return quad(add(l[0], l[1])); });
  run("sub", two_same,
      [](const auto& l) { return quad(sub(l[0], l[1])); });
  run("mul", two_same,
      [](const auto& l) { return quad(mul(l[0], l[1])); });
  run("neg", one, [](const auto& l) { return quad(neg(l[0])); });
  run("scale", one, [](const auto& l) {
    using T = typename std::decay_t<decltype(l[0].val()[0])>;
    return quad(scale(l[0], T(1.7)));
  });
  run("add_scalar", one, [](const auto& l) {
    using T = typename std::decay_t<decltype(l[0].val()[0])>;
    return quad(add_scalar(l[0], T(0.3)));
  });
  run("exp", one, [](const auto& l) { return quad(exp(l[0])); });
  run("log",
      [](LeafSet& ls, Rng& r) { ls.add(random_nchw(r), r, 0.5, 2.5); },
      [](const auto& l) { return quad(log(l[0])); });
  run("tanh", one, [](const auto& l) { return quad(tanh(l[0])); });
  run("sigmoid", one, [](const auto& l) { return quad(sigmoid(l[0])); });
  run("softplus", one, [](const auto& l) { return quad(softplus(l[0])); });
  run("gelu", one, [](const auto& l) { return quad(gelu(l[0])); });
  // clamp_min has a kink at the threshold; keep samples away from it.
  run("clamp_min",
      [](LeafSet& ls, Rng& r) {
        auto s = random_nchw(r);
        std::vector<double> v(shape_numel(s));
        for (auto& x : v) {
          x = 0.1 + 0.9 * r.uniform();
          if (r.below(2)) x = -x;
        }
        ls.shapes.push_back(s);
        ls.data.push_back(v);
      },
      [](const auto& l) {
        using T = typename std::decay_t<decltype(l[0].val()[0])>;
        return quad(clamp_min(l[0], T(0)));
      });
  run("sum", one, [](const auto& l) { return mul(sum(l[0]), sum(l[0])); });
  run("mean", one, [](const auto& l) { return mul(mean(l[0]), mean(l[0])); });
  run("logsumexp_channels", one,
      [](const auto& l) { return quad(logsumexp_channels(l[0])); });
  run("concat_channels", two_same, [](const auto& l) {
    using TensorT = typename std::decay_t<decltype(l[0])>;
    return quad(concat_channels(std::vector<TensorT>{l[0], l[1]}));
  });
  run("slice_channels",
      [](LeafSet& ls, Rng& r) {
        auto s = random_nchw(r);
        s[1] = 3;
        ls.add(s, r);
      },
      [](const auto& l) { return quad(slice_channels(l[0], 1, 3)); });
  run("broadcast_batch",
      [](LeafSet& ls, Rng& r) {
        auto s = random_nchw(r);
        s[0] = 1;
        ls.add(s, r);
      },
      [](const auto& l) { return quad(broadcast_batch(l[0], 3)); });
  run("broadcast_channels",
      [](LeafSet& ls, Rng& r) {
        auto s = random_nchw(r);
        s[1] = 1;
        ls.add(s, r);
      },
      [](const auto& l) { return quad(broadcast_channels(l[0], 3)); });
  run("avg_pool",
      [](LeafSet& ls, Rng& r) {
        int hw = 2 * (1 + int(r.below(3)));
        ls.add({1 + int(r.below(2)), 1 + int(r.below(3)), hw, hw}, r);
      },
      [](const auto& l) { return quad(avg_pool(l[0], 2)); });
  run("nn_upsample",
      [](LeafSet& ls, Rng& r) { ls.add(random_nchw(r), r); },
      [](const auto& l) { return quad(nn_upsample(l[0], 2)); });
  run("conv2d",
      [](LeafSet& ls, Rng& r) {
        const int k = r.below(2) ? 3 : 1;
        const int ic = 2 * (1 + int(r.below(2)));
        const int oc = 2 * (1 + int(r.below(2)));
        const int hw = 2 + int(r.below(3));
        ls.add({1 + int(r.below(2)), ic, hw, hw}, r);
        ls.add({oc, ic, k, k}, r);
        ls.add({oc}, r);
      },
      [](const auto& l) {
        const int k = l[1].shape()[2];
        return quad(conv2d(l[0], l[1], l[2], 1, k / 2));
      });
  run("conv2d_grouped_strided",
      [](LeafSet& ls, Rng& r) {
        const int g = 2;
        const int ic = 4, oc = 4, k = 3, hw = 4 + int(r.below(2)) * 2;
        ls.add({1 + int(r.below(2)), ic, hw, hw}, r);
        ls.add({oc, ic / g, k, k}, r);
        ls.add({oc}, r);
      },
      [](const auto& l) { return quad(conv2d(l[0], l[1], l[2], 2, 1, 2)); });
  run("linear",
      [](LeafSet& ls, Rng& r) {
        const int b = 1 + int(r.below(3)), f = 1 + int(r.below(4)),
                  o = 1 + int(r.below(3));
        ls.add({b, f}, r);
        ls.add({o, f}, r);
        ls.add({o}, r);
      },
      [](const auto& l) { return quad(linear(l[0], l[1], l[2])); });
  {
    // select: a fixed mask per case, shared by both precisions.
    OpCheckEntry e;
    e.op = "select";
    for (int c = 0; c < shapes_per_op; ++c) {
      LeafSet ls;
      auto s = random_nchw(rng);
      ls.add(s, rng);
      ls.add(s, rng);
      std::vector<std::uint8_t> mask(shape_numel(s));
      for (auto& m : mask) m = std::uint8_t(rng.below(2));
      check_case(e, ls, [&mask](const auto& l) {
        return quad(select(mask, l[0], l[1]));
      });
    }
    report.entries.push_back(e);
  }
  run("gaussian_kl",
      [](LeafSet& ls, Rng& r) {
        auto s = random_nchw(r);
        ls.add(s, r);                  // q mean
        ls.add(s, r, -0.5, 0.5);       // q log_std
        ls.add(s, r);                  // p mean
        ls.add(s, r, -0.5, 0.5);       // p log_std
      },
      [](const auto& l) {
        using T = typename std::decay_t<decltype(l[0].val()[0])>;
        GaussianParams<T> q{l[0], l[1]}, p{l[2], l[3]};
        return sum(gaussian_kl(q, p));
      });
  {
    // dmol_logprob: the target stays on the discretization grid, so it is
    // captured per case rather than treated as a differentiable leaf.
    OpCheckEntry e;
    e.op = "dmol_logprob";
    for (int c = 0; c < shapes_per_op; ++c) {
      const int K = 2, C = 3, hw = 1 + int(rng.below(2));
      LeafSet ls;
      ls.add({1, K, hw, hw}, rng);               // mixture logits
      ls.add({1, K * C, hw, hw}, rng, -0.9, 0.9);  // means
      ls.add({1, K * C, hw, hw}, rng, -2.0, 0.0);  // log scales
      ls.add({1, K * 3, hw, hw}, rng, -0.5, 0.5);  // coeffs
      std::vector<double> t(std::size_t(C) * hw * hw);
      for (auto& x : t) x = double(rng.below(256)) / 127.5 - 1.0;
      check_case(e, ls, [&](const auto& l) {
        using T = typename std::decay_t<decltype(l[0].val()[0])>;
        DmolParams<T> p;
        p.mixtures = K;
        p.channels = C;
        p.mixture_logits = l[0];
        p.means = l[1];
        p.log_scales = l[2];
        p.coeffs_raw = l[3];
        std::vector<T> tv(t.begin(), t.end());
        auto target = Tensor<T>::from({1, C, hw, hw}, std::move(tv));
        return sum(dmol_logprob(target, p));
      });
    }
    report.entries.push_back(e);
  }

  return report;
}

// detach must block gradients entirely: d/da sum(a * detach(a)) = detach(a),
// not 2a. This is checked directly rather than against finite differences,
// which by construction see the full dependence.
inline bool detach_blocks_gradient(std::uint64_t seed = 0) {
  Rng rng(seed + 17);
  for (int c = 0; c < 20; ++c) {
    auto shape = opcheck_detail::random_nchw(rng);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = 2 * rng.uniform() - 1;
    auto a = Tensor<double>::from(shape, std::move(v));
    a.set_requires_grad(true);
    sum(mul(a, detach(a))).backward();
    for (std::size_t i = 0; i < a.val().size(); ++i)
      if (a.grad()[i] != a.val()[i]) return false;
  }
  return true;
}

}  // namespace vdvae
