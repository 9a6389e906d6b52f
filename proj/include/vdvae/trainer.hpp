#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vdvae/checkpoint.hpp"
#include "vdvae/config.hpp"
#include "vdvae/dataset.hpp"
#include "vdvae/elbo.hpp"
#include "vdvae/model.hpp"
#include "vdvae/ops.hpp"
#include "vdvae/rng.hpp"

namespace vdvae {

// Per-channel statistics of the training split used to whiten encoder input.
struct NormalizationStats {
  std::vector<double> mean, std;
};

inline NormalizationStats compute_normalization(const Dataset& ds) {
  const int C = ds.channels;
  NormalizationStats st;
  st.mean.assign(C, 0.0);
  st.std.assign(C, 0.0);
  const std::size_t pixels_per_image = std::size_t(ds.height) * ds.width;
  double n = double(ds.train_idx.size() * pixels_per_image);
  if (n == 0) throw std::invalid_argument("compute_normalization: empty training split");
  for (auto idx : ds.train_idx) {
    const std::uint8_t* img = ds.image(idx);
    for (std::size_t p = 0; p < pixels_per_image; ++p)
      for (int c = 0; c < C; ++c) st.mean[c] += img[p * C + c];
  }
  for (int c = 0; c < C; ++c) st.mean[c] /= n;
  for (auto idx : ds.train_idx) {
    const std::uint8_t* img = ds.image(idx);
    for (std::size_t p = 0; p < pixels_per_image; ++p)
      for (int c = 0; c < C; ++c) {
        double d = img[p * C + c] - st.mean[c];
        st.std[c] += d * d;
      }
  }
  for (int c = 0; c < C; ++c) {
    st.std[c] = std::sqrt(st.std[c] / n);
    if (st.std[c] == 0.0)
      throw std::invalid_argument("compute_normalization: constant channel " +
                                  std::to_string(c));
  }
  return st;
}

// One training batch: whitened encoder input and the [-1,1] grid target.
template <typename T>
struct Batch {
  Tensor<T> input;   // (B, C, H, W), (x - mean) / std
  Tensor<T> target;  // (B, C, H, W), v / 127.5 - 1
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                    const NormalizationStats& stats) {
  const int C = ds.channels, H = ds.height, W = ds.width;
  const int B = int(indices.size());
  std::vector<T> in(std::size_t(B) * C * H * W), tg(in.size());
  const std::size_t plane = std::size_t(H) * W;
  for (int b = 0; b < B; ++b) {
    const std::uint8_t* img = ds.image(indices[b]);  // HWC
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < C; ++c) {
        const double v = img[p * C + c];
        const std::size_t at = (std::size_t(b) * C + c) * plane + p;
        in[at] = T((v - stats.mean[c]) / stats.std[c]);
        tg[at] = T(v / 127.5 - 1.0);
      }
  }
  return {Tensor<T>::from({B, C, H, W}, std::move(in)),
          Tensor<T>::from({B, C, H, W}, std::move(tg))};
}

// Batch composition is a pure function of (seed, step): sampled with
// replacement from the training split.
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t step,
                                              int batch_size,
                                              const std::vector<std::size_t>& pool) {
  if (pool.empty()) throw std::invalid_argument("batch_indices: empty split");
  Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (step + 1)));
  std::vector<std::size_t> out(batch_size);
  for (auto& i : out) i = pool[rng.below(pool.size())];
  return out;
}

template <typename T>
struct TrainState {
  ModelConfig model_cfg;
  TrainConfig train_cfg;
  Model<T> model;
  NormalizationStats stats;
  std::vector<std::vector<T>> adam_m, adam_v, ema;  // parallel to params.tensors
  std::uint64_t step = 0;           // counts every batch
  std::uint64_t applied_count = 0;  // non-skipped updates
  std::uint64_t skip_count = 0;
  Rng noise;  // latent-sampling stream, persisted for bit-exact resume

  TrainState(ModelConfig mc, TrainConfig tc, NormalizationStats ns)
      : model_cfg(mc),
        train_cfg(tc),
        model(mc, tc.seed),
        stats(std::move(ns)),
        noise(tc.seed + 0x517CC1B727220A95ull) {
    train_cfg.validate();
    for (const auto& t : model.params().tensors) {
      adam_m.emplace_back(t.size(), T(0));
      adam_v.emplace_back(t.size(), T(0));
      ema.emplace_back(t.val());  // EMA equals params at step 0
    }
  }
};

// Decoupled AdamW update applied in place; assumes gradients are populated.
template <typename T>
void adam_step(TrainState<T>& s) {
  const auto& tc = s.train_cfg;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double t = double(s.applied_count + 1);
  const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
  auto& params = s.model.params().tensors;
  // Parameters outside the graph (possible for some block specs) behave as if
  // their gradient were exactly zero.
  static const std::vector<T> kNoGrad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& val = params[i].val();
    const auto& g = params[i].has_grad() ? params[i].grad() : kNoGrad;
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double gj = j < g.size() ? double(g[j]) : 0.0;
      double m = b1 * double(s.adam_m[i][j]) + (1 - b1) * gj;
      double v = b2 * double(s.adam_v[i][j]) + (1 - b2) * gj * gj;
      s.adam_m[i][j] = T(m);
      s.adam_v[i][j] = T(v);
      double upd = tc.learning_rate * (m / c1) / (std::sqrt(v / c2) + eps);
      double decayed = double(val[j]) * (1.0 - tc.learning_rate * tc.weight_decay);
      val[j] = T(decayed - upd);
    }
  }
}

template <typename T>
void ema_update(TrainState<T>& s) {
  const T rate = T(s.train_cfg.ema_rate);
  auto& params = s.model.params().tensors;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& val = params[i].val();
    for (std::size_t j = 0; j < val.size(); ++j)
      s.ema[i][j] = rate * s.ema[i][j] + (T(1) - rate) * val[j];
  }
}

template <typename T>
struct StepResult {
  bool applied = false;
  double loss_nats = 0;  // true-KL ELBO, for reporting
  double loss_bpd = 0;
  double grad_norm = 0;
  std::vector<double> kl_per_layer;  // nats per subpixel
};

// Forward, backward, skip decision, optimizer and EMA update for one batch.
template <typename T>
StepResult<T> train_step(TrainState<T>& s, const Batch<T>& batch) {
  for (auto& t : s.model.params().tensors) t.clear_grad();

  auto acts = s.model.encode(batch.input);
  DecodeOptions<T> opt;
  opt.posterior_up_to_resolution = s.model_cfg.image_size;
  opt.group_k = s.model_cfg.group_k;
  opt.rng = &s.noise;
  auto state = s.model.decode(&acts, batch.input.shape()[0], opt);
  auto out = s.model.output_params(state.xhat);

  const auto& xs = batch.target.shape();
  const T inv = T(1.0 / (double(xs[0]) * xs[1] * xs[2] * xs[3]));
  auto nll = scale(neg(sum(dmol_logprob(batch.target, out))), inv);
  auto loss = add(nll, scale(kl_phase_sum(state, s.train_cfg.kl_phase), inv));
  loss.backward();

  // Reported loss always uses the true KL regardless of the training phase.
  StepResult<T> r;
  r.loss_nats = double(nll.item());
  for (const auto& l : state.layers) {
    double kl = double(sum(l.kl_elem).item()) * double(inv);
    r.kl_per_layer.push_back(kl);
    r.loss_nats += kl;
  }
  r.loss_bpd = r.loss_nats / std::log(2.0);
  r.grad_norm = global_grad_norm(s.model.params().tensors);

  ++s.step;
  const bool skip =
      std::isnan(r.grad_norm) || !std::isfinite(r.grad_norm) ||
      r.grad_norm > s.train_cfg.skip_threshold;  // strict: norm == threshold applies
  if (skip) {
    ++s.skip_count;
    return r;
  }
  if (!std::isfinite(r.loss_nats))
    throw std::runtime_error("train_step: non-finite loss on an applied step " +
                             std::to_string(s.step));
  adam_step(s);
  ++s.applied_count;
  ema_update(s);
  r.applied = true;
  return r;
}

inline std::string metrics_header(int layers) {
  std::string h = "step,applied,loss_nats,loss_bpd,grad_norm,skipped";
  for (int i = 0; i < layers; ++i) h += ",kl_layer_" + std::to_string(i);
  return h;
}

template <typename T>
std::string metrics_row(const TrainState<T>& s, const StepResult<T>& r) {
  std::string row = std::to_string(s.step) + "," + (r.applied ? "1" : "0") + "," +
                    format_double(r.loss_nats) + "," + format_double(r.loss_bpd) + "," +
                    format_double(r.grad_norm) + "," + (r.applied ? "0" : "1");
  for (double kl : r.kl_per_layer) row += "," + format_double(kl);
  return row;
}

// Runs batches [state.step, total_steps); writes one CSV row per step.
template <typename T>
void train_loop(TrainState<T>& s, const Dataset& ds, std::ostream* metrics,
                std::uint64_t total_steps) {
  if (metrics && s.step == 0)
    *metrics << metrics_header(s.model.stochastic_depth()) << "\n";
  while (s.step < total_steps) {
    auto idx =
        batch_indices(s.train_cfg.seed, s.step, s.train_cfg.batch_size, ds.train_idx);
    auto batch = make_batch<T>(ds, idx, s.stats);
    auto r = train_step(s, batch);
    if (metrics) *metrics << metrics_row(s, r) << "\n";
  }
}

// Average true-KL ELBO (nats/subpixel) over a split, deterministic in eval_seed.
template <typename T>
double evaluate(TrainState<T>& s, const Dataset& ds, const std::vector<std::size_t>& split,
                int batch_size, bool use_ema, std::uint64_t eval_seed = 1) {
  std::vector<std::vector<T>> saved;
  if (use_ema) {
    auto& params = s.model.params().tensors;
    for (std::size_t i = 0; i < params.size(); ++i) {
      saved.push_back(params[i].val());
      params[i].val() = s.ema[i];
    }
  }
  Rng noise(eval_seed);
  double total = 0;
  std::size_t batches = 0;
  for (std::size_t at = 0; at < split.size(); at += batch_size, ++batches) {
    std::vector<std::size_t> idx(split.begin() + at,
                                 split.begin() + std::min(split.size(),
                                                          at + std::size_t(batch_size)));
    auto batch = make_batch<T>(ds, idx, s.stats);
    auto acts = s.model.encode(batch.input);
    DecodeOptions<T> opt;
    opt.posterior_up_to_resolution = s.model_cfg.image_size;
    opt.group_k = s.model_cfg.group_k;
    opt.rng = &noise;
    auto state = s.model.decode(&acts, int(idx.size()), opt);
    total += elbo(batch.target, state, s.model.output_params(state.xhat)).total_nats;
  }
  if (use_ema) {
    auto& params = s.model.params().tensors;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].val() = saved[i];
  }
  return batches ? total / double(batches) : 0.0;
}

// ---- persistence ------------------------------------------------------------

template <typename T>
Checkpoint to_checkpoint(const TrainState<T>& s) {
  Checkpoint c;
  c.config_blobs = {{"model", s.model_cfg.to_kv()}, {"train", s.train_cfg.to_kv()}};
  const auto& store = s.model.params();
  auto push = [&](const std::string& name, const std::vector<T>& data,
                  const std::vector<int>& shape) {
    Checkpoint::Entry e;
    e.name = name;
    for (int d : shape) e.dims.push_back(std::uint64_t(d));
    e.data.assign(data.begin(), data.end());
    c.entries.push_back(std::move(e));
  };
  for (std::size_t i = 0; i < store.names.size(); ++i) {
    push(store.names[i], store.tensors[i].val(), store.tensors[i].shape());
    push("ema/" + store.names[i], s.ema[i], store.tensors[i].shape());
    push("opt/m/" + store.names[i], s.adam_m[i], store.tensors[i].shape());
    push("opt/v/" + store.names[i], s.adam_v[i], store.tensors[i].shape());
  }
  {
    // Doubles are stored bit-cast into f32 pairs so the whitening applied
    // after a resume is byte-for-byte the same as before it.
    auto push_doubles = [&](const std::string& name, const std::vector<double>& v) {
      Checkpoint::Entry e;
      e.name = name;
      e.dims = {2 * v.size()};
      e.data.resize(2 * v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &v[i], 8);
        pack_u64(bits, e.data.data() + 2 * i);
      }
      c.entries.push_back(std::move(e));
    };
    push_doubles("norm/mean", s.stats.mean);
    push_doubles("norm/std", s.stats.std);
  }
  {
    // RNG words and counters stored bit-cast in f32 pairs.
    auto rs = s.noise.state();
    Checkpoint::Entry e;
    e.name = "rng_state";
    e.dims = {8};
    e.data.resize(8);
    for (int i = 0; i < 4; ++i) pack_u64(rs[i], e.data.data() + 2 * i);
    c.entries.push_back(std::move(e));
    Checkpoint::Entry k;
    k.name = "counters";
    k.dims = {6};
    k.data.resize(6);
    pack_u64(s.step, k.data.data());
    pack_u64(s.applied_count, k.data.data() + 2);
    pack_u64(s.skip_count, k.data.data() + 4);
    c.entries.push_back(std::move(k));
  }
  return c;
}

template <typename T>
TrainState<T> from_checkpoint(const Checkpoint& c) {
  ModelConfig mc = ModelConfig::from_kv(parse_key_values(c.config_blob("model")));
  TrainConfig tc = TrainConfig::from_kv(parse_key_values(c.config_blob("train")));
  NormalizationStats ns;
  auto pull_doubles = [&](const std::string& name, std::vector<double>& out) {
    const auto& e = c.entry(name);
    for (std::size_t i = 0; i + 1 < e.data.size(); i += 2) {
      std::uint64_t bits = unpack_u64(e.data.data() + i);
      double v;
      std::memcpy(&v, &bits, 8);
      out.push_back(v);
    }
  };
  pull_doubles("norm/mean", ns.mean);
  pull_doubles("norm/std", ns.std);
  TrainState<T> s(mc, tc, ns);
  auto& store = s.model.params();
  for (std::size_t i = 0; i < store.names.size(); ++i) {
    const auto& name = store.names[i];
    auto copy = [&](const std::string& key, std::vector<T>& dst) {
      const auto& e = c.entry(key);
      if (e.data.size() != dst.size())
        throw std::runtime_error("checkpoint: size mismatch for " + key);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = T(e.data[j]);
    };
    copy(name, store.tensors[i].val());
    copy("ema/" + name, s.ema[i]);
    copy("opt/m/" + name, s.adam_m[i]);
    copy("opt/v/" + name, s.adam_v[i]);
  }
  const auto& rs = c.entry("rng_state");
  std::array<std::uint64_t, 4> words{};
  for (int i = 0; i < 4; ++i) words[i] = unpack_u64(rs.data.data() + 2 * i);
  s.noise.set_state(words);
  const auto& k = c.entry("counters");
  s.step = unpack_u64(k.data.data());
  s.applied_count = unpack_u64(k.data.data() + 2);
  s.skip_count = unpack_u64(k.data.data() + 4);
  return s;
}

}  // namespace vdvae
