#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "vdvae/config.hpp"
#include "vdvae/dmol.hpp"
#include "vdvae/gaussian.hpp"
#include "vdvae/ops.hpp"
#include "vdvae/rng.hpp"
#include "vdvae/tensor.hpp"

namespace vdvae {

// Named parameter map with deterministic iteration order; the key set is
// fixed once the model is built.
template <typename T>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Tensor<T>> tensors;
  std::unordered_map<std::string, std::size_t> index;

  Tensor<T> add(const std::string& name, std::vector<int> shape) {
    if (index.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    auto t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    index.emplace(name, tensors.size());
    names.push_back(name);
    tensors.push_back(t);
    return t;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("no parameter " + name);
    return tensors[it->second];
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
};

template <typename T>
struct DecodeOptions {
  // Layers at resolutions <= this sample from the posterior; finer layers
  // sample from the prior. 0 means a pure prior (unconditional) pass.
  int posterior_up_to_resolution = 0;
  T temperature = T(1);  // scales prior std only
  int group_k = 1;       // consecutive-block independence (1 = sequential)
  Rng* rng = nullptr;
  const std::vector<Tensor<T>>* fixed_eps = nullptr;  // per-layer noise override
  bool zero_eps = false;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& e : cfg_.dec_spec.ladder)
      for (int j = 0; j < e.count; ++j) layer_resolution_.push_back(e.resolution);
    Rng rng(init_seed);
    build_params(rng);
    if (cfg_.residual_scale_enabled)
      apply_residual_scaling(stochastic_depth());
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.total_elements(); }
  int stochastic_depth() const { return int(layer_resolution_.size()); }
  int layer_resolution(int layer) const { return layer_resolution_[layer]; }

  // Multiplies the final convolution of every bottleneck block by 1/sqrt(n).
  void apply_residual_scaling(int n) {
    const T s = T(1.0 / std::sqrt(double(n)));
    for (const auto& name : final_conv_names_)
      for (T& v : params_.at(name).val()) v *= s;
  }

  // ---- encoder --------------------------------------------------------------

  // Input must already be normalized. Returns activations per resolution.
  std::map<int, Tensor<T>> encode(const Tensor<T>& x_normalized) {
    if (x_normalized.shape()[1] != cfg_.image_channels ||
        x_normalized.shape()[2] != cfg_.image_size)
      throw std::invalid_argument("encode: input does not match configured image shape");
    auto h = conv(x_normalized, "in_conv", 1, 3);
    std::map<int, Tensor<T>> acts;
    const auto& ladder = cfg_.enc_spec.ladder;
    for (std::size_t ei = 0; ei < ladder.size(); ++ei) {
      const int r = ladder[ei].resolution;
      for (int j = 0; j < ladder[ei].count; ++j)
        h = encoder_block(h, "enc." + std::to_string(r) + "." + std::to_string(j));
      acts.emplace(r, h);
      if (ei + 1 < ladder.size()) {
        const int factor = r / ladder[ei + 1].resolution;
        if (cfg_.downsample_mode == DownsampleMode::pool)
          h = avg_pool(h, factor);
        else
          h = conv(h, "enc.down." + std::to_string(r), 0, factor, factor);
      }
    }
    return acts;
  }

  // ---- decoder --------------------------------------------------------------

  TopDownState<T> decode(const std::map<int, Tensor<T>>* acts, int batch,
                         const DecodeOptions<T>& opt) {
    validate_group_k(cfg_.dec_spec, opt.group_k);
    for (const auto& e : cfg_.dec_spec.ladder)
      if (e.resolution <= opt.posterior_up_to_resolution &&
          (!acts || !acts->count(e.resolution)))
        throw std::invalid_argument("decode: missing encoder activations at resolution " +
                                    std::to_string(e.resolution));

    TopDownState<T> state;
    auto xhat = broadcast_batch(params_.at("dec.xhat0"), batch);
    int cur_res = 1;
    int layer = 0;
    for (const auto& e : cfg_.dec_spec.ladder) {
      if (e.resolution != cur_res) {
        xhat = nn_upsample(xhat, e.resolution / cur_res);
        cur_res = e.resolution;
      }
      for (int g0 = 0; g0 < e.count; g0 += opt.group_k) {
        const Tensor<T> group_in = xhat;
        Tensor<T> delta_sum;
        for (int j = 0; j < opt.group_k; ++j, ++layer) {
          auto [next, rec] = topdown_block(group_in, acts, layer, e.resolution, opt);
          state.layers.push_back(std::move(rec));
          if (opt.group_k == 1) {
            xhat = next;
          } else {
            auto delta = sub(next, group_in);
            delta_sum = delta_sum.defined() ? add(delta_sum, delta) : delta;
          }
        }
        if (opt.group_k > 1) xhat = add(group_in, delta_sum);
      }
    }
    state.xhat = xhat;
    return state;
  }

  // Output-head mixture parameters for a decoded feature map.
  DmolParams<T> output_params(const Tensor<T>& xhat) {
    auto head = conv(xhat, "out", 0, 1);
    return split_dmol_head(head, cfg_.dmol_mixtures, cfg_.image_channels);
  }

 private:
  // ---- building blocks ------------------------------------------------------

  Tensor<T> conv(const Tensor<T>& x, const std::string& prefix, int padding, int kernel,
                 int stride = 1, int groups = 1) {
    (void)kernel;
    return conv2d(x, params_.at(prefix + ".w"), params_.at(prefix + ".b"), stride, padding,
                  groups);
  }

  // h + c4(gelu(c3(gelu(c2(gelu(c1(gelu(h)))))))), c4 zero-initialized.
  Tensor<T> encoder_block(const Tensor<T>& h, const std::string& prefix) {
    const int pad = h.shape()[2] > 1 ? 1 : 0;
    auto t = conv(gelu(h), prefix + ".c1", 0, 1);
    t = conv(gelu(t), prefix + ".c2", pad, 3);
    t = conv(gelu(t), prefix + ".c3", pad, 3);
    t = conv(gelu(t), prefix + ".c4", 0, 1);
    return add(h, t);
  }

  // Bottleneck chain that emits a diagonal Gaussian (mean, log std).
  GaussianParams<T> gaussian_net(const Tensor<T>& x, const std::string& prefix) {
    const int pad = x.shape()[2] > 1 ? 1 : 0;
    auto t = conv(gelu(x), prefix + ".c1", 0, 1);
    t = conv(gelu(t), prefix + ".c2", pad, 3);
    t = conv(gelu(t), prefix + ".c3", pad, 3);
    t = conv(gelu(t), prefix + ".c4", 0, 1);
    return {slice_channels(t, 0, cfg_.zdim), slice_channels(t, cfg_.zdim, 2 * cfg_.zdim)};
  }

  // Two grouped convolutions with GELU between.
  Tensor<T> feedforward(const Tensor<T>& x, const std::string& prefix) {
    const int pad = x.shape()[2] > 1 ? 1 : 0;
    const int groups = cfg_.width / cfg_.ff_group_size;
    auto t = conv2d(x, params_.at(prefix + ".w1"), params_.at(prefix + ".b1"), 1, pad,
                    groups);
    return conv2d(gelu(t), params_.at(prefix + ".w2"), params_.at(prefix + ".b2"), 1, pad,
                  groups);
  }

  std::pair<Tensor<T>, LayerRecord<T>> topdown_block(const Tensor<T>& xhat,
                                                     const std::map<int, Tensor<T>>* acts,
                                                     int layer, int resolution,
                                                     const DecodeOptions<T>& opt) {
    const std::string prefix = "dec." + std::to_string(layer);
    const bool use_q = resolution <= opt.posterior_up_to_resolution;
    const int batch = xhat.shape()[0];

    GaussianParams<T> p;
    if (cfg_.prior_mode == PriorMode::shared_pseudoinput) {
      // Re-used posterior parameters on a learned pseudo-input.
      auto pseudo = feedforward(xhat, prefix + ".ff1");
      p = gaussian_net(concat_channels<T>({xhat, pseudo}), prefix + ".post");
    } else {
      p = gaussian_net(xhat, prefix + ".prior");
    }

    LayerRecord<T> rec;
    rec.resolution = resolution;
    rec.p = p;
    Tensor<T> z;
    auto eps = make_eps(batch, resolution, layer, opt);
    if (use_q) {
      auto q = gaussian_net(concat_channels<T>({xhat, acts->at(resolution)}),
                            prefix + ".post");
      rec.q = q;
      z = gaussian_sample(q, eps, T(1));
      rec.kl_elem = gaussian_kl(q, p);
    } else {
      rec.q = p;
      z = gaussian_sample(p, eps, opt.temperature);
      rec.kl_elem = Tensor<T>::zeros(z.shape());
    }
    rec.z = z;
    auto zmap = conv(z, prefix + ".zproj", 0, 1);
    auto next = feedforward(add(xhat, zmap), prefix + ".ff2");
    return {next, std::move(rec)};
  }

  Tensor<T> make_eps(int batch, int resolution, int layer, const DecodeOptions<T>& opt) {
    std::vector<int> shape{batch, cfg_.zdim, resolution, resolution};
    if (opt.fixed_eps) {
      const auto& e = opt.fixed_eps->at(layer);
      if (e.shape() != shape) throw std::invalid_argument("decode: fixed eps shape mismatch");
      return e;
    }
    if (opt.zero_eps) return Tensor<T>::zeros(shape);
    if (!opt.rng) throw std::invalid_argument("decode: no noise source provided");
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = T(opt.rng->normal());
    return Tensor<T>::from(std::move(shape), std::move(d));
  }

  // ---- parameter construction ----------------------------------------------

  Tensor<T> add_conv(const std::string& prefix, int out_c, int in_c, int kernel, Rng& rng,
                     bool zero_weight = false, bool final_of_bottleneck = false) {
    auto w = params_.add(prefix + ".w", {out_c, in_c, kernel, kernel});
    params_.add(prefix + ".b", {out_c});  // biases zero-initialized throughout
    if (!zero_weight) fan_in_uniform(w, in_c * kernel * kernel, rng);
    if (final_of_bottleneck) final_conv_names_.push_back(prefix + ".w");
    return w;
  }

  void fan_in_uniform(Tensor<T>& w, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    for (T& v : w.val()) v = T((2 * rng.uniform() - 1) * bound);
  }

  void add_bottleneck(const std::string& prefix, int in_c, int out_c, int resolution,
                      Rng& rng, bool zero_final) {
    const int mid = cfg_.bottleneck_channels();
    const int k = resolution > 1 ? 3 : 1;
    add_conv(prefix + ".c1", mid, in_c, 1, rng);
    add_conv(prefix + ".c2", mid, mid, k, rng);
    add_conv(prefix + ".c3", mid, mid, k, rng);
    add_conv(prefix + ".c4", out_c, mid, 1, rng, zero_final, /*final_of_bottleneck=*/true);
  }

  void add_feedforward(const std::string& prefix, int resolution, Rng& rng) {
    const int w = cfg_.width;
    const int k = resolution > 1 ? 3 : 1;
    const int gc = cfg_.ff_group_size;  // channels per group
    auto w1 = params_.add(prefix + ".w1", {w, gc, k, k});
    params_.add(prefix + ".b1", {w});
    fan_in_uniform(w1, gc * k * k, rng);
    auto w2 = params_.add(prefix + ".w2", {w, gc, k, k});
    params_.add(prefix + ".b2", {w});
    fan_in_uniform(w2, gc * k * k, rng);
  }

  void build_params(Rng& rng) {
    const int w = cfg_.width;
    add_conv("in_conv", w, cfg_.image_channels, 3, rng);
    const auto& enc = cfg_.enc_spec.ladder;
    for (std::size_t ei = 0; ei < enc.size(); ++ei) {
      const int r = enc[ei].resolution;
      for (int j = 0; j < enc[ei].count; ++j)
        add_bottleneck("enc." + std::to_string(r) + "." + std::to_string(j), w, w, r, rng,
                       /*zero_final=*/true);
      if (ei + 1 < enc.size() && cfg_.downsample_mode == DownsampleMode::strided_conv) {
        const int factor = r / enc[ei + 1].resolution;
        add_conv("enc.down." + std::to_string(r), w, w, factor, rng);
      }
    }
    params_.add("dec.xhat0", {1, w, 1, 1});
    for (int layer = 0; layer < int(layer_resolution_.size()); ++layer) {
      const int r = layer_resolution_[layer];
      const std::string prefix = "dec." + std::to_string(layer);
      add_bottleneck(prefix + ".post", 2 * w, 2 * cfg_.zdim, r, rng, /*zero_final=*/false);
      if (cfg_.prior_mode == PriorMode::shared_pseudoinput)
        add_feedforward(prefix + ".ff1", r, rng);
      else
        add_bottleneck(prefix + ".prior", w, 2 * cfg_.zdim, r, rng, /*zero_final=*/true);
      add_conv(prefix + ".zproj", w, cfg_.zdim, 1, rng, /*zero_weight=*/true);
      add_feedforward(prefix + ".ff2", r, rng);
    }
    add_conv("out", dmol_head_channels<T>(cfg_.dmol_mixtures, cfg_.image_channels), w, 1,
             rng);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  std::vector<int> layer_resolution_;
  std::vector<std::string> final_conv_names_;
};

}  // namespace vdvae
