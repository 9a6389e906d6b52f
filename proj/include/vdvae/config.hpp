#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vdvae/blockspec.hpp"

namespace vdvae {

enum class PriorMode { separate, shared_pseudoinput };
enum class DownsampleMode { pool, strided_conv };
enum class KlPhase { standard_prior_phase, true_kl_phase };

inline std::string to_string(PriorMode m) {
  return m == PriorMode::separate ? "separate" : "shared_pseudoinput";
}
inline std::string to_string(DownsampleMode m) {
  return m == DownsampleMode::pool ? "pool" : "strided_conv";
}
inline std::string to_string(KlPhase p) {
  return p == KlPhase::standard_prior_phase ? "standard_prior_phase" : "true_kl_phase";
}

inline PriorMode prior_mode_from_string(const std::string& s) {
  if (s == "separate") return PriorMode::separate;
  if (s == "shared_pseudoinput") return PriorMode::shared_pseudoinput;
  throw std::invalid_argument("unknown prior_mode '" + s + "'");
}
inline DownsampleMode downsample_mode_from_string(const std::string& s) {
  if (s == "pool") return DownsampleMode::pool;
  if (s == "strided_conv") return DownsampleMode::strided_conv;
  throw std::invalid_argument("unknown downsample_mode '" + s + "'");
}
inline KlPhase kl_phase_from_string(const std::string& s) {
  if (s == "standard_prior_phase") return KlPhase::standard_prior_phase;
  if (s == "true_kl_phase") return KlPhase::true_kl_phase;
  throw std::invalid_argument("unknown kl_phase '" + s + "'");
}

// ---- key=value text ---------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string kv_trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// One `key = value` per line; '#' starts a comment. Throws with the line
// number on malformed input and on duplicate keys.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = kv_trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    std::string key = kv_trim(line.substr(0, eq));
    std::string value = kv_trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": duplicate key '" + key + "'");
  }
  return kv;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- model / train configs --------------------------------------------------

struct ModelConfig {
  int width = 32;
  double bottleneck_ratio = 0.25;
  int zdim = 8;
  BlockSpec enc_spec;
  BlockSpec dec_spec;
  int image_size = 32;
  int image_channels = 3;
  PriorMode prior_mode = PriorMode::shared_pseudoinput;
  int ff_group_size = 4;
  int dmol_mixtures = 10;
  bool residual_scale_enabled = true;
  DownsampleMode downsample_mode = DownsampleMode::pool;
  int group_k = 1;  // consecutive-block independence during decoding

  int bottleneck_channels() const {
    return std::max(1, int(width * bottleneck_ratio + 0.5));
  }

  void validate() const {
    if (enc_spec.empty() || dec_spec.empty())
      throw std::invalid_argument("model config: block specs must be set");
    if (enc_spec.ladder.size() > 1 && enc_spec.increasing())
      throw std::invalid_argument("model config: encoder resolutions must decrease");
    if (dec_spec.ladder.size() > 1 && !dec_spec.increasing())
      throw std::invalid_argument("model config: decoder resolutions must increase");
    if (enc_spec.first_resolution() != image_size)
      throw std::invalid_argument("model config: encoder must start at image resolution");
    if (dec_spec.last_resolution() != image_size)
      throw std::invalid_argument("model config: decoder must end at image resolution");
    if (width % 4 != 0 || width % ff_group_size != 0)
      throw std::invalid_argument("model config: width must be divisible by 4 and by "
                                  "ff_group_size");
    if (image_channels != 1 && image_channels != 3)
      throw std::invalid_argument("model config: image_channels must be 1 or 3");
    if (zdim < 1 || dmol_mixtures < 1)
      throw std::invalid_argument("model config: zdim and dmol_mixtures must be >= 1");
    validate_group_k(dec_spec, group_k);
  }

  std::string to_kv() const {
    std::string s;
    s += "width = " + std::to_string(width) + "\n";
    s += "bottleneck_ratio = " + format_double(bottleneck_ratio) + "\n";
    s += "zdim = " + std::to_string(zdim) + "\n";
    s += "enc_blocks = " + enc_spec.to_string() + "\n";
    s += "dec_blocks = " + dec_spec.to_string() + "\n";
    s += "image_size = " + std::to_string(image_size) + "\n";
    s += "image_channels = " + std::to_string(image_channels) + "\n";
    s += "prior_mode = " + to_string(prior_mode) + "\n";
    s += "ff_group_size = " + std::to_string(ff_group_size) + "\n";
    s += "dmol_mixtures = " + std::to_string(dmol_mixtures) + "\n";
    s += std::string("residual_scaling = ") + (residual_scale_enabled ? "true" : "false") +
         "\n";
    s += "downsample_mode = " + to_string(downsample_mode) + "\n";
    s += "group_k = " + std::to_string(group_k) + "\n";
    return s;
  }

  static ModelConfig from_kv(const KeyValues& kv) {
    ModelConfig c;
    for (const auto& [k, v] : kv) {
      if (k == "width") c.width = std::stoi(v);
      else if (k == "bottleneck_ratio") c.bottleneck_ratio = std::stod(v);
      else if (k == "zdim") c.zdim = std::stoi(v);
      else if (k == "enc_blocks") c.enc_spec = parse_block_spec(v);
      else if (k == "dec_blocks") c.dec_spec = parse_block_spec(v);
      else if (k == "image_size") c.image_size = std::stoi(v);
      else if (k == "image_channels") c.image_channels = std::stoi(v);
      else if (k == "prior_mode") c.prior_mode = prior_mode_from_string(v);
      else if (k == "ff_group_size") c.ff_group_size = std::stoi(v);
      else if (k == "dmol_mixtures") c.dmol_mixtures = std::stoi(v);
      else if (k == "residual_scaling") c.residual_scale_enabled = (v == "true" || v == "1");
      else if (k == "downsample_mode") c.downsample_mode = downsample_mode_from_string(v);
      else if (k == "group_k") c.group_k = std::stoi(v);
      else throw std::invalid_argument("model config: unknown key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

struct TrainConfig {
  double learning_rate = 2e-4;
  int batch_size = 16;
  double weight_decay = 0.0;
  double skip_threshold = 400.0;  // CIFAR-10 default
  double ema_rate = 0.999;
  KlPhase kl_phase = KlPhase::standard_prior_phase;
  long total_steps = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(skip_threshold > 0)) throw std::invalid_argument("train config: skip_threshold must be > 0");
    if (!(ema_rate >= 0 && ema_rate < 1))
      throw std::invalid_argument("train config: ema_rate must be in [0, 1)");
    if (batch_size < 1 || total_steps < 0)
      throw std::invalid_argument("train config: bad batch_size/total_steps");
  }

  std::string to_kv() const {
    std::string s;
    s += "lr = " + format_double(learning_rate) + "\n";
    s += "batch_size = " + std::to_string(batch_size) + "\n";
    s += "weight_decay = " + format_double(weight_decay) + "\n";
    s += "skip_threshold = " + format_double(skip_threshold) + "\n";
    s += "ema_rate = " + format_double(ema_rate) + "\n";
    s += "kl_phase = " + to_string(kl_phase) + "\n";
    s += "total_steps = " + std::to_string(total_steps) + "\n";
    s += "seed = " + std::to_string(seed) + "\n";
    return s;
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    for (const auto& [k, v] : kv) {
      if (k == "lr") c.learning_rate = std::stod(v);
      else if (k == "batch_size") c.batch_size = std::stoi(v);
      else if (k == "weight_decay") c.weight_decay = std::stod(v);
      else if (k == "skip_threshold") c.skip_threshold = std::stod(v);
      else if (k == "ema_rate") c.ema_rate = std::stod(v);
      else if (k == "kl_phase") c.kl_phase = kl_phase_from_string(v);
      else if (k == "total_steps") c.total_steps = std::stol(v);
      else if (k == "seed") c.seed = std::stoull(v);
      else throw std::invalid_argument("train config: unknown key '" + k + "'");
    }
    c.validate();
    return c;
  }
};

}  // namespace vdvae
