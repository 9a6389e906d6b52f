#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "vdvae/rng.hpp"

namespace vdvae {

// Unlabeled image collection, pixels u8 in HWC order per image.
struct Dataset {
  int height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> images;       // n * H * W * C
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  std::string provenance;

  std::size_t image_bytes() const { return std::size_t(height) * width * channels; }
  std::size_t count() const { return image_bytes() ? images.size() / image_bytes() : 0; }
  const std::uint8_t* image(std::size_t i) const { return images.data() + i * image_bytes(); }
};

// Moves n_val images from the train split into the validation split via a
// seeded shuffle; deterministic, disjoint, union-preserving.
inline void split_validation(Dataset& ds, std::size_t n_val, std::uint64_t seed) {
  if (n_val > ds.train_idx.size())
    throw std::invalid_argument("split_validation: not enough training images");
  std::vector<std::size_t> order = ds.train_idx;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);
  ds.val_idx.assign(order.begin(), order.begin() + n_val);
  ds.train_idx.assign(order.begin() + n_val, order.end());
  std::sort(ds.val_idx.begin(), ds.val_idx.end());
  std::sort(ds.train_idx.begin(), ds.train_idx.end());
}

namespace detail {

inline std::vector<std::uint8_t> read_file_exact(const std::string& path,
                                                 std::size_t expect) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  if (expect && bytes.size() != expect)
    throw std::runtime_error(path + ": expected " + std::to_string(expect) +
                             " bytes, found " + std::to_string(bytes.size()));
  return bytes;
}

// One 3073-byte record: label byte, then 1024-byte R, G, B planes.
inline void append_cifar_record(Dataset& ds, const std::uint8_t* rec) {
  const int plane = 32 * 32;
  for (int i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) ds.images.push_back(rec[1 + c * plane + i]);
}

}  // namespace detail

// Standard CIFAR-10 binary batches: data_batch_{1..5}.bin as train (with a
// seeded 5000-image validation split) and test_batch.bin as test.
inline Dataset load_cifar10_binary(const std::string& dir, std::uint64_t split_seed = 0) {
  constexpr std::size_t kRecords = 10000, kRecord = 3073;
  Dataset ds;
  ds.height = ds.width = 32;
  ds.channels = 3;
  ds.provenance = "cifar10:" + dir;
  ds.images.reserve(60000 * std::size_t(3072));
  auto load_file = [&](const std::string& name, std::vector<std::size_t>& split) {
    auto bytes = detail::read_file_exact(dir + "/" + name, kRecords * kRecord);
    for (std::size_t r = 0; r < kRecords; ++r) {
      split.push_back(ds.count());
      detail::append_cifar_record(ds, bytes.data() + r * kRecord);
    }
  };
  for (int b = 1; b <= 5; ++b)
    load_file("data_batch_" + std::to_string(b) + ".bin", ds.train_idx);
  load_file("test_batch.bin", ds.test_idx);
  split_validation(ds, 5000, split_seed);
  return ds;
}

// Raw tensor container: magic "VDVT", u32 LE n/h/w/c, then n*h*w*c u8 HWC data.
inline Dataset load_vdvt(const std::string& path) {
  auto bytes = detail::read_file_exact(path, 0);
  if (bytes.size() < 20 || bytes[0] != 'V' || bytes[1] != 'D' || bytes[2] != 'V' ||
      bytes[3] != 'T')
    throw std::runtime_error(path + ": not a VDVT file");
  auto u32 = [&](std::size_t off) {
    return std::uint32_t(bytes[off]) | std::uint32_t(bytes[off + 1]) << 8 |
           std::uint32_t(bytes[off + 2]) << 16 | std::uint32_t(bytes[off + 3]) << 24;
  };
  const std::uint32_t n = u32(4), h = u32(8), w = u32(12), c = u32(16);
  const std::size_t need = 20 + std::size_t(n) * h * w * c;
  if (bytes.size() != need)
    throw std::runtime_error(path + ": truncated VDVT payload");
  Dataset ds;
  ds.height = int(h);
  ds.width = int(w);
  ds.channels = int(c);
  ds.provenance = "vdvt:" + path;
  ds.images.assign(bytes.begin() + 20, bytes.end());
  ds.train_idx.resize(n);
  std::iota(ds.train_idx.begin(), ds.train_idx.end(), std::size_t(0));
  return ds;
}

inline void save_vdvt(const std::string& path, const Dataset& ds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  auto u32 = [&](std::uint32_t v) {
    char b[4] = {char(v & 255), char(v >> 8 & 255), char(v >> 16 & 255), char(v >> 24 & 255)};
    f.write(b, 4);
  };
  f.write("VDVT", 4);
  u32(std::uint32_t(ds.count()));
  u32(std::uint32_t(ds.height));
  u32(std::uint32_t(ds.width));
  u32(std::uint32_t(ds.channels));
  f.write(reinterpret_cast<const char*>(ds.images.data()),
          std::streamsize(ds.images.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

struct SyntheticConfig {
  std::size_t n = 1000;
  int size = 8;
  int channels = 1;
  int palette_k = 4;
  int texture_scale = 8;  // each pixel shifted by +/- this amount
  std::uint64_t seed = 0;
};

// Evenly spaced palette levels, identical across channels.
inline int synthetic_palette_level(int index, int palette_k) {
  if (palette_k == 1) return 128;
  return 40 + (175 * index) / (palette_k - 1);
}

// Hierarchical toy images: a global background color (coarse latent), one
// axis-aligned rectangle in a palette color (mid-scale latent), and i.i.d.
// sign noise of magnitude texture_scale per pixel (local latents).
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.size != 8 && cfg.size != 16 && cfg.size != 32)
    throw std::invalid_argument("generate_synthetic: size must be 8, 16, or 32");
  Dataset ds;
  ds.height = ds.width = cfg.size;
  ds.channels = cfg.channels;
  ds.provenance = "synthetic:seed=" + std::to_string(cfg.seed);
  Rng rng(cfg.seed);
  for (std::size_t img = 0; img < cfg.n; ++img) {
    ds.train_idx.push_back(img);
    const int bg = synthetic_palette_level(int(rng.below(cfg.palette_k)), cfg.palette_k);
    const int fg = synthetic_palette_level(int(rng.below(cfg.palette_k)), cfg.palette_k);
    int x0 = int(rng.below(cfg.size)), x1 = int(rng.below(cfg.size));
    int y0 = int(rng.below(cfg.size)), y1 = int(rng.below(cfg.size));
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    for (int y = 0; y < cfg.size; ++y)
      for (int x = 0; x < cfg.size; ++x) {
        const int base = (y >= y0 && y <= y1 && x >= x0 && x <= x1) ? fg : bg;
        for (int c = 0; c < cfg.channels; ++c) {
          int v = base;
          if (cfg.texture_scale > 0)
            v += rng.below(2) ? cfg.texture_scale : -cfg.texture_scale;
          ds.images.push_back(std::uint8_t(std::clamp(v, 0, 255)));
        }
      }
  }
  return ds;
}

// Exact per-pixel value distribution implied by generate_synthetic at pixel
// (x, y): enumerates rectangle endpoints and palette/noise choices.
inline std::vector<double> synthetic_pixel_distribution(const SyntheticConfig& cfg, int x,
                                                        int y) {
  const int s = cfg.size;
  auto cover_prob = [&](int t) {
    // P(min(a,b) <= t <= max(a,b)) with a, b uniform on [0, s).
    int covered = 0;
    for (int a = 0; a < s; ++a)
      for (int b = 0; b < s; ++b)
        if (std::min(a, b) <= t && t <= std::max(a, b)) ++covered;
    return double(covered) / double(s * s);
  };
  const double p_rect = cover_prob(x) * cover_prob(y);
  std::vector<double> base(256, 0.0);
  for (int k = 0; k < cfg.palette_k; ++k)
    base[synthetic_palette_level(k, cfg.palette_k)] += 1.0 / cfg.palette_k;
  // Background and rectangle colors are both uniform over the palette, so the
  // shown color's marginal is the palette distribution regardless of p_rect;
  // kept explicit for clarity.
  std::vector<double> shown(256, 0.0);
  for (int v = 0; v < 256; ++v)
    shown[v] = p_rect * base[v] + (1.0 - p_rect) * base[v];
  if (cfg.texture_scale == 0) return shown;
  std::vector<double> out(256, 0.0);
  for (int v = 0; v < 256; ++v) {
    if (shown[v] == 0) continue;
    out[std::clamp(v + cfg.texture_scale, 0, 255)] += 0.5 * shown[v];
    out[std::clamp(v - cfg.texture_scale, 0, 255)] += 0.5 * shown[v];
  }
  return out;
}

}  // namespace vdvae
