#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vdvae {

// Binary PPM (P6): "P6\n{W} {H}\n255\n" followed by rows of RGB bytes.
inline void write_ppm(const std::string& path, const std::uint8_t* rgb_hwc, int width,
                      int height) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P6\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb_hwc), std::streamsize(3) * width * height);
  if (!f) throw std::runtime_error("write failed: " + path);
}

struct PpmImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // HWC RGB
};

inline PpmImage read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0)
    throw std::runtime_error(path + ": not a supported P6 file");
  f.get();  // single whitespace byte after the header
  PpmImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(std::size_t(3) * w * h);
  f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!f) throw std::runtime_error(path + ": truncated pixel data");
  return img;
}

// Tiles n same-sized RGB images into a roughly square grid with 2-pixel black
// gutters between cells (no outer border); empty trailing cells stay black.
inline void write_ppm_grid(const std::string& path,
                           const std::vector<std::vector<std::uint8_t>>& images_hwc,
                           int width, int height) {
  if (images_hwc.empty()) throw std::invalid_argument("write_ppm_grid: no images");
  const int n = int(images_hwc.size());
  int cols = 1;
  while (cols * cols < n) ++cols;
  const int rows = (n + cols - 1) / cols;
  const int gutter = 2;
  const int gw = cols * width + (cols - 1) * gutter;
  const int gh = rows * height + (rows - 1) * gutter;
  std::vector<std::uint8_t> canvas(std::size_t(3) * gw * gh, 0);
  for (int i = 0; i < n; ++i) {
    if (images_hwc[i].size() != std::size_t(3) * width * height)
      throw std::invalid_argument("write_ppm_grid: image size mismatch");
    const int cx = (i % cols) * (width + gutter);
    const int cy = (i / cols) * (height + gutter);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c)
          canvas[(std::size_t(cy + y) * gw + (cx + x)) * 3 + c] =
              images_hwc[i][(std::size_t(y) * width + x) * 3 + c];
  }
  write_ppm(path, canvas.data(), gw, gh);
}

// Expands 1-channel HWC data to RGB for export.
inline std::vector<std::uint8_t> gray_to_rgb(const std::uint8_t* hw, int width, int height) {
  std::vector<std::uint8_t> rgb;
  rgb.reserve(std::size_t(3) * width * height);
  for (int i = 0; i < width * height; ++i)
    for (int c = 0; c < 3; ++c) rgb.push_back(hw[i]);
  return rgb;
}

}  // namespace vdvae
