#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace vdvae {

struct BlockSpecEntry {
  int resolution = 0;
  int count = 0;
};

// Ordered "RxC" ladder, e.g. "32x10,16x10,8x10,4x10,1x10". Resolutions must
// be strictly monotone (either direction) with integer scale factors between
// neighbors.
struct BlockSpec {
  std::vector<BlockSpecEntry> ladder;

  bool empty() const { return ladder.empty(); }
  bool increasing() const {
    return ladder.size() >= 2 && ladder[1].resolution > ladder[0].resolution;
  }
  int total_blocks() const {
    int n = 0;
    for (const auto& e : ladder) n += e.count;
    return n;
  }
  int first_resolution() const { return ladder.front().resolution; }
  int last_resolution() const { return ladder.back().resolution; }

  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < ladder.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(ladder[i].resolution) + "x" + std::to_string(ladder[i].count);
    }
    return s;
  }
};

inline BlockSpec parse_block_spec(const std::string& text) {
  BlockSpec spec;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t comma = text.find(',', pos);
    std::string tok = text.substr(pos, comma == std::string::npos ? std::string::npos
                                                                  : comma - pos);
    std::size_t x = tok.find('x');
    if (tok.empty() || x == std::string::npos || x == 0 || x + 1 >= tok.size())
      throw std::invalid_argument("block spec: malformed token '" + tok + "'");
    int res = 0, count = 0;
    try {
      std::size_t used = 0;
      res = std::stoi(tok.substr(0, x), &used);
      if (used != x) throw std::invalid_argument("");
      count = std::stoi(tok.substr(x + 1), &used);
      if (used != tok.size() - x - 1) throw std::invalid_argument("");
    } catch (...) {
      throw std::invalid_argument("block spec: malformed token '" + tok + "'");
    }
    if (res < 1 || count < 1)
      throw std::invalid_argument("block spec: resolution and count must be >= 1 in '" +
                                  tok + "'");
    spec.ladder.push_back({res, count});
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (spec.ladder.empty()) throw std::invalid_argument("block spec: empty");
  for (std::size_t i = 1; i < spec.ladder.size(); ++i) {
    int a = spec.ladder[i - 1].resolution, b = spec.ladder[i].resolution;
    if (a == b) throw std::invalid_argument("block spec: repeated resolution");
    int hi = std::max(a, b), lo = std::min(a, b);
    if (hi % lo != 0)
      throw std::invalid_argument("block spec: " + std::to_string(a) + " -> " +
                                  std::to_string(b) + " is not an integer scale factor");
    bool inc = spec.ladder[1].resolution > spec.ladder[0].resolution;
    if ((b > a) != inc)
      throw std::invalid_argument("block spec: resolutions must be strictly monotone");
  }
  return spec;
}

// Validates that K tiles every run of same-resolution blocks in a spec.
inline void validate_group_k(const BlockSpec& spec, int k) {
  if (k < 1) throw std::invalid_argument("group size must be >= 1");
  for (const auto& e : spec.ladder)
    if (e.count % k != 0)
      throw std::invalid_argument("group size " + std::to_string(k) +
                                  " does not evenly tile " + std::to_string(e.count) +
                                  " blocks at resolution " + std::to_string(e.resolution));
}

}  // namespace vdvae
