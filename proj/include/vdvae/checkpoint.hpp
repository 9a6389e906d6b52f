#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vdvae {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// On-disk training snapshot: magic "VDVC", u32 version, length-prefixed
// key=value config blobs, a named f32 tensor table, trailing CRC32.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<std::pair<std::string, std::string>> config_blobs;  // (name, text)

  struct Entry {
    std::string name;
    std::vector<std::uint64_t> dims;
    std::vector<float> data;
  };
  std::vector<Entry> entries;

  const Entry& entry(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::out_of_range("checkpoint has no tensor " + name);
  }
  bool has_entry(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return true;
    return false;
  }
  const std::string& config_blob(const std::string& name) const {
    for (const auto& b : config_blobs)
      if (b.first == name) return b.second;
    throw std::out_of_range("checkpoint has no config blob " + name);
  }
};

namespace detail {

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t n,
                                std::uint32_t crc = 0) {
  crc = ~crc;
  for (std::size_t i = 0; i < n; ++i) {
    crc ^= data[i];
    for (int b = 0; b < 8; ++b) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

struct ByteWriter {
  std::vector<std::uint8_t> bytes;
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void raw(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
};

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n, off = 0;
  void need(std::size_t k) const {
    if (off + k > n) throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint8_t u8() {
    need(1);
    return p[off++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = std::uint16_t(p[off]) | std::uint16_t(p[off + 1]) << 8;
    off += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[off + i]) << (8 * i);
    off += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[off + i]) << (8 * i);
    off += 8;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p + off), k);
    off += k;
    return s;
  }
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw("VDVC");
  w.u32(c.version);
  w.u32(std::uint32_t(c.config_blobs.size()));
  for (const auto& [name, text] : c.config_blobs) {
    w.u16(std::uint16_t(name.size()));
    w.raw(name);
    w.u64(text.size());
    w.raw(text);
  }
  w.u64(c.entries.size());
  for (const auto& e : c.entries) {
    w.u16(std::uint16_t(e.name.size()));
    w.raw(e.name);
    w.u8(std::uint8_t(e.dims.size()));
    std::uint64_t numel = 1;
    for (auto d : e.dims) {
      w.u64(d);
      numel *= d;
    }
    if (numel != e.data.size())
      throw std::invalid_argument("checkpoint: dims/data mismatch for " + e.name);
    for (float v : e.data) w.f32(v);
  }
  w.u32(detail::crc32_ieee(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw std::runtime_error("checkpoint: truncated file");
  const std::size_t payload = bytes.size() - 4;
  detail::ByteReader r{bytes.data(), payload};
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t(bytes[payload + i]) << (8 * i);
  if (detail::crc32_ieee(bytes.data(), payload) != stored)
    throw std::runtime_error("checkpoint: CRC mismatch");
  if (r.str(4) != "VDVC") throw std::runtime_error("checkpoint: bad magic");
  Checkpoint c;
  c.version = r.u32();
  if (c.version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(c.version));
  const std::uint32_t blobs = r.u32();
  for (std::uint32_t i = 0; i < blobs; ++i) {
    auto name = r.str(r.u16());
    auto text = r.str(std::size_t(r.u64()));
    c.config_blobs.emplace_back(std::move(name), std::move(text));
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    e.name = r.str(r.u16());
    const int rank = r.u8();
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      e.dims.push_back(r.u64());
      numel *= e.dims.back();
    }
    e.data.resize(numel);
    for (auto& v : e.data) v = r.f32();
    c.entries.push_back(std::move(e));
  }
  if (r.off != payload) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  auto bytes = serialize_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// Bit-exact u64 <-> f32-pair packing for RNG state and counters stored in the
// tensor table.
inline void pack_u64(std::uint64_t v, float out[2]) {
  std::uint32_t lo = std::uint32_t(v), hi = std::uint32_t(v >> 32);
  std::memcpy(&out[0], &lo, 4);
  std::memcpy(&out[1], &hi, 4);
}

inline std::uint64_t unpack_u64(const float in[2]) {
  std::uint32_t lo, hi;
  std::memcpy(&lo, &in[0], 4);
  std::memcpy(&hi, &in[1], 4);
  return std::uint64_t(lo) | std::uint64_t(hi) << 32;
}

}  // namespace vdvae
