#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "vdvae/checkpoint.hpp"
#include "vdvae/dataset.hpp"
#include "vdvae/image.hpp"

using namespace vdvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

// Deterministic fake CIFAR batch; byte pattern varies per file and record.
std::vector<std::uint8_t> fake_cifar_batch(int file_tag) {
  std::vector<std::uint8_t> bytes(10000 * std::size_t(3073));
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = std::uint8_t((i * 31 + file_tag * 7) & 255);
  return bytes;
}

}  // namespace

TEST_CASE("cifar10: loads batches, splits and record layout") {
  auto dir = temp_dir("vdvae_cifar_test");
  for (int b = 1; b <= 5; ++b)
    write_bytes(dir / ("data_batch_" + std::to_string(b) + ".bin"), fake_cifar_batch(b));
  auto test_bytes = fake_cifar_batch(6);
  // Pin the first test-batch record: label byte then R, G, B planes.
  test_bytes[0] = 7;
  for (int i = 0; i < 1024; ++i) {
    test_bytes[1 + i] = std::uint8_t(10 + i % 200);        // red plane
    test_bytes[1 + 1024 + i] = std::uint8_t(20 + i % 200); // green plane
    test_bytes[1 + 2048 + i] = std::uint8_t(30 + i % 200); // blue plane
  }
  write_bytes(dir / "test_batch.bin", test_bytes);

  auto ds = load_cifar10_binary(dir.string(), 1234);
  CHECK(ds.count() == 60000);
  CHECK(ds.train_idx.size() == 45000);
  CHECK(ds.val_idx.size() == 5000);
  CHECK(ds.test_idx.size() == 10000);
  CHECK(ds.image_bytes() == 3072);

  // Train and validation are disjoint and cover the first five batches.
  std::set<std::size_t> train(ds.train_idx.begin(), ds.train_idx.end());
  std::set<std::size_t> val(ds.val_idx.begin(), ds.val_idx.end());
  for (auto i : val) CHECK(train.count(i) == 0);
  std::set<std::size_t> both = train;
  both.insert(val.begin(), val.end());
  CHECK(both.size() == 50000);
  CHECK(*both.rbegin() == 49999);

  // Planar-to-HWC: pixel 0 of the first test image interleaves the planes.
  const std::uint8_t* img = ds.image(ds.test_idx[0]);
  CHECK(img[0] == 10);
  CHECK(img[1] == 20);
  CHECK(img[2] == 30);
  CHECK(img[3] == 11);  // pixel 1 red

  // Same seed gives the same split.
  auto ds2 = load_cifar10_binary(dir.string(), 1234);
  CHECK(ds2.val_idx == ds.val_idx);

  // Wrong length and missing files are rejected.
  write_bytes(dir / "test_batch.bin", std::vector<std::uint8_t>(100));
  CHECK_THROWS(load_cifar10_binary(dir.string()));
  fs::remove(dir / "test_batch.bin");
  CHECK_THROWS(load_cifar10_binary(dir.string()));
  fs::remove_all(dir);
}

TEST_CASE("vdvt: round trip and validation") {
  auto dir = temp_dir("vdvae_vdvt_test");
  Dataset ds;
  ds.height = 4;
  ds.width = 3;
  ds.channels = 1;
  for (int i = 0; i < 2 * 4 * 3; ++i) ds.images.push_back(std::uint8_t(i * 9));
  ds.train_idx = {0, 1};
  auto path = (dir / "toy.vdvt").string();
  save_vdvt(path, ds);
  auto back = load_vdvt(path);
  CHECK(back.height == 4);
  CHECK(back.width == 3);
  CHECK(back.channels == 1);
  CHECK(back.count() == 2);
  CHECK(back.images == ds.images);

  write_bytes(dir / "bad.vdvt", {'N', 'O', 'P', 'E', 0, 0, 0, 0});
  CHECK_THROWS(load_vdvt((dir / "bad.vdvt").string()));
  std::vector<std::uint8_t> trunc = {'V', 'D', 'V', 'T', 2, 0, 0, 0, 4, 0, 0, 0,
                                     3, 0, 0, 0, 1, 0, 0, 0, 9};
  write_bytes(dir / "trunc.vdvt", trunc);
  CHECK_THROWS(load_vdvt((dir / "trunc.vdvt").string()));
  fs::remove_all(dir);
}

TEST_CASE("synthetic: determinism and degenerate settings") {
  SyntheticConfig cfg;
  cfg.n = 20;
  cfg.size = 8;
  cfg.palette_k = 3;
  cfg.texture_scale = 8;
  cfg.seed = 55;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  CHECK(a.images == b.images);
  CHECK(a.count() == 20);

  cfg.palette_k = 1;
  cfg.texture_scale = 0;
  auto flat = generate_synthetic(cfg);
  for (auto v : flat.images) CHECK(v == 128);

  cfg.size = 9;
  CHECK_THROWS(generate_synthetic(cfg));
}

TEST_CASE("synthetic: empirical histogram matches the analytic distribution") {
  SyntheticConfig cfg;
  cfg.n = 20000;
  cfg.size = 8;
  cfg.palette_k = 3;
  cfg.texture_scale = 8;
  cfg.seed = 77;
  auto ds = generate_synthetic(cfg);

  for (auto [px, py] : {std::pair{2, 3}, std::pair{0, 0}, std::pair{7, 4}}) {
    auto expect = synthetic_pixel_distribution(cfg, px, py);
    std::vector<double> freq(256, 0.0);
    for (std::size_t i = 0; i < ds.count(); ++i)
      freq[ds.image(i)[(std::size_t(py) * cfg.size + px)]] += 1.0 / double(cfg.n);
    for (int v = 0; v < 256; ++v) {
      double se = std::sqrt(std::max(expect[v] * (1 - expect[v]), 1e-12) / double(cfg.n));
      CHECK(std::abs(freq[v] - expect[v]) <= 4 * se + 1e-9);
    }
  }
}

TEST_CASE("ppm: exact bytes, grid layout, round trip") {
  auto dir = temp_dir("vdvae_ppm_test");
  const std::uint8_t white[3] = {255, 255, 255};
  auto p1 = (dir / "white.ppm").string();
  write_ppm(p1, white, 1, 1);
  std::ifstream f(p1, std::ios::binary);
  std::string contents((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
  CHECK(contents == std::string("P6\n1 1\n255\n\xFF\xFF\xFF"));

  // 16 tiles of 32x32 with 2px gutters -> 134x134.
  std::vector<std::vector<std::uint8_t>> tiles(
      16, std::vector<std::uint8_t>(3 * 32 * 32, 200));
  auto pg = (dir / "grid.ppm").string();
  write_ppm_grid(pg, tiles, 32, 32);
  auto grid = read_ppm(pg);
  CHECK(grid.width == 134);
  CHECK(grid.height == 134);
  CHECK(grid.pixels[0] == 200);                       // inside first tile
  CHECK(grid.pixels[(std::size_t(0) * 134 + 32) * 3] == 0);  // first gutter column

  std::vector<std::uint8_t> rnd(3 * 5 * 7);
  for (std::size_t i = 0; i < rnd.size(); ++i) rnd[i] = std::uint8_t(i * 13);
  auto pr = (dir / "round.ppm").string();
  write_ppm(pr, rnd.data(), 5, 7);
  auto back = read_ppm(pr);
  CHECK(back.width == 5);
  CHECK(back.height == 7);
  CHECK(back.pixels == rnd);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: byte-identical round trip and corruption detection") {
  auto dir = temp_dir("vdvae_ckpt_test");
  Checkpoint c;
  c.config_blobs = {{"model", "width = 8\nzdim = 2\n"}, {"train", "seed = 3\n"}};
  c.entries.push_back({"w", {2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}});
  c.entries.push_back({"counters", {2}, {0.f, 0.f}});
  pack_u64(0xDEADBEEFCAFEBABEull, c.entries.back().data.data());

  auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, c);
  auto back = load_checkpoint(path);
  CHECK(back.version == kCheckpointVersion);
  CHECK(back.config_blob("model") == c.config_blobs[0].second);
  CHECK(back.entry("w").dims == std::vector<std::uint64_t>{2, 3});
  CHECK(back.entry("w").data == c.entries[0].data);
  CHECK(unpack_u64(back.entry("counters").data.data()) == 0xDEADBEEFCAFEBABEull);
  CHECK_THROWS_AS(back.entry("nope"), std::out_of_range);

  auto path2 = (dir / "b.ckpt").string();
  save_checkpoint(path2, back);
  std::ifstream fa(path, std::ios::binary), fb(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);

  // Flip one payload byte: CRC must reject.
  auto bytes = serialize_checkpoint(c);
  auto corrupted = bytes;
  corrupted[10] ^= 0x40;
  CHECK_THROWS_WITH_AS(parse_checkpoint(corrupted), doctest::Contains("CRC"),
                       std::runtime_error);
  // Truncation.
  auto trunc = bytes;
  trunc.resize(trunc.size() - 9);
  CHECK_THROWS_AS(parse_checkpoint(trunc), std::runtime_error);
  // Wrong magic with a recomputed CRC.
  auto badmagic = bytes;
  badmagic[0] = 'X';
  auto crc = vdvae::detail::crc32_ieee(badmagic.data(), badmagic.size() - 4);
  for (int i = 0; i < 4; ++i) badmagic[badmagic.size() - 4 + i] = std::uint8_t(crc >> (8 * i));
  CHECK_THROWS_WITH_AS(parse_checkpoint(badmagic), doctest::Contains("magic"),
                       std::runtime_error);
  // Unsupported version.
  auto v2 = c;
  v2.version = 99;
  CHECK_THROWS_WITH_AS(parse_checkpoint(serialize_checkpoint(v2)),
                       doctest::Contains("version"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint: u64 packing is bit-exact including NaN payloads") {
  for (std::uint64_t v : {0ull, 1ull, 0xFFFFFFFFFFFFFFFFull, 0x7FF8000000000000ull,
                          0x123456789ABCDEF0ull}) {
    float f[2];
    pack_u64(v, f);
    CHECK(unpack_u64(f) == v);
  }
}

TEST_CASE("split_validation: seeded, disjoint, union-preserving") {
  Dataset ds;
  ds.height = ds.width = 1;
  ds.channels = 1;
  ds.images.assign(100, 0);
  for (std::size_t i = 0; i < 100; ++i) ds.train_idx.push_back(i);
  split_validation(ds, 25, 9);
  CHECK(ds.val_idx.size() == 25);
  CHECK(ds.train_idx.size() == 75);
  std::set<std::size_t> all(ds.train_idx.begin(), ds.train_idx.end());
  all.insert(ds.val_idx.begin(), ds.val_idx.end());
  CHECK(all.size() == 100);
  CHECK_THROWS(split_validation(ds, 1000, 9));
}
