// Command-line front end: training, evaluation, sampling, reconstruction,
// diagnostics, ablations, and the self-verification suites.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vdvae/checkpoint.hpp"
#include "vdvae/config.hpp"
#include "vdvae/dataset.hpp"
#include "vdvae/diagnostics.hpp"
#include "vdvae/dmolcheck.hpp"
#include "vdvae/image.hpp"
#include "vdvae/opcheck.hpp"
#include "vdvae/props.hpp"
#include "vdvae/trainer.hpp"

namespace fs = std::filesystem;
using namespace vdvae;

namespace {

// Raised for configuration/usage problems; mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A full run description: model + trainer hyperparameters plus data source.
// Key/value maps are collected first and turned into validated configs only
// once the data geometry is known, since the model validator couples block
// specs to the image size.
struct RunConfig {
  KeyValues model_kv, train_kv;
  std::string dataset = "synthetic";  // synthetic | cifar10 | vdvt
  std::string data_path;
  ModelConfig model;
  TrainConfig train;

  RunConfig() {
    ModelConfig defaults;
    defaults.image_size = 8;
    defaults.image_channels = 1;
    defaults.enc_spec = parse_block_spec("8x2,4x2,1x2");
    defaults.dec_spec = parse_block_spec("1x2,4x2,8x2");
    model_kv = parse_key_values(defaults.to_kv());
    train_kv = parse_key_values(TrainConfig().to_kv());
  }
};

const char* kRunConfigKeys =
    "width, bottleneck_ratio, zdim, enc_blocks, dec_blocks, prior_mode, "
    "ff_group_size, dmol_mixtures, residual_scaling, downsample_mode, lr, "
    "batch_size, weight_decay, skip_threshold, ema_rate, kl_phase, "
    "total_steps, seed, dataset, data_path";

void apply_run_key(RunConfig& rc, const std::string& key, const std::string& value,
                   int line_no) {
  if (key == "width" || key == "bottleneck_ratio" || key == "zdim" ||
      key == "enc_blocks" || key == "dec_blocks" || key == "prior_mode" ||
      key == "ff_group_size" || key == "dmol_mixtures" || key == "residual_scaling" ||
      key == "downsample_mode") {
    rc.model_kv[key] = value;
  } else if (key == "lr" || key == "batch_size" || key == "weight_decay" ||
             key == "skip_threshold" || key == "ema_rate" || key == "kl_phase" ||
             key == "total_steps" || key == "seed") {
    rc.train_kv[key] = value;
  } else if (key == "dataset") {
    if (value != "synthetic" && value != "cifar10" && value != "vdvt")
      throw UsageError("dataset must be synthetic, cifar10, or vdvt (line " +
                       std::to_string(line_no) + ")");
    rc.dataset = value;
  } else if (key == "data_path") {
    rc.data_path = value;
  } else {
    throw UsageError("unknown key '" + key + "' on line " + std::to_string(line_no) +
                     "; valid keys: " + kRunConfigKeys);
  }
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("line " + std::to_string(line_no) + ": expected key = value");
    auto trim = [](std::string s) {
      auto a = s.find_first_not_of(" \t\r");
      auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    apply_run_key(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), line_no);
  }
  return rc;
}

RunConfig load_run_config(const std::string& path,
                          const std::vector<std::string>& overrides) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig rc = parse_run_config(ss.str());
  for (const auto& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos)
      throw UsageError("--override expects key=value, got: " + ov);
    apply_run_key(rc, ov.substr(0, eq), ov.substr(eq + 1), 0);
  }
  return rc;
}

// Builds the validated configs with the given image geometry.
void finalize_configs(RunConfig& rc, int image_size, int image_channels) {
  rc.model_kv["image_size"] = std::to_string(image_size);
  rc.model_kv["image_channels"] = std::to_string(image_channels);
  try {
    rc.model = ModelConfig::from_kv(rc.model_kv);
    rc.train = TrainConfig::from_kv(rc.train_kv);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

// Resolves the data source and locks in the image geometry.
Dataset load_dataset_for(RunConfig& rc) {
  const std::uint64_t seed = std::stoull(rc.train_kv.at("seed"));
  if (rc.dataset == "cifar10") {
    if (rc.data_path.empty())
      throw UsageError("dataset cifar10 requires data_path (directory with the six "
                       "binary batch files)");
    auto ds = load_cifar10_binary(rc.data_path, seed);
    finalize_configs(rc, 32, 3);
    return ds;
  }
  if (rc.dataset == "vdvt") {
    if (rc.data_path.empty()) throw UsageError("dataset vdvt requires data_path");
    auto ds = load_vdvt(rc.data_path);
    if (ds.height != ds.width)
      throw UsageError("vdvt dataset must be square, got " + std::to_string(ds.height) +
                       "x" + std::to_string(ds.width));
    if (ds.val_idx.empty() && ds.train_idx.size() >= 8)
      split_validation(ds, ds.train_idx.size() / 8, seed);
    finalize_configs(rc, ds.height, ds.channels);
    return ds;
  }
  // Built-in synthetic hierarchical dataset; its resolution follows the
  // decoder spec's output resolution so specs and data always agree.
  BlockSpec dec;
  try {
    dec = parse_block_spec(rc.model_kv.at("dec_blocks"));
  } catch (const std::exception& e) {
    throw UsageError(std::string("dec_blocks: ") + e.what());
  }
  SyntheticConfig sc;
  sc.n = 1024;
  sc.size = dec.last_resolution();
  sc.channels = 1;
  sc.seed = seed + 1;
  auto ds = generate_synthetic(sc);
  split_validation(ds, sc.n / 8, seed);
  finalize_configs(rc, sc.size, sc.channels);
  return ds;
}

std::vector<std::vector<std::uint8_t>> to_rgb_images(const std::vector<std::uint8_t>& hwc,
                                                     int n, int size, int channels) {
  std::vector<std::vector<std::uint8_t>> out;
  const std::size_t per = std::size_t(size) * size * channels;
  for (int i = 0; i < n; ++i) {
    if (channels == 3) {
      out.emplace_back(hwc.begin() + i * per, hwc.begin() + (i + 1) * per);
    } else {
      out.push_back(gray_to_rgb(hwc.data() + i * per, size, size));
    }
  }
  return out;
}

TrainState<float> state_from_file(const std::string& ckpt_path) {
  return from_checkpoint<float>(load_checkpoint(ckpt_path));
}

void save_state(const TrainState<float>& s, const std::string& path) {
  save_checkpoint(path, to_checkpoint(s));
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& resume, const std::vector<std::string>& overrides,
              std::uint64_t ckpt_every) {
  RunConfig rc = load_run_config(config_path, overrides);
  fs::create_directories(out_dir);
  Dataset ds = load_dataset_for(rc);
  rc.model.validate();
  rc.train.validate();

  std::unique_ptr<TrainState<float>> s;
  if (!resume.empty()) {
    s = std::make_unique<TrainState<float>>(state_from_file(resume));
    // The config file plus overrides win over the checkpointed trainer
    // settings; this is how phase restarts and lr drops are expressed.
    s->train_cfg = rc.train;
  } else {
    s = std::make_unique<TrainState<float>>(rc.model, rc.train,
                                            compute_normalization(ds));
  }

  const std::string metrics_path = out_dir + "/metrics.csv";
  std::ofstream metrics(metrics_path,
                        s->step == 0 ? std::ios::trunc : std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open " + metrics_path);
  if (s->step == 0) metrics << metrics_header(s->model.stochastic_depth()) << "\n";

  while (s->step < s->train_cfg.total_steps) {
    auto idx = batch_indices(s->train_cfg.seed, s->step, s->train_cfg.batch_size,
                             ds.train_idx);
    auto batch = make_batch<float>(ds, idx, s->stats);
    auto r = train_step(*s, batch);
    metrics << metrics_row(*s, r) << "\n";
    if (s->step % 200 == 0)
      std::cout << "step " << s->step << " loss_bpd " << r.loss_bpd << " grad_norm "
                << r.grad_norm << (r.applied ? "" : " [skipped]") << "\n";
    if (ckpt_every > 0 && s->step % ckpt_every == 0 &&
        s->step < s->train_cfg.total_steps)
      save_state(*s, out_dir + "/ckpt_" + std::to_string(s->step) + ".vdvc");
  }
  save_state(*s, out_dir + "/final.vdvc");
  std::cout << "done: " << s->step << " steps (" << s->applied_count << " applied, "
            << s->skip_count << " skipped); wrote " << metrics_path << " and "
            << out_dir << "/final.vdvc\n";
  return 0;
}

Dataset data_for_state(TrainState<float>& s, const std::string& data,
                       std::uint64_t seed) {
  if (data == "synthetic" || data.empty()) {
    SyntheticConfig sc;
    sc.n = 1024;
    sc.size = s.model_cfg.image_size;
    sc.channels = s.model_cfg.image_channels;
    sc.seed = seed + 1;
    auto ds = generate_synthetic(sc);
    split_validation(ds, sc.n / 8, seed);
    return ds;
  }
  if (fs::is_directory(data)) {
    auto ds = load_cifar10_binary(data, seed);
    return ds;
  }
  auto ds = load_vdvt(data);
  if (ds.val_idx.empty() && ds.train_idx.size() >= 8)
    split_validation(ds, ds.train_idx.size() / 8, seed);
  return ds;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split,
             bool use_ema, std::uint64_t seed) {
  auto s = state_from_file(ckpt);
  auto ds = data_for_state(s, data, s.train_cfg.seed);
  const auto& idx = split == "test" ? ds.test_idx : ds.val_idx;
  if (idx.empty()) throw std::runtime_error("split '" + split + "' is empty");
  double nats = evaluate(s, ds, idx, s.train_cfg.batch_size, use_ema, seed);
  double bpd = nats / std::log(2.0);
  if (std::abs(bpd * std::log(2.0) - nats) > 1e-12 * std::max(1.0, std::abs(nats)))
    throw std::runtime_error("bits/dim consistency check failed");
  std::cout << "split " << split << (use_ema ? " (ema)" : " (raw)") << "\n"
            << "elbo_nats_per_subpixel " << format_double(nats) << "\n"
            << "elbo_bits_per_dim " << format_double(bpd) << "\n";
  auto prof = kl_per_layer(s, ds, idx, s.train_cfg.batch_size, seed);
  std::cout << "per-layer KL (bits/dim):\n" << prof.to_csv();
  return 0;
}

int cmd_sample(const std::string& ckpt, int n, double temperature, std::uint64_t seed,
               const std::string& out_dir) {
  auto s = state_from_file(ckpt);
  fs::create_directories(out_dir);
  Rng rng(seed);
  auto px = sample_images(s, n, temperature, rng);
  write_ppm_grid(out_dir + "/samples.ppm",
                 to_rgb_images(px, n, s.model_cfg.image_size, s.model_cfg.image_channels),
                 s.model_cfg.image_size, s.model_cfg.image_size);
  std::cout << "wrote " << out_dir << "/samples.ppm (" << n << " samples, temperature "
            << temperature << ")\n";
  return 0;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& data, int up_to,
                    double temperature, int n, std::uint64_t seed,
                    const std::string& out_dir) {
  auto s = state_from_file(ckpt);
  auto ds = data_for_state(s, data, s.train_cfg.seed);
  fs::create_directories(out_dir);
  const auto& pool = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
  if (pool.empty()) throw std::runtime_error("no images to reconstruct");
  n = std::min<int>(n, int(pool.size()));
  std::vector<std::size_t> idx(pool.begin(), pool.begin() + n);
  Rng rng(seed);
  auto px = partial_reconstruct(s, ds, idx, up_to, temperature, rng);
  const int size = s.model_cfg.image_size, ch = s.model_cfg.image_channels;
  // Originals and reconstructions side by side, originals first.
  std::vector<std::uint8_t> orig;
  for (auto i : idx) {
    auto img = ds.image(i);
    orig.insert(orig.end(), img, img + std::size_t(size) * size * ch);
  }
  auto tiles = to_rgb_images(orig, n, size, ch);
  auto recon = to_rgb_images(px, n, size, ch);
  tiles.insert(tiles.end(), recon.begin(), recon.end());
  write_ppm_grid(out_dir + "/reconstructions.ppm", tiles, size, size);
  std::cout << "wrote " << out_dir << "/reconstructions.ppm (posteriors up to "
            << up_to << "x" << up_to << ", temperature " << temperature << ")\n";
  return 0;
}

int cmd_diag_kl(const std::string& ckpt, const std::string& data, std::uint64_t seed,
                const std::string& out_dir) {
  auto s = state_from_file(ckpt);
  auto ds = data_for_state(s, data, s.train_cfg.seed);
  const auto& idx = ds.val_idx.empty() ? ds.train_idx : ds.val_idx;
  auto prof = kl_per_layer(s, ds, idx, s.train_cfg.batch_size, seed);
  fs::create_directories(out_dir);
  std::ofstream f(out_dir + "/rate_profile.csv");
  f << prof.to_csv();
  std::cout << prof.to_csv();
  int collapsed = 0;
  for (bool c : prof.collapsed) collapsed += c;
  std::cout << "total_kl_bpd " << format_double(prof.total_bpd()) << "; " << collapsed
            << " of " << prof.collapsed.size() << " layers below "
            << kCollapseThresholdBpd << " bits/dim\n";
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::vector<std::uint64_t>& v) {
  return v.empty() ? std::vector<std::uint64_t>{0, 1, 2} : v;
}

int cmd_ablate_depth(const std::string& config_path, const std::vector<int>& ks,
                     const std::vector<std::uint64_t>& seeds,
                     const std::vector<std::string>& overrides,
                     const std::string& out_dir) {
  RunConfig rc = load_run_config(config_path, overrides);
  Dataset ds = load_dataset_for(rc);
  auto res = depth_ablation<float>(rc.model, rc.train, ds,
                                   ks.empty() ? std::vector<int>{1, 2} : ks,
                                   parse_seeds(seeds));
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/depth_ablation.csv") << res.to_csv();
  std::cout << res.to_csv();
  return 0;
}

int cmd_ablate_layers(const std::string& config_path,
                      const std::vector<std::string>& specs,
                      const std::vector<std::uint64_t>& seeds,
                      const std::vector<std::string>& overrides,
                      const std::string& out_dir) {
  if (specs.empty()) throw UsageError("ablate layers requires at least one --spec");
  RunConfig rc = load_run_config(config_path, overrides);
  Dataset ds = load_dataset_for(rc);
  auto res = layer_distribution_ablation<float>(rc.model, rc.train, ds, specs,
                                                parse_seeds(seeds));
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/layer_ablation.csv") << res.to_csv();
  std::cout << res.to_csv();
  return 0;
}

int cmd_check_grads(int shapes, std::uint64_t seed) {
  auto rep = run_gradient_oracle(shapes, seed);
  std::cout << rep.summary();
  bool detach_ok = detach_blocks_gradient(seed);
  std::cout << "detach               gradient blocking " << (detach_ok ? "ok" : "FAIL")
            << "\n";
  if (!rep.pass() || !detach_ok) {
    std::cout << "gradient oracle: FAIL\n";
    return 1;
  }
  std::cout << "gradient oracle: all ops within f64 rtol " << rep.rtol_f64
            << ", f32 rtol " << rep.rtol_f32 << "\n";
  return 0;
}

int cmd_check_props(std::uint64_t seed) {
  Rng rng(seed + 4242);
  double worst = 0, worst_density = 0;
  for (int t = 0; t < 100; ++t) {
    auto rep = prop1_equivalence_check(DiscreteARModel::random(6, rng));
    worst = std::max(worst, rep.max_discrepancy);
    worst_density = std::max(worst_density, rep.density_sum_error);
  }
  bool p1 = worst < 1e-12 && worst_density < 1e-12;
  std::cout << "prop1: 100 random AR models (n=6), max |ELBO - loglik| = " << worst
            << ", max |density sum - 1| = " << worst_density << (p1 ? " ok" : " FAIL")
            << "\n";

  bool p2 = true;
  double worst_off = 0;
  auto cfg = prop2_miniature();
  for (std::uint64_t s = seed; s < seed + 10; ++s) {
    auto rep = prop2_jacobian_check(cfg, s, 1e-9);
    p2 = p2 && rep.pass;
    worst_off = std::max(worst_off, std::max(rep.max_above_block_diagonal,
                                             rep.max_within_block_offdiag));
  }
  std::cout << "prop2: 10 inits of a 3-layer miniature, max off-block-diagonal "
            << worst_off << (p2 ? " ok" : " FAIL") << "\n";
  return (p1 && p2) ? 0 : 1;
}

int cmd_check_dmol(std::uint64_t seed) {
  auto rep = run_dmol_check(1000, 100000, seed);
  std::cout << rep.summary();
  return rep.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Very deep hierarchical VAE: training, evaluation, and diagnostics"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", resume, ckpt, data = "synthetic";
  std::string split = "val";
  std::vector<std::string> overrides, specs;
  std::vector<std::uint64_t> seeds;
  std::vector<int> ks;
  bool use_ema = false;
  int n = 16, up_to = 0, shapes = 20;
  double temperature = 0.85;
  std::uint64_t seed = 0, ckpt_every = 1000;

  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path)->required();
  train->add_option("--out", out_dir)->required();
  train->add_option("--resume", resume);
  train->add_option("--override", overrides, "key=value, repeatable");
  train->add_option("--ckpt-every", ckpt_every, "periodic checkpoint interval (steps)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a data split");
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", data, "cifar10 dir, .vdvt file, or 'synthetic'");
  ev->add_option("--split", split)->check(CLI::IsMember({"val", "test"}));
  ev->add_flag("--use-ema", use_ema);
  ev->add_option("--seed", seed);

  auto* sa = app.add_subcommand("sample", "Unconditional samples to a PPM grid");
  sa->add_option("--ckpt", ckpt)->required();
  sa->add_option("--n", n);
  sa->add_option("--temperature", temperature);
  sa->add_option("--seed", seed);
  sa->add_option("--out", out_dir)->required();

  auto* re = app.add_subcommand("reconstruct",
                                "Reconstruct with posteriors up to a resolution");
  re->add_option("--ckpt", ckpt)->required();
  re->add_option("--data", data);
  re->add_option("--up-to", up_to, "use posteriors at resolutions <= this")->required();
  re->add_option("--temperature", temperature)->default_val(0.4);
  re->add_option("--n", n)->default_val(8);
  re->add_option("--seed", seed);
  re->add_option("--out", out_dir)->required();

  auto* diag = app.add_subcommand("diag", "Diagnostics");
  diag->require_subcommand(1);
  auto* diag_kl = diag->add_subcommand("kl", "Per-layer KL rate profile");
  diag_kl->add_option("--ckpt", ckpt)->required();
  diag_kl->add_option("--data", data);
  diag_kl->add_option("--seed", seed);
  diag_kl->add_option("--out", out_dir)->required();

  auto* ab = app.add_subcommand("ablate", "Ablation grids");
  ab->require_subcommand(1);
  auto* ab_depth = ab->add_subcommand("depth", "Effective-depth grid via group size K");
  ab_depth->add_option("--config", config_path)->required();
  ab_depth->add_option("--k", ks, "group sizes, repeatable");
  ab_depth->add_option("--seeds", seeds);
  ab_depth->add_option("--override", overrides);
  ab_depth->add_option("--out", out_dir)->required();
  auto* ab_layers = ab->add_subcommand("layers", "Layer-distribution grid");
  ab_layers->add_option("--config", config_path)->required();
  ab_layers->add_option("--spec", specs, "decoder block spec, repeatable");
  ab_layers->add_option("--seeds", seeds);
  ab_layers->add_option("--override", overrides);
  ab_layers->add_option("--out", out_dir)->required();

  auto* ck = app.add_subcommand("check", "Self-verification suites");
  ck->require_subcommand(1);
  auto* ck_grads = ck->add_subcommand("grads", "Finite-difference gradient oracle");
  ck_grads->add_option("--shapes", shapes, "random shapes per op");
  ck_grads->add_option("--seed", seed);
  auto* ck_props = ck->add_subcommand("props", "Propositions 1 and 2");
  ck_props->add_option("--seed", seed);
  auto* ck_dmol = ck->add_subcommand("dmol", "DMoL normalization and sampler");
  ck_dmol->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, out_dir, resume, overrides,
                                          ckpt_every);
    if (ev->parsed()) return cmd_eval(ckpt, data, split, use_ema, seed);
    if (sa->parsed()) return cmd_sample(ckpt, n, temperature, seed, out_dir);
    if (re->parsed())
      return cmd_reconstruct(ckpt, data, up_to, temperature, n, seed, out_dir);
    if (diag->parsed() && diag_kl->parsed())
      return cmd_diag_kl(ckpt, data, seed, out_dir);
    if (ab->parsed() && ab_depth->parsed())
      return cmd_ablate_depth(config_path, ks, seeds, overrides, out_dir);
    if (ab->parsed() && ab_layers->parsed())
      return cmd_ablate_layers(config_path, specs, seeds, overrides, out_dir);
    if (ck->parsed() && ck_grads->parsed()) return cmd_check_grads(shapes, seed);
    if (ck->parsed() && ck_props->parsed()) return cmd_check_props(seed);
    if (ck->parsed() && ck_dmol->parsed()) return cmd_check_dmol(seed);
    std::cerr << "no subcommand given\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
