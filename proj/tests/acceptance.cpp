// End-to-end acceptance suite. Each criterion prints exactly one PASS/FAIL
// line; the process exits nonzero if any criterion fails. Tolerances are
// fixed here and are not tunable from the command line.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vdvae/checkpoint.hpp"
#include "vdvae/dataset.hpp"
#include "vdvae/diagnostics.hpp"
#include "vdvae/dmolcheck.hpp"
#include "vdvae/opcheck.hpp"
#include "vdvae/props.hpp"
#include "vdvae/trainer.hpp"

namespace {

using namespace vdvae;

int g_failures = 0;

void report(int number, const std::string& name, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << number << " (" << name
            << "): " << detail << std::endl;
  if (!pass) ++g_failures;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1: differentiation oracle ----------------------------------------------

void criterion_1() {
  auto rep = run_gradient_oracle(20, 0);
  bool detach_ok = detach_blocks_gradient(0);
  double worst64 = 0, worst32 = 0;
  for (const auto& e : rep.entries) {
    worst64 = std::max(worst64, e.max_rel_err_f64);
    worst32 = std::max(worst32, e.max_rel_err_f32);
  }
  std::ostringstream d;
  d << rep.entries.size() << " ops, worst f64 rel err " << worst64
    << " (tol 1e-6), worst f32 rel err " << worst32 << " (tol 1e-3), detach "
    << (detach_ok ? "ok" : "leaks gradient");
  report(1, "op gradients vs finite differences", rep.pass() && detach_ok, d.str());
}

// --- 2: closed-form KL vs Monte Carlo ---------------------------------------

void criterion_2() {
  Rng rng(42);
  const int draws = 50;
  const int mc_samples = 1000000;
  double worst = 0;
  for (int d = 0; d < draws; ++d) {
    const double mq = 0.4 * rng.normal(), lq = 0.15 * rng.normal();
    const double mp = 0.4 * rng.normal(), lp = 0.15 * rng.normal();
    using Td = Tensor<double>;
    GaussianParams<double> q{Td::from({1, 1, 1, 1}, {mq}), Td::from({1, 1, 1, 1}, {lq})};
    GaussianParams<double> p{Td::from({1, 1, 1, 1}, {mp}), Td::from({1, 1, 1, 1}, {lp})};
    const double closed = gaussian_kl(q, p).item();
    const double sq = std::exp(lq), sp = std::exp(lp);
    double mc = 0;
    for (int i = 0; i < mc_samples; ++i) {
      const double z = mq + sq * rng.normal();
      const double dq = (z - mq) / sq, dp = (z - mp) / sp;
      mc += (lp - lq) + 0.5 * (dp * dp - dq * dq);
    }
    mc /= mc_samples;
    worst = std::max(worst, std::abs(closed - mc));
  }
  // Self-KL must vanish identically, not just approximately.
  using Td = Tensor<double>;
  GaussianParams<double> q{Td::from({1, 2, 1, 1}, {0.3, -1.0}),
                           Td::from({1, 2, 1, 1}, {0.2, -0.4})};
  const auto self_kl = gaussian_kl(q, q);
  bool self_zero = true;
  for (double v : self_kl.val()) self_zero = self_zero && v == 0.0;
  std::ostringstream d;
  d << "worst |closed-form - MC(1e6)| = " << worst << " (tol 3e-3) over " << draws
    << " parameter draws; KL(q,q) " << (self_zero ? "== 0 exactly" : "!= 0");
  report(2, "gaussian KL vs Monte Carlo", worst < 3e-3 && self_zero, d.str());
}

// --- 3: discretized mixture of logistics ------------------------------------

void criterion_3() {
  auto rep = run_dmol_check(1000, 100000, 0);
  std::ostringstream d;
  d << "max |sum of bin masses - 1| = " << rep.max_norm_deviation << " (tol "
    << rep.norm_tolerance << ") over " << rep.norm_draws << " draws; "
    << rep.histogram_violations << " histogram bins beyond 3 sigma of "
    << rep.histogram_draws << " sampler draws";
  report(3, "DMoL normalization and sampler histogram", rep.pass(), d.str());
}

// --- 4: proposition 1, exact ELBO = autoregressive likelihood ----------------

void criterion_4() {
  auto t0 = std::chrono::steady_clock::now();
  Rng rng(7);
  double worst_disc = 0, worst_density = 0;
  for (int i = 0; i < 100; ++i) {
    auto ar = DiscreteARModel::random(6, rng);
    auto rep = prop1_equivalence_check(ar);
    worst_disc = std::max(worst_disc, rep.max_discrepancy);
    worst_density = std::max(worst_density, rep.density_sum_error);
  }
  const double secs = elapsed_s(t0);
  std::ostringstream d;
  d << "100 random 6-variable models: max |ELBO - log-lik| = " << worst_disc
    << ", max |density sum - 1| = " << worst_density << " (tol 1e-12 each), "
    << secs << " s (budget 60 s)";
  report(4, "exact-posterior ELBO equals AR likelihood",
         worst_disc < 1e-12 && worst_density < 1e-12 && secs < 60.0, d.str());
}

// --- 5: proposition 2, block-triangular eps -> z Jacobian --------------------

void criterion_5() {
  auto cfg = prop2_miniature();
  bool all = true;
  double worst_above = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto rep = prop2_jacobian_check(cfg, seed, 1e-9);
    all = all && rep.pass;
    worst_above = std::max(worst_above, rep.max_above_block_diagonal);
  }
  std::ostringstream d;
  d << "10 random inits of the 3-layer miniature: max above-block entry = "
    << worst_above << " (tol 1e-9)";
  report(5, "eps->z Jacobian block lower triangular", all, d.str());
}

// --- 6: 64-layer stability ---------------------------------------------------

void criterion_6() {
  ModelConfig mc;
  mc.width = 64;
  mc.zdim = 4;
  mc.image_size = 8;
  mc.image_channels = 1;
  mc.dmol_mixtures = 2;
  mc.enc_spec = parse_block_spec("8x2,4x2,2x2,1x2");
  mc.dec_spec = parse_block_spec("1x16,2x16,4x16,8x16");  // 64 stochastic layers
  mc.validate();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.learning_rate = 2e-4;
  tc.seed = 0;
  SyntheticConfig sc;
  sc.n = 64;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 5;
  auto ds = generate_synthetic(sc);
  TrainState<float> s(mc, tc, compute_normalization(ds));
  bool finite = true;
  for (int i = 0; i < 200 && finite; ++i) {
    auto idx = batch_indices(tc.seed, s.step, tc.batch_size, ds.train_idx);
    auto r = train_step(s, make_batch<float>(ds, idx, s.stats));
    finite = finite && std::isfinite(r.loss_nats) && std::isfinite(r.grad_norm);
  }
  std::ostringstream d;
  d << s.model.stochastic_depth() << " stochastic layers, width " << mc.width << ", "
    << s.model.parameter_count() << " params, 200 steps: "
    << (finite ? "all losses and grad norms finite" : "non-finite value encountered")
    << ", " << s.skip_count << " skips";
  report(6, "deep-stack stability with scaled residual init", finite, d.str());
}

// --- 7: gradient skipping ----------------------------------------------------

void criterion_7() {
  ModelConfig mc;
  mc.width = 16;
  mc.zdim = 2;
  mc.image_size = 8;
  mc.image_channels = 1;
  mc.dmol_mixtures = 2;
  mc.enc_spec = parse_block_spec("8x1,1x1");
  mc.dec_spec = parse_block_spec("1x1,8x1");
  mc.validate();
  TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 5e-4;
  tc.seed = 0;
  SyntheticConfig sc;
  sc.n = 256;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 11;
  auto ds = generate_synthetic(sc);

  // Injected skip: drop the threshold so the next step must be rejected, then
  // verify that no byte of params, moments, or EMA moved.
  TrainState<float> s(mc, tc, compute_normalization(ds));
  auto params_before = s.model.params().tensors;
  std::vector<std::vector<float>> vals_before;
  for (const auto& t : params_before) vals_before.push_back(t.val());
  auto m_before = s.adam_m, v_before = s.adam_v, e_before = s.ema;
  s.train_cfg.skip_threshold = 1e-12;
  auto idx = batch_indices(tc.seed, s.step, tc.batch_size, ds.train_idx);
  auto r = train_step(s, make_batch<float>(ds, idx, s.stats));
  bool untouched = !r.applied && s.skip_count == 1;
  const auto& tensors = s.model.params().tensors;
  for (std::size_t i = 0; i < tensors.size(); ++i)
    untouched = untouched && tensors[i].val() == vals_before[i];
  untouched = untouched && s.adam_m == m_before && s.adam_v == v_before &&
              s.ema == e_before;

  // Clean run: 5000 steps with the default threshold must skip < 0.01%.
  TrainState<float> s2(mc, tc, compute_normalization(ds));
  train_loop(s2, ds, nullptr, 5000);
  const double frac = double(s2.skip_count) / 5000.0;
  std::ostringstream d;
  d << "injected batch: " << (untouched ? "skipped, state bit-identical" : "state changed")
    << "; clean 5000-step run: " << s2.skip_count << " skips ("
    << frac * 100.0 << "%, limit 0.01%)";
  report(7, "skipped updates leave state untouched and stay rare",
         untouched && frac < 1e-4, d.str());
}

// --- 8: overfit a 100-image subset ------------------------------------------

void criterion_8() {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.width = 32;
  mc.zdim = 4;
  mc.image_size = 8;
  mc.image_channels = 1;
  mc.dmol_mixtures = 2;
  mc.enc_spec = parse_block_spec("8x2,4x2,1x2");
  mc.dec_spec = parse_block_spec("1x2,4x2,8x2");
  mc.validate();
  TrainConfig tc;
  tc.batch_size = 32;
  tc.learning_rate = 1e-3;
  tc.seed = 0;
  tc.skip_threshold = 3000.0;
  SyntheticConfig sc;
  sc.n = 100;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 3;
  sc.palette_k = 2;
  sc.texture_scale = 0;
  auto ds = generate_synthetic(sc);
  TrainState<float> s(mc, tc, compute_normalization(ds));
  std::vector<double> losses;
  for (int i = 0; i < 2000; ++i) {
    auto idx = batch_indices(tc.seed, s.step, tc.batch_size, ds.train_idx);
    losses.push_back(train_step(s, make_batch<float>(ds, idx, s.stats)).loss_bpd);
  }
  // Window-100 moving average probed every 500 steps; strict decrease between
  // probes, and the final window under half the first window.
  auto window_mean = [&](int end) {
    double m = 0;
    for (int i = end - 99; i <= end; ++i) m += losses[i];
    return m / 100.0;
  };
  const std::vector<int> probes{99, 599, 1099, 1599, 1999};
  bool monotone = true;
  std::ostringstream trace;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (i > 0 && window_mean(probes[i]) >= window_mean(probes[i - 1])) monotone = false;
    trace << (i ? " > " : "") << window_mean(probes[i]);
  }
  const double first = window_mean(99), last = window_mean(1999);
  const double secs = elapsed_s(t0);
  std::ostringstream d;
  d << s.model.parameter_count() << " params (limit 1e6); smoothed loss " << trace.str()
    << " bpd; final/step-100 = " << last / first << " (limit 0.5); " << secs
    << " s (budget 1200 s); " << s.skip_count << " skips";
  report(8, "100-image overfit descends and halves",
         s.model.parameter_count() <= 1000000 && monotone && last < 0.5 * first &&
             secs < 1200.0,
         d.str());
}

// --- 9 and 10: stochastic-depth trend and first-layer usage ------------------

void criteria_9_10() {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.width = 16;
  mc.zdim = 4;
  mc.image_size = 8;
  mc.image_channels = 1;
  // A single mixture per pixel makes the unconditional likelihood unimodal, so
  // the 8-colour palette data must route information through the latents; this
  // keeps every seed out of posterior collapse and the comparison meaningful.
  mc.dmol_mixtures = 1;
  mc.enc_spec = parse_block_spec("8x2,1x1");
  mc.dec_spec = parse_block_spec("8x8");  // fixed 8-block decoder
  mc.validate();
  TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.seed = 0;
  tc.total_steps = 6000;  // the depth advantage only emerges late in training
  tc.skip_threshold = 3000.0;
  SyntheticConfig sc;
  sc.n = 320;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 7;
  sc.palette_k = 8;       // strongly multimodal backgrounds
  sc.texture_scale = 0;   // keep rate in the latents, not the noise floor
  auto ds = generate_synthetic(sc);
  split_validation(ds, 64, 1);

  auto res = depth_ablation<float>(mc, tc, ds, {1, 8}, {0, 1, 2});
  double mean_k1 = 0, mean_k8 = 0;
  std::size_t params_k1 = 0, params_k8 = 0;
  for (const auto& row : res.rows) {
    if (row.config == "K=1") mean_k1 += row.val_loss_bpd / 3.0, params_k1 = row.params;
    if (row.config == "K=8") mean_k8 += row.val_loss_bpd / 3.0, params_k8 = row.params;
  }
  const double secs = elapsed_s(t0);
  std::ostringstream d;
  d << "mean val loss over 3 seeds: depth 8 (K=1) = " << mean_k1
    << " bpd vs depth 1 (K=8) = " << mean_k8 << " bpd; param counts " << params_k1
    << " / " << params_k8 << "; " << secs << " s (budget 10800 s)";
  report(9, "effective depth 8 beats effective depth 1",
         mean_k1 < mean_k8 && params_k1 == params_k8 && secs < 10800.0, d.str());

  // Criterion 10 re-trains the K=1 seed-0 cell and inspects its bottom layer.
  mc.group_k = 1;
  TrainState<float> s(mc, tc, compute_normalization(ds));
  train_loop(s, ds, nullptr, tc.total_steps);
  auto prof = kl_per_layer(s, ds, ds.val_idx, 8);
  std::ostringstream d10;
  d10 << "trained K=1 model first-layer KL = " << prof.kl_bpd.front()
      << " bits/dim (must exceed 1e-4)";
  report(10, "first stochastic layer stays active", prof.kl_bpd.front() > 1e-4,
         d10.str());
}

// --- 11: determinism and persistence ----------------------------------------

void criterion_11() {
  ModelConfig mc;
  mc.width = 16;
  mc.zdim = 2;
  mc.image_size = 8;
  mc.image_channels = 1;
  mc.dmol_mixtures = 2;
  mc.enc_spec = parse_block_spec("8x1,1x1");
  mc.dec_spec = parse_block_spec("1x1,8x1");
  mc.validate();
  TrainConfig tc;
  tc.batch_size = 4;
  tc.learning_rate = 1e-3;
  tc.seed = 13;
  SyntheticConfig sc;
  sc.n = 64;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 2;
  auto ds = generate_synthetic(sc);

  auto run = [&](std::uint64_t steps) {
    TrainState<float> s(mc, tc, compute_normalization(ds));
    std::ostringstream csv;
    train_loop(s, ds, &csv, steps);
    return csv.str();
  };
  const std::string a = run(60), b = run(60);
  const bool identical = a == b;

  // Interrupted run: 30 steps, checkpoint round-trip through disk, 30 more.
  TrainState<float> s(mc, tc, compute_normalization(ds));
  std::ostringstream head;
  train_loop(s, ds, &head, 30);
  const std::string path = "acceptance_resume.vdvc";
  save_checkpoint(path, to_checkpoint(s));
  auto resumed = from_checkpoint<float>(load_checkpoint(path));
  std::remove(path.c_str());
  std::ostringstream tail;
  train_loop(resumed, ds, &tail, 60);
  const std::string stitched = head.str() + tail.str();
  const bool resume_exact = stitched == a;
  std::ostringstream d;
  d << "two 60-step runs " << (identical ? "bit-identical" : "differ")
    << "; checkpoint at step 30 + resume "
    << (resume_exact ? "reproduces the uninterrupted CSV byte-for-byte"
                     : "diverges from the uninterrupted CSV");
  report(11, "bit-exact reruns and resume", identical && resume_exact, d.str());
}

// --- 12: two-phase KL wiring -------------------------------------------------

void criterion_12() {
  ModelConfig mc;
  mc.width = 16;
  mc.zdim = 2;
  mc.image_size = 8;
  mc.image_channels = 1;
  mc.dmol_mixtures = 1;
  mc.prior_mode = PriorMode::separate;  // disjoint posterior/prior parameters
  mc.enc_spec = parse_block_spec("8x1,1x1");
  mc.dec_spec = parse_block_spec("1x1,8x2");
  mc.validate();

  SyntheticConfig sc;
  sc.n = 16;
  sc.size = 8;
  sc.channels = 1;
  sc.seed = 4;
  auto ds = generate_synthetic(sc);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 21;
  TrainState<double> s(mc, tc, compute_normalization(ds));
  auto idx = batch_indices(tc.seed, 0, tc.batch_size, ds.train_idx);
  auto batch = make_batch<double>(ds, idx, s.stats);

  DecodeOptions<double> opt;
  opt.posterior_up_to_resolution = mc.image_size;
  opt.zero_eps = true;  // deterministic forward for finite differences

  auto phase_value = [&](KlPhase phase) {
    auto acts = s.model.encode(batch.input);
    auto st = s.model.decode(&acts, tc.batch_size, opt);
    return double(kl_phase_sum(st, phase).item());
  };

  // At a fresh init the separate prior is exactly N(0,I), so the phase-A value
  // (anchor only; the fitting term cancels its own value) equals the true KL.
  const double va = phase_value(KlPhase::standard_prior_phase);
  const double vb = phase_value(KlPhase::true_kl_phase);
  const double value_gap = std::abs(va - vb);

  // Nudge the prior off N(0,I) so the fitting term has nonzero gradients, then
  // compare autodiff against central differences of the phase-A *value*.
  Rng pert(77);
  auto& store = s.model.params();
  for (std::size_t i = 0; i < store.names.size(); ++i)
    if (store.names[i].find(".prior.c4.") != std::string::npos)
      for (auto& v : store.tensors[i].val()) v += 0.1 * pert.normal();

  auto backward_phase_a = [&]() {
    for (auto& t : store.tensors)
      if (t.has_grad()) std::fill(t.grad().begin(), t.grad().end(), 0.0);
    auto acts = s.model.encode(batch.input);
    auto st = s.model.decode(&acts, tc.batch_size, opt);
    kl_phase_sum(st, KlPhase::standard_prior_phase).backward();
  };
  backward_phase_a();

  auto fd_value = [&](std::size_t ti, std::size_t j) {
    const double h = 1e-6;
    auto& v = store.tensors[ti].val();
    const double orig = v[j];
    v[j] = orig + h;
    const double up = phase_value(KlPhase::standard_prior_phase);
    v[j] = orig - h;
    const double dn = phase_value(KlPhase::standard_prior_phase);
    v[j] = orig;
    return (up - dn) / (2 * h);
  };

  double worst_post_err = 0;   // autodiff vs FD on posterior parameters
  double worst_prior_fd = 0;   // FD of the value w.r.t. prior parameters
  double max_prior_grad = 0;   // autodiff gradient magnitude on prior parameters
  int post_probes = 0;
  for (std::size_t i = 0; i < store.names.size(); ++i) {
    const auto& name = store.names[i];
    const bool is_post = name.find(".post.c4.w") != std::string::npos;
    const bool is_prior = name.find(".prior.c4.w") != std::string::npos;
    if (!is_post && !is_prior) continue;
    auto& t = store.tensors[i];
    for (std::size_t j = 0; j < t.val().size(); j += t.val().size() / 5 + 1) {
      const double g = t.has_grad() ? t.grad()[j] : 0.0;
      if (is_post) {
        const double fd = fd_value(i, j);
        worst_post_err = std::max(
            worst_post_err, std::abs(g - fd) / std::max({1.0, std::abs(g), std::abs(fd)}));
        ++post_probes;
      } else {
        worst_prior_fd = std::max(worst_prior_fd, std::abs(fd_value(i, j)));
        max_prior_grad = std::max(max_prior_grad, std::abs(g));
      }
    }
  }
  std::ostringstream d;
  d << "|phase A - phase B| = " << value_gap << " at N(0,I) prior (tol 1e-7); "
    << post_probes << " posterior probes, autodiff vs FD rel err " << worst_post_err
    << " (tol 1e-6); prior params: value FD " << worst_prior_fd
    << " (tol 1e-8) while autodiff grad reaches " << max_prior_grad
    << " (must exceed 1e-12)";
  report(12, "two-phase KL values agree and gradients split",
         value_gap < 1e-7 && worst_post_err < 1e-6 && worst_prior_fd < 1e-8 &&
             max_prior_grad > 1e-12,
         d.str());
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criteria_9_10();
  criterion_11();
  criterion_12();
  std::cout << (g_failures == 0 ? "ALL CRITERIA PASSED"
                                : std::to_string(g_failures) + " CRITERIA FAILED")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
