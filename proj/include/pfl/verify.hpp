#pragma once

// Self-check suite run by `pfl verify`: schedule identities, forward-process
// moments, reverse-step algebra, metric sweeps and gradient checks, each
// against a brute-force recomputation.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pfl/asv.hpp"
#include "pfl/attack.hpp"
#include "pfl/diffusion.hpp"
#include "pfl/gradcheck.hpp"
#include "pfl/metrics.hpp"
#include "pfl/purifier.hpp"

namespace pfl {

struct VerifyResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline VerifyResult verify_schedule(const ScheduleConfig& sc) {
  auto s = sc.build();
  double worst = std::abs(s.beta_tilde_at(1) - s.beta_at(1));
  for (std::size_t t = 1; t <= s.T; ++t) {
    const double beta = sc.beta_lo + (sc.beta_hi - sc.beta_lo) * static_cast<double>(t - 1) / static_cast<double>(s.T - 1);
    double ab = 1.0;
    for (std::size_t k = 1; k <= t; ++k)
      ab *= 1.0 - (sc.beta_lo + (sc.beta_hi - sc.beta_lo) * static_cast<double>(k - 1) / static_cast<double>(s.T - 1));
    const double ab_prev = ab / (1.0 - beta);
    const double bt = t == 1 ? beta : (1.0 - ab_prev) / (1.0 - ab) * beta;
    worst = std::max({worst, std::abs(s.beta_at(t) - beta), std::abs(s.alpha_at(t) - (1 - beta)),
                      std::abs(s.alpha_bar_at(t) - ab), std::abs(s.beta_tilde_at(t) - bt)});
    if (t > 1) worst = std::max(worst, std::abs(s.alpha_bar_at(t) - s.alpha_bar_at(t - 1) * s.alpha_at(t)));
  }
  return {"schedule identities", worst <= 1e-12, "max deviation " + sci(worst)};
}

inline VerifyResult verify_forward(const ScheduleConfig& sc, std::uint64_t seed) {
  auto s = sc.build();
  const std::size_t draws = 10000;
  const double x0 = 0.5;
  Rng rng(derive_seed(seed, {fnv1a("verify-forward")}));
  std::normal_distribution<double> n(0.0, 1.0);
  bool ok = true;
  std::string worst;
  for (std::size_t t : {1u, 5u, 10u, 50u, 100u}) {
    if (t > s.T) continue;
    double m = 0, m2 = 0;
    for (std::size_t d = 0; d < draws; ++d) {
      std::vector<double> x{x0};
      for (std::size_t k = 1; k <= t; ++k) x = single_forward_step(x, k, {n(rng)}, s);
      m += x[0];
      m2 += x[0] * x[0];
    }
    m /= draws;
    const double var = m2 / draws - m * m;
    const double want_m = std::sqrt(s.alpha_bar_at(t)) * x0, want_v = 1 - s.alpha_bar_at(t);
    const double z_m = std::abs(m - want_m) / std::sqrt(want_v / draws);
    const double z_v = std::abs(var - want_v) / (want_v * std::sqrt(2.0 / draws));
    if (z_m > 3 || z_v > 3) ok = false;
    worst += "t=" + std::to_string(t) + " z=(" + sci(z_m) + "," + sci(z_v) + ") ";
  }
  return {"forward chain matches closed form", ok, worst};
}

inline VerifyResult verify_reverse(const ScheduleConfig& sc, std::uint64_t seed) {
  auto s = sc.build();
  Rng rng(derive_seed(seed, {fnv1a("verify-reverse")}));
  auto x0 = gaussian_vector<double>(rng, 64, 0.3);
  auto eps = gaussian_vector<double>(rng, 64, 1.0);
  auto x1 = q_sample(x0, 1, eps, s);
  EpsPredictor oracle = [&](const std::vector<double>&, double) { return eps; };
  auto back = reverse_step(x1, 1, oracle, s, gaussian_vector<double>(rng, 64, 1.0));
  double err = 0;
  for (std::size_t i = 0; i < x0.size(); ++i) err = std::max(err, std::abs(back[i] - x0[i]));
  double loss = 0.0;
  for (std::size_t t : {std::size_t{1}, s.T / 2, s.T}) loss = std::max(loss, diffusion_loss_value(oracle, s, x0, t, eps));
  return {"reverse step and oracle loss", err <= 1e-6 && loss == 0.0,
          "recovery error " + sci(err) + ", oracle loss " + sci(loss)};
}

inline VerifyResult verify_metrics(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {fnv1a("verify-metrics")}));
  double worst = 0;
  for (int rep = 0; rep < 100; ++rep) {
    std::uniform_int_distribution<int> nd(2, 40), grid(0, 12);
    const int n = nd(rng);
    std::vector<LabeledScore> sc;
    for (int i = 0; i < n; ++i) sc.push_back({grid(rng) * 0.25 + (i % 2 ? 0.5 : 0.0), i % 2 == 1});
    std::vector<double> cands;
    for (auto& x : sc) cands.push_back(x.score);
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
    std::vector<double> th{cands.front() - 1};
    for (std::size_t i = 0; i + 1 < cands.size(); ++i) th.push_back(0.5 * (cands[i] + cands[i + 1]));
    th.push_back(cands.back() + 1);
    double nt = 0, nn = 0;
    for (auto& x : sc) (x.target ? nt : nn) += 1;
    std::vector<std::pair<double, double>> pts;
    double best = 1e300;
    DcfParams p;
    for (double t : th) {
      double fa = 0, fr = 0;
      for (auto& x : sc) {
        if (x.target && x.score < t) fr += 1;
        if (!x.target && x.score >= t) fa += 1;
      }
      pts.emplace_back(fa / nn, fr / nt);
      best = std::min(best, p.c_miss * p.p_target * fr / nt + p.c_fa * (1 - p.p_target) * fa / nn);
    }
    best /= std::min(p.c_miss * p.p_target, p.c_fa * (1 - p.p_target));
    double e = pts.back().first;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = pts[i].first - pts[i].second;
      if (d == 0) { e = pts[i].first; break; }
      if (d < 0) {
        const double da = pts[i - 1].first - pts[i - 1].second;
        e = pts[i - 1].first + da / (da - d) * (pts[i].first - pts[i - 1].first);
        break;
      }
    }
    worst = std::max({worst, std::abs(eer(sc) - 100 * e), std::abs(min_dcf(sc) - best)});
  }
  return {"eer and min_dcf against threshold sweep", worst <= 1e-9, "max deviation " + sci(worst)};
}

inline VerifyResult verify_gradients(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {fnv1a("verify-grad")}));
  auto rand_t = [&](Shape sh) {
    std::size_t n = 1;
    for (auto d : sh) n *= d;
    return Tensor<double>(sh, gaussian_vector<double>(rng, n, 0.5), true);
  };
  double worst = 0;
  auto x = rand_t({3, 12});
  auto k = rand_t({2, 3, 3});
  auto w = rand_t({12, 4});
  using F = std::function<Tensor<double>()>;
  std::vector<std::pair<F, std::vector<Tensor<double>>>> cases = {
      {[&] { return sum(tanh(x) * sigmoid(x)); }, {x}},
      {[&] { return sum(square(conv1d(x, k, 2))); }, {x, k}},
      {[&] { return logsumexp(reshape(matmul(x, w), {12}), 0); }, {x, w}},
      {[&] { return sum(swish(upsample_linear(x, 30, 1.5, 2.0))); }, {x}},
  };
  for (auto& [f, ps] : cases) worst = std::max(worst, grad_check_params(f, ps).max_rel_error);

  FeatureConfig fc;
  fc.n_mels = 8;
  fc.fft_size = 512;
  EncoderConfig ec{8, 8, 3, 3, 2};
  auto model = EncoderModel<double>::init(ec, fc, seed);
  Rng wr(seed);
  auto wave = gaussian_vector<double>(wr, 2400, 0.2);
  Embedding enroll(8, 0.0);
  enroll[0] = 1.0;
  auto xs = Tensor<double>::vector(wave);
  auto r = grad_check_params([&] { return attack_loss(xs, enroll, true, model); }, {xs}, 1e-6, 40);
  return {"operator and attack-loss gradients", worst < 1e-4 && r.max_rel_error < 1e-3,
          "ops " + sci(worst) + ", attack loss " + sci(r.max_rel_error)};
}

}  // namespace detail

inline std::vector<VerifyResult> run_verify(const ScheduleConfig& sc, std::uint64_t seed) {
  return {detail::verify_schedule(sc), detail::verify_forward(sc, seed), detail::verify_reverse(sc, seed),
          detail::verify_metrics(seed), detail::verify_gradients(seed)};
}

}  // namespace pfl
