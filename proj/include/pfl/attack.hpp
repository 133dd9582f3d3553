#pragma once

// White-box attacks on the verification score: l-inf BIM and l2 PGD with
// exact budget projection, and SNR-matched noise for genuine test audio.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfl/asv.hpp"
#include "pfl/audio.hpp"

namespace pfl {

enum class AttackMethod { pgd_l2, bim_linf };

inline const char* attack_name(AttackMethod m) { return m == AttackMethod::pgd_l2 ? "pgd_l2" : "bim_linf"; }
inline AttackMethod parse_attack(const std::string& s) {
  if (s == "pgd_l2" || s == "pgd") return AttackMethod::pgd_l2;
  if (s == "bim_linf" || s == "bim") return AttackMethod::bim_linf;
  throw std::invalid_argument("unknown attack method '" + s + "'");
}

inline constexpr double kPcmScale = 32768.0;

struct AttackConfig {
  AttackMethod method = AttackMethod::pgd_l2;
  double epsilon = 30.0;  // 16-bit sample units
  double alpha = 1.0;     // 16-bit sample units
  std::size_t steps = 50;
  // Round the final perturbation toward zero onto the 16-bit grid so that the
  // example survives a PCM16 round trip without leaving the budget.
  bool quantize = true;

  void validate() const {
    if (!(epsilon > 0)) throw std::invalid_argument("AttackConfig: epsilon must be > 0");
    if (!(alpha > 0)) throw std::invalid_argument("AttackConfig: alpha must be > 0");
  }
  double epsilon_unit() const { return epsilon / kPcmScale; }
  double alpha_unit() const { return alpha / kPcmScale; }
  /// l2 radius: epsilon per sample, scaled by sqrt(N).
  double l2_radius(std::size_t n) const { return epsilon_unit() * std::sqrt(static_cast<double>(n)); }
};

struct AdversarialExample {
  Waveform original;
  Waveform perturbed;
  Waveform perturbation;
  AttackMethod norm_used = AttackMethod::pgd_l2;
  std::size_t steps = 0;
  double initial_score = 0.0;
  double final_score = 0.0;
  double achieved_score_delta() const { return final_score - initial_score; }
};

inline double linf_norm(const Waveform& w) {
  double m = 0;
  for (double x : w.samples) m = std::max(m, std::abs(x));
  return m;
}

inline double l2_norm(const Waveform& w) {
  double s = 0;
  for (double x : w.samples) s += x * x;
  return std::sqrt(s);
}

/// d * cos(F(samples), enroll) with d = +1 for target trials and -1 for
/// nontarget trials. The attacker minimizes it.
template <typename T>
Tensor<T> attack_loss(const Tensor<T>& samples, const Embedding& enroll, bool target, const EncoderModel<T>& model) {
  std::vector<T> e(enroll.begin(), enroll.end());
  const std::size_t dim = e.size();
  Tensor<T> enroll_t(Shape{1, dim}, std::move(e));
  auto s = sum(model.embed_tensor(samples) * enroll_t);
  return target ? s : -s;
}

template <typename T>
double attack_loss(const Waveform& w, const Embedding& enroll, bool target, const EncoderModel<T>& model) {
  NoGradGuard guard;
  return attack_loss(Tensor<T>::vector(std::vector<T>(w.samples.begin(), w.samples.end())), enroll, target, model).item();
}

namespace detail {

template <typename T>
std::vector<double> loss_gradient(const std::vector<double>& x, const Embedding& enroll, bool target,
                                  const EncoderModel<T>& model, double* loss_value) {
  Tensor<T> xs(Shape{x.size()}, std::vector<T>(x.begin(), x.end()), true);
  auto loss = attack_loss(xs, enroll, target, model);
  if (loss_value) *loss_value = loss.item();
  backward(loss);
  return std::vector<double>(xs.grad().begin(), xs.grad().end());
}

inline Waveform make_wave(std::vector<double> v, std::uint32_t fs) {
  Waveform w;
  w.samples = std::move(v);
  w.sample_rate = fs;
  return w;
}

}  // namespace detail

using GradientFn = std::function<std::vector<double>(const std::vector<double>& x)>;

/// The attack iteration on an arbitrary loss gradient. Returns the
/// perturbation after each requested iteration count (sorted ascending).
/// Steps are deterministic; a zero gradient skips the step.
inline std::vector<std::vector<double>> perturbation_path(const Waveform& w, const GradientFn& gradient,
                                                          const AttackConfig& cfg, std::vector<std::size_t> at_steps) {
  cfg.validate();
  if (w.size() == 0) throw std::invalid_argument("attack: zero-length audio");
  std::sort(at_steps.begin(), at_steps.end());
  const std::size_t n = w.size();
  const double eps = cfg.epsilon_unit();
  const double radius = cfg.l2_radius(n);
  const double pgd_step = cfg.alpha_unit() * std::sqrt(static_cast<double>(n));

  std::vector<double> delta(n, 0.0), x(n);
  std::vector<std::vector<double>> out;
  auto snapshot = [&]() {
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Keep the waveform in [-1, 1]; the box contains 0 so budgets still hold.
      double di = std::clamp(delta[i], -1.0 - w.samples[i], 1.0 - w.samples[i]);
      if (cfg.quantize) di = std::trunc(di * kPcmScale) / kPcmScale;
      d[i] = di;
    }
    out.push_back(std::move(d));
  };

  std::size_t next = 0;
  for (; next < at_steps.size() && at_steps[next] == 0; ++next) snapshot();
  const std::size_t total = at_steps.empty() ? 0 : at_steps.back();
  for (std::size_t k = 1; k <= total; ++k) {
    for (std::size_t i = 0; i < n; ++i) x[i] = w.samples[i] + delta[i];
    auto g = gradient(x);
    double gn = 0;
    for (double v : g) gn += v * v;
    gn = std::sqrt(gn);
    if (gn > 0 && std::isfinite(gn)) {
      if (cfg.method == AttackMethod::bim_linf) {
        for (std::size_t i = 0; i < n; ++i) {
          const double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
          double d = std::clamp(delta[i] - cfg.alpha_unit() * s, -eps, eps);
          delta[i] = std::clamp(d, -1.0 - w.samples[i], 1.0 - w.samples[i]);
        }
      } else {
        double norm = 0;
        for (std::size_t i = 0; i < n; ++i) {
          delta[i] -= pgd_step * g[i] / gn;
          norm += delta[i] * delta[i];
        }
        norm = std::sqrt(norm);
        if (norm > radius)
          for (auto& d : delta) d *= radius / norm;
      }
    }
    for (; next < at_steps.size() && at_steps[next] == k; ++next) snapshot();
  }
  return out;
}

/// Attacks one trial and returns examples after each requested iteration count.
template <typename T>
std::vector<AdversarialExample> attack_snapshots(const Waveform& w, const Embedding& enroll, bool target,
                                                 const EncoderModel<T>& model, const AttackConfig& cfg,
                                                 std::vector<std::size_t> at_steps) {
  std::sort(at_steps.begin(), at_steps.end());
  auto grad = [&](const std::vector<double>& x) { return detail::loss_gradient(x, enroll, target, model, nullptr); };
  auto path = perturbation_path(w, grad, cfg, at_steps);
  const double initial_score = score(enroll, embed(w, model));
  std::vector<AdversarialExample> out;
  for (std::size_t j = 0; j < path.size(); ++j) {
    std::vector<double> p(w.size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = w.samples[i] + path[j][i];
    AdversarialExample ex;
    ex.original = w;
    ex.perturbation = detail::make_wave(std::move(path[j]), w.sample_rate);
    ex.perturbed = detail::make_wave(std::move(p), w.sample_rate);
    ex.norm_used = cfg.method;
    ex.steps = at_steps[j];
    ex.initial_score = initial_score;
    ex.final_score = score(enroll, embed(ex.perturbed, model));
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename T>
AdversarialExample run_attack(const Waveform& w, const Embedding& enroll, bool target, const EncoderModel<T>& model,
                              const AttackConfig& cfg) {
  return attack_snapshots(w, enroll, target, model, cfg, {cfg.steps}).front();
}

template <typename T>
AdversarialExample bim_linf(const Waveform& w, const Embedding& enroll, bool target, const EncoderModel<T>& model,
                            AttackConfig cfg) {
  cfg.method = AttackMethod::bim_linf;
  return run_attack(w, enroll, target, model, cfg);
}

template <typename T>
AdversarialExample pgd_l2(const Waveform& w, const Embedding& enroll, bool target, const EncoderModel<T>& model,
                          AttackConfig cfg) {
  cfg.method = AttackMethod::pgd_l2;
  return run_attack(w, enroll, target, model, cfg);
}

/// Adds white noise with the same power as the adversarial perturbation, so
/// genuine and adversarial test audio share an SNR. Zero perturbation is the identity.
inline Waveform genuine_with_matched_noise(const Waveform& w, const AdversarialExample& adv, std::uint64_t seed) {
  if (w.size() != adv.perturbation.size()) throw std::invalid_argument("matched noise: length mismatch");
  const double p = mean_power(adv.perturbation.samples);
  if (p == 0.0) return w;
  if (mean_power(w.samples) == 0.0) throw AudioError("matched noise: silent input");
  return add_noise_at_snr(w, 10.0 * std::log10(mean_power(w.samples) / p), seed);
}

// ---------------------------------------------------------------------------
// Manifest.

struct AttackRecord {
  std::string trial_id;
  std::string method;
  double epsilon = 0, alpha = 0;
  std::size_t steps = 0;
  double final_score = 0, perturbation_linf = 0, perturbation_l2 = 0, snr_db = 0;
};

inline AttackRecord make_record(const std::string& trial_id, const AttackConfig& cfg, const AdversarialExample& ex) {
  const double p = mean_power(ex.perturbation.samples);
  const double snr = p == 0 ? std::numeric_limits<double>::infinity()
                            : 10.0 * std::log10(mean_power(ex.original.samples) / p);
  return {trial_id, attack_name(cfg.method), cfg.epsilon, cfg.alpha, ex.steps,
          ex.final_score, linf_norm(ex.perturbation), l2_norm(ex.perturbation), snr};
}

inline constexpr const char* kAttackManifestHeader =
    "trial_id,method,epsilon,alpha,steps,final_score,perturbation_linf,perturbation_l2,snr_db";

inline void write_attack_manifest(const std::string& path, const std::vector<AttackRecord>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write attack manifest " + path);
  os << kAttackManifestHeader << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%g,%g,%zu,%.9f,%.9g,%.9g,%.4f\n", r.trial_id.c_str(), r.method.c_str(),
                  r.epsilon, r.alpha, r.steps, r.final_score, r.perturbation_linf, r.perturbation_l2, r.snr_db);
    os << buf;
  }
}

inline std::vector<AttackRecord> read_attack_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read attack manifest " + path);
  std::string line;
  std::getline(is, line);
  if (line != kAttackManifestHeader) throw std::runtime_error(path + ": bad attack manifest header");
  std::vector<AttackRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    if (f.size() != 9) throw std::runtime_error(path + ": bad attack manifest row '" + line + "'");
    out.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stoul(f[4]), std::stod(f[5]), std::stod(f[6]),
                   std::stod(f[7]), std::stod(f[8])});
  }
  return out;
}

}  // namespace pfl
