#pragma once

// DDPM noise schedules and the forward/reverse transition kernels. Signals are
// plain double vectors; the noise predictor is passed in as a callable so the
// algebra can be exercised with oracle predictors.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace pfl {

/// Index 0 of every array is step t = 1.
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta, alpha, alpha_bar, beta_tilde;

  double beta_at(std::size_t t) const { return beta.at(check(t) - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(check(t) - 1); }
  /// alpha_bar_0 = 1.
  double alpha_bar_at(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar.at(check(t) - 1); }
  double beta_tilde_at(std::size_t t) const { return beta_tilde.at(check(t) - 1); }

  std::size_t check(std::size_t t) const {
    if (t < 1 || t > T) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
    return t;
  }
};

inline NoiseSchedule schedule_from_betas(std::vector<double> beta) {
  NoiseSchedule s;
  s.T = beta.size();
  s.beta = std::move(beta);
  double prod = 1.0;
  for (std::size_t i = 0; i < s.T; ++i) {
    if (!(s.beta[i] > 0 && s.beta[i] < 1)) throw std::invalid_argument("schedule: every beta must lie in (0, 1)");
    s.alpha.push_back(1.0 - s.beta[i]);
    prod *= s.alpha.back();
    s.alpha_bar.push_back(prod);
  }
  for (std::size_t i = 0; i < s.T; ++i) {
    if (i == 0) s.beta_tilde.push_back(s.beta[0]);
    else s.beta_tilde.push_back((1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]) * s.beta[i]);
  }
  return s;
}

/// beta_t = lo + (t-1)(hi-lo)/(T-1).
inline NoiseSchedule make_linear_schedule(std::size_t T = 100, double beta_lo = 1e-4, double beta_hi = 0.035) {
  if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
  if (!(beta_lo > 0 && beta_lo < beta_hi && beta_hi < 1)) throw std::invalid_argument("schedule: need 0 < beta_lo < beta_hi < 1");
  std::vector<double> beta(T);
  for (std::size_t t = 1; t <= T; ++t)
    beta[t - 1] = beta_lo + static_cast<double>(t - 1) * (beta_hi - beta_lo) / static_cast<double>(T - 1);
  return schedule_from_betas(std::move(beta));
}

namespace detail {

inline void same_length(const std::vector<double>& a, const std::vector<double>& b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": noise length differs from signal length");
}

}  // namespace detail

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
inline std::vector<double> q_sample(const std::vector<double>& x0, std::size_t t, const std::vector<double>& noise,
                                    const NoiseSchedule& s) {
  detail::same_length(x0, noise, "q_sample");
  const double ab = s.alpha_bar_at(s.check(t));
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

/// x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise.
inline std::vector<double> single_forward_step(const std::vector<double>& prev, std::size_t t,
                                               const std::vector<double>& noise, const NoiseSchedule& s) {
  detail::same_length(prev, noise, "single_forward_step");
  const double b = s.beta_at(t);
  const double a = std::sqrt(1.0 - b), c = std::sqrt(b);
  std::vector<double> out(prev.size());
  for (std::size_t i = 0; i < prev.size(); ++i) out[i] = a * prev[i] + c * noise[i];
  return out;
}

/// Noise predictor eps(x_t, t).
using EpsPredictor = std::function<std::vector<double>(const std::vector<double>& x, double t)>;

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t);
/// adds sqrt(beta_tilde_t) * noise for t > 1 and returns mu at t = 1.
inline std::vector<double> reverse_step(const std::vector<double>& x, std::size_t t, const EpsPredictor& eps,
                                        const NoiseSchedule& s, const std::vector<double>& noise) {
  s.check(t);
  auto e = eps(x, static_cast<double>(t));
  detail::same_length(x, e, "reverse_step (predictor output)");
  if (t > 1) detail::same_length(x, noise, "reverse_step");
  const double coef = s.beta_at(t) / std::sqrt(1.0 - s.alpha_bar_at(t));
  const double inv = 1.0 / std::sqrt(s.alpha_at(t));
  const double sigma = std::sqrt(s.beta_tilde_at(t));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = inv * (x[i] - coef * e[i]);
    if (t > 1) out[i] += sigma * noise[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fast sampling.

struct FastSchedule {
  std::vector<double> gamma{1e-4, 1e-3, 0.01, 0.05, 0.2, 0.35};

  void validate() const {
    if (gamma.empty()) throw std::invalid_argument("fast schedule: no steps");
    for (std::size_t i = 0; i < gamma.size(); ++i) {
      if (!(gamma[i] > 0 && gamma[i] < 1)) throw std::invalid_argument("fast schedule: every gamma must lie in (0, 1)");
      if (i && !(gamma[i] > gamma[i - 1])) throw std::invalid_argument("fast schedule: gamma must be strictly increasing");
    }
  }

  /// Cumulative products of (1 - gamma).
  std::vector<double> alpha_bar() const {
    std::vector<double> out;
    double p = 1.0;
    for (double g : gamma) out.push_back(p *= 1.0 - g);
    return out;
  }

  /// For each fast step, the largest training step t whose alpha_bar_t is at
  /// least the fast step's cumulative alpha_bar (at least 1).
  std::vector<std::size_t> aligned_steps(const NoiseSchedule& s) const {
    validate();
    std::vector<std::size_t> out;
    for (double ab : alpha_bar()) {
      std::size_t t = 1;
      while (t < s.T && s.alpha_bar_at(t + 1) >= ab) ++t;
      out.push_back(t);
    }
    return out;
  }
};

}  // namespace pfl
