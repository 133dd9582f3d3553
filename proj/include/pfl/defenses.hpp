#pragma once

// Input-transformation defenses placed in front of the verifier: smoothing
// filters, additive Gaussian noise, and diffusion purification, behind one
// Defense interface.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfl/audio.hpp"
#include "pfl/purifier.hpp"
#include "pfl/rng.hpp"

namespace pfl {

namespace detail {

inline void check_kernel(std::size_t k, std::size_t len) {
  if (k == 0 || k % 2 == 0) throw std::invalid_argument("filter kernel size must be odd and >= 1, got " + std::to_string(k));
  if (k > len && len > 0) throw std::invalid_argument("filter kernel longer than the signal");
}

/// Sample i + offset with edge replication.
inline double replicated(const std::vector<double>& x, std::ptrdiff_t i) {
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  return x[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, n - 1))];
}

inline Waveform like(const Waveform& w, std::vector<double> samples) {
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = std::move(samples);
  return out;
}

}  // namespace detail

inline Waveform median_filter(const Waveform& w, std::size_t k) {
  detail::check_kernel(k, w.size());
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<double> out(w.size()), win(k);
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::ptrdiff_t j = -half; j <= half; ++j)
      win[static_cast<std::size_t>(j + half)] = detail::replicated(w.samples, static_cast<std::ptrdiff_t>(i) + j);
    std::nth_element(win.begin(), win.begin() + half, win.end());
    out[i] = win[static_cast<std::size_t>(half)];
  }
  return detail::like(w, std::move(out));
}

/// Correlation with a centered odd-length kernel, edge replication.
inline Waveform filter_with_kernel(const Waveform& w, const std::vector<double>& kernel) {
  detail::check_kernel(kernel.size(), w.size());
  const auto half = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> out(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) {
    double acc = 0;
    for (std::ptrdiff_t j = -half; j <= half; ++j)
      acc += kernel[static_cast<std::size_t>(j + half)] * detail::replicated(w.samples, static_cast<std::ptrdiff_t>(i) + j);
    out[i] = acc;
  }
  return detail::like(w, std::move(out));
}

inline Waveform mean_filter(const Waveform& w, std::size_t k) {
  detail::check_kernel(k, w.size());
  return filter_with_kernel(w, std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

/// Discretized Gaussian, truncated at 2*ceil(3 sigma)+1 taps and normalized to sum 1.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian filter sigma must be > 0");
  const auto half = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k;
  double total = 0;
  for (std::ptrdiff_t j = -half; j <= half; ++j) {
    k.push_back(std::exp(-0.5 * static_cast<double>(j * j) / (sigma * sigma)));
    total += k.back();
  }
  for (auto& v : k) v /= total;
  return k;
}

inline Waveform gaussian_filter(const Waveform& w, double sigma) { return filter_with_kernel(w, gaussian_kernel(sigma)); }

/// w + sigma * N(0, I), clipped to [-1, 1].
inline Waveform add_noise_defense(const Waveform& w, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0)) throw std::invalid_argument("noise sigma must be >= 0");
  if (sigma == 0) return w;
  Rng rng(derive_seed(seed, {fnv1a("noise-defense")}));
  std::normal_distribution<double> n(0.0, sigma);
  auto out = w;
  for (auto& v : out.samples) v = std::clamp(v + n(rng), -1.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

enum class DefenseKind { identity, median, mean, gaussian_filter, add_noise, dap };

inline const char* defense_kind_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::identity: return "identity";
    case DefenseKind::median: return "median";
    case DefenseKind::mean: return "mean";
    case DefenseKind::gaussian_filter: return "gaussian_filter";
    case DefenseKind::add_noise: return "add_noise";
    case DefenseKind::dap: return "dap";
  }
  return "?";
}

inline DefenseKind parse_defense_kind(const std::string& s) {
  for (auto k : {DefenseKind::identity, DefenseKind::median, DefenseKind::mean, DefenseKind::gaussian_filter,
                 DefenseKind::add_noise, DefenseKind::dap})
    if (s == defense_kind_name(k)) return k;
  throw std::invalid_argument("unknown defense '" + s + "'");
}

struct DefenseSpec {
  DefenseKind kind = DefenseKind::identity;
  std::size_t kernel = 3;
  double kernel_sigma = 1.0;
  double noise_sigma = 0.0;
  PurifierConfig purifier;

  void validate() const {
    if ((kind == DefenseKind::median || kind == DefenseKind::mean) && (kernel == 0 || kernel % 2 == 0))
      throw std::invalid_argument("defense kernel size must be odd and >= 1");
    if (kind == DefenseKind::gaussian_filter && !(kernel_sigma > 0))
      throw std::invalid_argument("gaussian filter sigma must be > 0");
    if (kind == DefenseKind::add_noise && !(noise_sigma >= 0)) throw std::invalid_argument("noise sigma must be >= 0");
  }

  /// Short identifier including every parameter, used for file names and report rows.
  std::string id() const {
    char buf[96];
    switch (kind) {
      case DefenseKind::identity: return "none";
      case DefenseKind::median: std::snprintf(buf, sizeof buf, "median_k%zu", kernel); break;
      case DefenseKind::mean: std::snprintf(buf, sizeof buf, "mean_k%zu", kernel); break;
      case DefenseKind::gaussian_filter: std::snprintf(buf, sizeof buf, "gauss_s%g", kernel_sigma); break;
      case DefenseKind::add_noise: std::snprintf(buf, sizeof buf, "noise_s%g", noise_sigma); break;
      case DefenseKind::dap:
        std::snprintf(buf, sizeof buf, "dap_t%zu_%s", purifier.t_star,
                      purifier.sampler == Sampler::full_reverse ? "full" : "fast");
        break;
    }
    return buf;
  }
};

/// Applies a defense; `item_seed` decorrelates stochastic defenses across utterances.
template <typename T>
Waveform apply_defense(const Waveform& w, const DefenseSpec& d, std::uint64_t item_seed,
                       const Purifier<T>* purifier = nullptr) {
  d.validate();
  switch (d.kind) {
    case DefenseKind::identity: return w;
    case DefenseKind::median: return median_filter(w, d.kernel);
    case DefenseKind::mean: return mean_filter(w, d.kernel);
    case DefenseKind::gaussian_filter: return gaussian_filter(w, d.kernel_sigma);
    case DefenseKind::add_noise: return add_noise_defense(w, d.noise_sigma, item_seed);
    case DefenseKind::dap:
      if (!purifier) throw ModelNotTrained("dap defense requires a trained purifier checkpoint");
      return purify(w, *purifier, d.purifier, item_seed);
  }
  return w;
}

inline Waveform apply_defense(const Waveform& w, const DefenseSpec& d, std::uint64_t item_seed) {
  return apply_defense<float>(w, d, item_seed, nullptr);
}

}  // namespace pfl
