#pragma once

// Log mel filterbank features and CMVN. The tensor forms are differentiable
// with respect to raw samples; the FeatureMatrix forms are plain evaluations
// of the same graph.

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "pfl/audio.hpp"
#include "pfl/fft.hpp"
#include "pfl/tensor.hpp"

namespace pfl {

struct FeatureConfig {
  std::size_t n_mels = 80;
  double window_ms = 25.0;
  double hop_ms = 10.0;
  std::size_t fft_size = 512;
  double low_hz = 20.0;
  double high_hz = 0.0;  // 0 selects Nyquist
  std::uint32_t sample_rate = 16000;

  static constexpr double kLogFloor = 1e-10;
  static constexpr double kVarianceFloor = 1e-8;

  std::size_t window_samples() const { return static_cast<std::size_t>(std::llround(window_ms * 1e-3 * sample_rate)); }
  std::size_t hop_samples() const { return static_cast<std::size_t>(std::llround(hop_ms * 1e-3 * sample_rate)); }
  double upper_hz() const { return high_hz > 0 ? high_hz : sample_rate / 2.0; }

  void validate() const {
    if (!(window_ms > hop_ms && hop_ms > 0)) throw std::invalid_argument("FeatureConfig: need window_ms > hop_ms > 0");
    if (n_mels < 1) throw std::invalid_argument("FeatureConfig: n_mels must be >= 1");
    if (sample_rate == 0) throw std::invalid_argument("FeatureConfig: sample rate 0");
    if (fft_size < window_samples()) throw std::invalid_argument("FeatureConfig: fft_size shorter than the window");
    if (!(low_hz >= 0 && low_hz < upper_hz())) throw std::invalid_argument("FeatureConfig: bad mel range");
  }

  /// floor((len - win)/hop) + 1, or 0 when the signal is shorter than a window.
  std::size_t frame_count(std::size_t len) const {
    std::size_t win = window_samples();
    return len < win ? 0 : (len - win) / hop_samples() + 1;
  }
};

/// frames x n_mels, row-major.
struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t n_mels = 0;
  std::vector<double> values;
  double frame_rate = 0.0;

  double at(std::size_t f, std::size_t m) const { return values[f * n_mels + m]; }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Center frequencies of the triangular filters.
inline std::vector<double> mel_centers(const FeatureConfig& cfg) {
  const double lo = hz_to_mel(cfg.low_hz), hi = hz_to_mel(cfg.upper_hz());
  std::vector<double> out(cfg.n_mels);
  for (std::size_t m = 0; m < cfg.n_mels; ++m)
    out[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) / static_cast<double>(cfg.n_mels + 1));
  return out;
}

/// Triangular filterbank as a [bins x n_mels] matrix (so features = power * fbank).
template <typename T>
Tensor<T> mel_filterbank(const FeatureConfig& cfg) {
  const std::size_t bins = cfg.fft_size / 2 + 1;
  const double lo = hz_to_mel(cfg.low_hz), hi = hz_to_mel(cfg.upper_hz());
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  std::vector<T> w(bins * cfg.n_mels, T(0));
  for (std::size_t k = 0; k < bins; ++k) {
    const double f = static_cast<double>(k) * cfg.sample_rate / static_cast<double>(cfg.fft_size);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      const double l = edges[m], c = edges[m + 1], r = edges[m + 2];
      double v = 0.0;
      if (f > l && f <= c) v = (f - l) / (c - l);
      else if (f > c && f < r) v = (r - f) / (r - c);
      w[k * cfg.n_mels + m] = static_cast<T>(v);
    }
  }
  return Tensor<T>(Shape{bins, cfg.n_mels}, std::move(w));
}

template <typename T>
Tensor<T> hamming_window(std::size_t n) {
  std::vector<T> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = static_cast<T>(0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1)));
  return Tensor<T>::vector(std::move(w));
}

/// Mel power spectrogram of a 1-D signal: [frames x n_mels].
template <typename T>
Tensor<T> mel_power(const Tensor<T>& samples, const FeatureConfig& cfg) {
  cfg.validate();
  if (samples.rank() != 1) throw ShapeError("mel_power expects a 1-D signal");
  const std::size_t win = cfg.window_samples();
  if (samples.dim(0) < win) throw ShapeError("waveform shorter than one analysis window");
  auto framed = frames(samples, win, cfg.hop_samples());
  auto windowed = framed * hamming_window<T>(win);
  return matmul(power_spectrum(windowed, cfg.fft_size), mel_filterbank<T>(cfg));
}

/// log(mel power + 1e-10): [frames x n_mels].
template <typename T>
Tensor<T> logfbank(const Tensor<T>& samples, const FeatureConfig& cfg) {
  return log(add_scalar(mel_power(samples, cfg), static_cast<T>(FeatureConfig::kLogFloor)));
}

/// Per-column mean 0 / variance 1 over frames, with variance floored at 1e-8.
template <typename T>
Tensor<T> cmvn(const Tensor<T>& feats) {
  if (feats.rank() != 2) throw ShapeError("cmvn expects [frames x coefficients]");
  if (feats.dim(0) < 2) throw std::invalid_argument("cmvn: need at least 2 frames (variance undefined)");
  auto centered = feats - mean(feats, 0, true);
  auto var = mean(square(centered), 0, true);
  auto std_dev = sqrt(clamp(var, static_cast<T>(FeatureConfig::kVarianceFloor), std::numeric_limits<T>::max()));
  return centered / std_dev;
}

namespace detail {

inline FeatureMatrix to_matrix(const Tensor<double>& t, double frame_rate) {
  return {t.dim(0), t.dim(1), t.values(), frame_rate};
}

}  // namespace detail

inline FeatureMatrix logfbank(const Waveform& w, const FeatureConfig& cfg) {
  NoGradGuard guard;
  FeatureConfig c = cfg;
  c.sample_rate = w.sample_rate;
  auto t = logfbank(Tensor<double>::vector(w.samples), c);
  return detail::to_matrix(t, 1000.0 / c.hop_ms);
}

inline FeatureMatrix cmvn(const FeatureMatrix& f) {
  NoGradGuard guard;
  auto t = cmvn(Tensor<double>(Shape{f.frames, f.n_mels}, f.values));
  return detail::to_matrix(t, f.frame_rate);
}

}  // namespace pfl
