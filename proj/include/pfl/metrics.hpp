#pragma once

// Verification metrics (EER, minDCF, DET points) and reconstruction quality
// metrics (SI-SDR and a simplified STOI).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "pfl/audio.hpp"
#include "pfl/fft.hpp"

namespace pfl {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LabeledScore {
  double score = 0.0;
  bool target = false;
};

struct DetCurvePoint {
  double threshold = 0.0;
  double false_accept_rate = 0.0;
  double false_reject_rate = 0.0;
};

struct DcfParams {
  double p_target = 0.01;
  double c_miss = 1.0;
  double c_fa = 1.0;
  bool normalize = true;
};

/// Rates at every sweep threshold: below the lowest score, at each midpoint
/// between adjacent distinct scores, and above the highest. A trial is
/// accepted when score >= threshold.
inline std::vector<DetCurvePoint> det_curve(const std::vector<LabeledScore>& scores) {
  std::size_t n_tar = 0, n_non = 0;
  for (const auto& s : scores) {
    if (!std::isfinite(s.score)) throw MetricError("det_curve: non-finite score");
    (s.target ? n_tar : n_non)++;
  }
  if (n_tar == 0 || n_non == 0) throw MetricError("need at least one target and one nontarget trial");

  auto sorted = scores;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
  std::vector<DetCurvePoint> out;
  // Everything accepted.
  out.push_back({sorted.front().score - 1.0, 1.0, 0.0});
  std::size_t rejected_tar = 0, rejected_non = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].score == sorted[i].score) {
      (sorted[j].target ? rejected_tar : rejected_non)++;
      ++j;
    }
    const double theta = j < sorted.size() ? 0.5 * (sorted[i].score + sorted[j].score) : sorted[i].score + 1.0;
    out.push_back({theta, static_cast<double>(n_non - rejected_non) / static_cast<double>(n_non),
                   static_cast<double>(rejected_tar) / static_cast<double>(n_tar)});
    i = j;
  }
  return out;
}

namespace detail {

struct EerPoint {
  double rate;
  double threshold;
};

inline EerPoint eer_point(const std::vector<DetCurvePoint>& det) {
  for (std::size_t i = 0; i < det.size(); ++i) {
    const double d = det[i].false_accept_rate - det[i].false_reject_rate;
    if (d == 0.0) return {det[i].false_accept_rate, det[i].threshold};
    if (d < 0.0) {
      // Crossing between i-1 (d >= 0) and i (d < 0).
      const auto& a = det[i - 1];
      const auto& b = det[i];
      const double da = a.false_accept_rate - a.false_reject_rate;
      const double lambda = da / (da - d);
      return {a.false_accept_rate + lambda * (b.false_accept_rate - a.false_accept_rate),
              a.threshold + lambda * (b.threshold - a.threshold)};
    }
  }
  return {det.back().false_accept_rate, det.back().threshold};
}

}  // namespace detail

/// Equal error rate in percent.
inline double eer(const std::vector<LabeledScore>& scores) {
  return 100.0 * detail::eer_point(det_curve(scores)).rate;
}

/// Threshold at the (interpolated) EER operating point.
inline double eer_threshold(const std::vector<LabeledScore>& scores) {
  return detail::eer_point(det_curve(scores)).threshold;
}

inline double min_dcf(const std::vector<LabeledScore>& scores, const DcfParams& p = {}) {
  if (!(p.p_target > 0 && p.p_target < 1) || !(p.c_miss > 0) || !(p.c_fa > 0))
    throw MetricError("min_dcf: p_target must be in (0,1) and costs positive");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& pt : det_curve(scores))
    best = std::min(best, p.c_miss * p.p_target * pt.false_reject_rate + p.c_fa * (1 - p.p_target) * pt.false_accept_rate);
  if (p.normalize) best /= std::min(p.c_miss * p.p_target, p.c_fa * (1 - p.p_target));
  return best;
}

// ---------------------------------------------------------------------------
// Signal quality.

inline constexpr double kSiSdrCap = 120.0;

/// Scale-invariant SDR in dB, clamped to [-120, 120].
inline double si_sdr(const Waveform& estimate, const Waveform& reference) {
  if (estimate.size() != reference.size()) throw MetricError("si_sdr: length mismatch");
  double dot = 0, ref_energy = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    dot += estimate.samples[i] * reference.samples[i];
    ref_energy += reference.samples[i] * reference.samples[i];
  }
  if (ref_energy == 0.0) throw MetricError("si_sdr: reference is all zeros");
  const double alpha = dot / ref_energy;
  double target = 0, residual = 0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference.samples[i];
    target += t * t;
    residual += (t - estimate.samples[i]) * (t - estimate.samples[i]);
  }
  if (target == 0.0) return -kSiSdrCap;
  if (residual <= target * 1e-12) return kSiSdrCap;
  return std::clamp(10.0 * std::log10(target / residual), -kSiSdrCap, kSiSdrCap);
}

struct StoiConfig {
  double frame_ms = 25.0;
  std::size_t fft_size = 512;
  std::size_t bands = 15;
  double lowest_center_hz = 150.0;
  std::size_t segment_frames = 30;
  double clip_db = -15.0;
  double min_duration_s = 0.5;
};

namespace detail {

/// Third-octave band envelopes [bands][frames] of a Hann-windowed STFT with 50% overlap.
inline std::vector<std::vector<double>> band_envelopes(const Waveform& w, const StoiConfig& cfg) {
  const std::size_t win = static_cast<std::size_t>(std::llround(cfg.frame_ms * 1e-3 * w.sample_rate));
  const std::size_t hop = win / 2;
  const std::size_t n_fft = std::max(cfg.fft_size, win);
  const std::size_t n_frames = w.size() < win ? 0 : (w.size() - win) / hop + 1;
  const std::size_t bins = n_fft / 2 + 1;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t b = 0; b < cfg.bands; ++b) {
    const double center = cfg.lowest_center_hz * std::pow(2.0, static_cast<double>(b) / 3.0);
    const double lo = center * std::pow(2.0, -1.0 / 6.0), hi = center * std::pow(2.0, 1.0 / 6.0);
    auto bin = [&](double f) { return std::min<std::size_t>(bins, static_cast<std::size_t>(std::llround(f * n_fft / w.sample_rate))); };
    ranges.emplace_back(bin(lo), std::max(bin(hi), bin(lo) + 1));
  }
  std::vector<double> window(win);
  for (std::size_t i = 0; i < win; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(win + 1));
  std::vector<std::vector<double>> env(cfg.bands, std::vector<double>(n_frames));
  std::vector<double> buf(n_fft);
  for (std::size_t f = 0; f < n_frames; ++f) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < win; ++i) buf[i] = w.samples[f * hop + i] * window[i];
    auto spec = rfft(buf, n_fft);
    for (std::size_t b = 0; b < cfg.bands; ++b) {
      double e = 0;
      for (std::size_t k = ranges[b].first; k < std::min(ranges[b].second, bins); ++k) e += std::norm(spec[k]);
      env[b][f] = std::sqrt(e);
    }
  }
  return env;
}

}  // namespace detail

/// Simplified STOI: per band and per ~375 ms segment, the estimate envelope
/// is scaled to the reference energy, clipped to a maximum distortion, and
/// correlated with the reference envelope. Segments where either side has no
/// energy are skipped; the result is the mean correlation.
inline double stoi_like(const Waveform& estimate, const Waveform& reference, const StoiConfig& cfg = {}) {
  if (estimate.size() != reference.size()) throw MetricError("stoi_like: length mismatch");
  if (reference.duration_s() < cfg.min_duration_s) throw MetricError("stoi_like: input shorter than 0.5 s");
  const auto x = detail::band_envelopes(reference, cfg);
  const auto y = detail::band_envelopes(estimate, cfg);
  const std::size_t n_frames = x.empty() ? 0 : x[0].size();
  const std::size_t n = cfg.segment_frames;
  const double clip = 1.0 + std::pow(10.0, -cfg.clip_db / 20.0);
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> xs(n), ys(n);
  for (std::size_t b = 0; b < x.size(); ++b) {
    for (std::size_t start = 0; start + n <= n_frames; ++start) {
      double ex = 0, ey = 0;
      for (std::size_t i = 0; i < n; ++i) {
        xs[i] = x[b][start + i];
        ys[i] = y[b][start + i];
        ex += xs[i] * xs[i];
        ey += ys[i] * ys[i];
      }
      if (ex < 1e-20 || ey < 1e-20) continue;
      const double g = std::sqrt(ex / ey);
      for (std::size_t i = 0; i < n; ++i) ys[i] = std::min(ys[i] * g, xs[i] * clip);
      double mx = 0, my = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
      }
      mx /= n;
      my /= n;
      double sxy = 0, sxx = 0, syy = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
      }
      if (sxx < 1e-20 || syy < 1e-20) continue;
      total += sxy / std::sqrt(sxx * syy);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace pfl
