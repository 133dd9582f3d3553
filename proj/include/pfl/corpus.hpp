#pragma once

// Deterministic source-filter speaker corpus.
//
// Each speaker is a fixed profile (fundamental frequency, three formant
// resonances, harmonic rolloff). Utterances are syllable-shaped harmonic
// excitations with a wandering pitch contour, filtered through the profile's
// resonators, peak-normalized, with a noise floor 20 dB below signal power.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfl/audio.hpp"
#include "pfl/rng.hpp"

namespace pfl {

struct Formant {
  double center_hz;
  double bandwidth_hz;
};

struct SpeakerProfile {
  std::string id;
  double f0_hz;
  Formant formants[3];
  double rolloff;  // per-harmonic amplitude ratio
};

enum class Split { train, eval };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "eval"; }
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "eval") return Split::eval;
  throw std::invalid_argument("unknown split '" + s + "'");
}

struct Utterance {
  std::string speaker_id;
  std::string utt_id;
  Split split = Split::train;
  Waveform audio;
};

struct CorpusConfig {
  std::uint64_t seed = 0;
  std::size_t n_speakers = 8;
  std::size_t utts_per_speaker = 10;
  std::size_t eval_per_speaker = 5;
  double duration_s = 1.0;
  std::uint32_t sample_rate = 16000;
  double peak = 0.5;
  double noise_floor_db = -20.0;
};

struct SpeakerCorpus {
  std::vector<SpeakerProfile> speakers;
  std::vector<Utterance> utterances;

  std::vector<const Utterance*> split(Split s) const {
    std::vector<const Utterance*> out;
    for (const auto& u : utterances)
      if (u.split == s) out.push_back(&u);
    return out;
  }
  std::size_t speaker_index(const std::string& id) const {
    for (std::size_t i = 0; i < speakers.size(); ++i)
      if (speakers[i].id == id) return i;
    throw std::out_of_range("unknown speaker '" + id + "'");
  }
};

namespace detail {

constexpr double kF0GridLo = 90.0;
constexpr double kF0GridHi = 250.0;
constexpr double kF0GridStep = 2.0;

inline std::string indexed(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02zu", prefix, i);
  return buf;
}

/// Two-pole resonator with unity gain at DC.
inline void resonate(std::vector<double>& x, double center, double bandwidth, double fs) {
  const double r = std::exp(-std::numbers::pi * bandwidth / fs);
  const double theta = 2.0 * std::numbers::pi * center / fs;
  const double a1 = 2.0 * r * std::cos(theta);
  const double a2 = -r * r;
  const double gain = 1.0 - a1 - a2;
  double y1 = 0, y2 = 0;
  for (auto& v : x) {
    double y = gain * v + a1 * y1 + a2 * y2;
    y2 = y1;
    y1 = y;
    v = y;
  }
}

}  // namespace detail

inline std::vector<SpeakerProfile> draw_profiles(std::uint64_t seed, std::size_t n_speakers) {
  const auto grid_size = static_cast<std::size_t>((detail::kF0GridHi - detail::kF0GridLo) / detail::kF0GridStep) + 1;
  if (n_speakers > grid_size) throw std::invalid_argument("synth_corpus: too many speakers for the f0 grid");
  std::vector<std::size_t> grid(grid_size);
  for (std::size_t i = 0; i < grid_size; ++i) grid[i] = i;
  Rng pick(derive_seed(seed, {fnv1a("f0-grid")}));
  std::shuffle(grid.begin(), grid.end(), pick);

  std::vector<SpeakerProfile> out;
  for (std::size_t s = 0; s < n_speakers; ++s) {
    Rng rng(derive_seed(seed, {fnv1a("speaker"), s}));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SpeakerProfile p;
    p.id = detail::indexed("spk", s);
    p.f0_hz = detail::kF0GridLo + detail::kF0GridStep * static_cast<double>(grid[s]);
    p.formants[0] = {300 + 600 * u(rng), 60 + 120 * u(rng)};
    p.formants[1] = {1000 + 1400 * u(rng), 80 + 140 * u(rng)};
    p.formants[2] = {2500 + 1000 * u(rng), 100 + 200 * u(rng)};
    p.rolloff = 0.6 + 0.3 * u(rng);
    out.push_back(p);
  }
  return out;
}

inline Waveform synth_utterance(const SpeakerProfile& p, std::uint64_t seed, std::size_t n_samples, std::uint32_t fs,
                                double peak, double noise_floor_db) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);

  // Pitch contour: slow random walk around f0 (+-8%).
  std::vector<double> f0(n_samples);
  double drift = 0.0, target = 0.0;
  const std::size_t knot = fs / 20;
  for (std::size_t n = 0; n < n_samples; ++n) {
    if (n % knot == 0) target = std::clamp(target + 0.03 * g(rng), -0.08, 0.08);
    drift += (target - drift) * 0.002;
    f0[n] = p.f0_hz * (1.0 + drift);
  }

  // Syllable envelope: raised-cosine bumps of 120-260 ms with short gaps.
  std::vector<double> env(n_samples, 0.0);
  std::size_t pos = static_cast<std::size_t>(0.02 * fs * u(rng));
  while (pos < n_samples) {
    auto len = static_cast<std::size_t>((0.12 + 0.14 * u(rng)) * fs);
    double amp = 0.5 + 0.5 * u(rng);
    for (std::size_t k = 0; k < len && pos + k < n_samples; ++k)
      env[pos + k] = amp * 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len)));
    pos += len + static_cast<std::size_t>(0.03 * fs * u(rng));
  }

  // Harmonic excitation up to 4 kHz.
  std::vector<double> x(n_samples, 0.0);
  const std::size_t harmonics = static_cast<std::size_t>(4000.0 / p.f0_hz);
  std::vector<double> phase(harmonics);
  for (auto& ph : phase) ph = 2.0 * std::numbers::pi * u(rng);
  for (std::size_t n = 0; n < n_samples; ++n) {
    double acc = 0.0, amp = 1.0;
    const double w = 2.0 * std::numbers::pi * f0[n] / fs;
    for (std::size_t h = 0; h < harmonics; ++h) {
      phase[h] += w * static_cast<double>(h + 1);
      acc += amp * std::sin(phase[h]);
      amp *= p.rolloff;
    }
    x[n] = acc * env[n];
  }
  for (const auto& f : p.formants) detail::resonate(x, f.center_hz, f.bandwidth_hz, fs);

  double mx = 0.0;
  for (double v : x) mx = std::max(mx, std::abs(v));
  if (mx > 0)
    for (auto& v : x) v *= peak / mx;
  const double noise_rms = std::sqrt(mean_power(x)) * std::pow(10.0, noise_floor_db / 20.0);
  for (auto& v : x) v += noise_rms * g(rng);

  Waveform w{std::move(x), fs};
  clip_unit(w);
  return w;
}

inline SpeakerCorpus synth_corpus(const CorpusConfig& cfg) {
  if (cfg.n_speakers < 2) throw std::invalid_argument("synth_corpus: need at least 2 speakers");
  if (cfg.utts_per_speaker < 1) throw std::invalid_argument("synth_corpus: need at least 1 utterance per speaker");
  if (cfg.eval_per_speaker > cfg.utts_per_speaker)
    throw std::invalid_argument("synth_corpus: eval_per_speaker exceeds utts_per_speaker");
  if (cfg.duration_s < 0.5) throw std::invalid_argument("synth_corpus: duration must be at least 0.5 s");
  if (cfg.sample_rate == 0) throw std::invalid_argument("synth_corpus: sample rate 0");
  SpeakerCorpus corpus;
  corpus.speakers = draw_profiles(cfg.seed, cfg.n_speakers);
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.sample_rate));
  for (std::size_t s = 0; s < cfg.n_speakers; ++s) {
    const auto& p = corpus.speakers[s];
    for (std::size_t k = 0; k < cfg.utts_per_speaker; ++k) {
      Utterance u;
      u.speaker_id = p.id;
      u.utt_id = p.id + "_" + detail::indexed("u", k);
      u.split = k + cfg.eval_per_speaker >= cfg.utts_per_speaker ? Split::eval : Split::train;
      u.audio = synth_utterance(p, derive_seed(cfg.seed, {fnv1a("utterance"), s, k}), n, cfg.sample_rate, cfg.peak,
                                cfg.noise_floor_db);
      corpus.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Manifest: speaker_id<TAB>utt_id<TAB>split<TAB>relative/path.wav

struct ManifestEntry {
  std::string speaker_id;
  std::string utt_id;
  Split split;
  std::string path;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest " + path);
  for (const auto& e : entries) os << e.speaker_id << '\t' << e.utt_id << '\t' << split_name(e.split) << '\t' << e.path << '\n';
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    out.push_back({fields[0], fields[1], parse_split(fields[2]), fields[3]});
  }
  return out;
}

}  // namespace pfl
