#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfl/rng.hpp"

namespace pfl {

class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mono audio in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  std::uint32_t sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  double duration_s() const { return static_cast<double>(samples.size()) / sample_rate; }
  bool operator==(const Waveform&) const = default;
};

inline void clip_unit(Waveform& w) {
  for (auto& s : w.samples) s = std::clamp(s, -1.0, 1.0);
}

inline double mean_power(const std::vector<double>& x) {
  double acc = 0;
  for (double v : x) acc += v * v;
  return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

/// 10 log10(P(reference) / P(estimate - reference)); +inf when they coincide.
inline double snr_db(const Waveform& reference, const Waveform& noisy) {
  if (reference.size() != noisy.size()) throw AudioError("snr_db: length mismatch");
  std::vector<double> diff(reference.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = noisy.samples[i] - reference.samples[i];
  double pn = mean_power(diff);
  if (pn == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(mean_power(reference.samples) / pn);
}

// ---------------------------------------------------------------------------
// RIFF/WAVE PCM16 mono.

namespace detail {

inline std::uint32_t read_u32(const std::string& b, std::size_t at) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3])) << 24;
}
inline std::uint16_t read_u16(const std::string& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) |
                                    static_cast<unsigned char>(b[at + 1]) << 8);
}
inline void write_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void write_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

inline Waveform decode_wav(const std::string& bytes) {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw AudioError("malformed WAV header: missing RIFF/WAVE tags");
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint32_t rate = 0;
  std::uint16_t channels = 0, bits = 0, format = 0;
  while (pos + 8 <= bytes.size()) {
    std::string id = bytes.substr(pos, 4);
    std::uint32_t size = read_u32(bytes, pos + 4);
    std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw AudioError("malformed WAV header: chunk '" + id + "' overruns file");
    if (id == "fmt ") {
      if (size < 16) throw AudioError("malformed WAV header: short fmt chunk");
      format = read_u16(bytes, body);
      channels = read_u16(bytes, body + 2);
      rate = read_u32(bytes, body + 4);
      bits = read_u16(bytes, body + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw AudioError("malformed WAV header: data before fmt");
      if (format != 1) throw AudioError("unsupported WAV encoding: format tag " + std::to_string(format) + " (PCM only)");
      if (bits != 16) throw AudioError("unsupported WAV encoding: " + std::to_string(bits) + "-bit samples (PCM16 only)");
      if (channels != 1) throw AudioError("unsupported WAV encoding: " + std::to_string(channels) + " channels (mono only)");
      if (rate == 0) throw AudioError("malformed WAV header: sample rate 0");
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i)
        w.samples[i] = static_cast<std::int16_t>(read_u16(bytes, body + 2 * i)) / 32768.0;
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw AudioError("malformed WAV header: no data chunk");
}

/// Round half away from zero onto the 16-bit grid, clamped to [-32768, 32767].
inline std::int16_t quantize_pcm16(double s) {
  double q = std::round(s * 32768.0);
  return static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0));
}

inline std::string encode_wav(const Waveform& w) {
  if (w.sample_rate == 0) throw AudioError("cannot encode a WAV with sample rate 0");
  std::string out;
  const auto data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  out += "RIFF";
  detail::write_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::write_u32(out, 16);
  detail::write_u16(out, 1);
  detail::write_u16(out, 1);
  detail::write_u32(out, w.sample_rate);
  detail::write_u32(out, w.sample_rate * 2);
  detail::write_u16(out, 2);
  detail::write_u16(out, 16);
  out += "data";
  detail::write_u32(out, data_bytes);
  for (double s : w.samples) detail::write_u16(out, static_cast<std::uint16_t>(quantize_pcm16(s)));
  return out;
}

inline Waveform load_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw AudioError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return decode_wav(bytes);
  } catch (const AudioError& e) {
    throw AudioError(path + ": " + e.what());
  }
}

inline void save_wav(const std::string& path, const Waveform& w) {
  auto bytes = encode_wav(w);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw AudioError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Adds white Gaussian noise scaled so the achieved SNR equals target_db
/// before clipping. target_db = +inf returns the input unchanged.
inline Waveform add_noise_at_snr(const Waveform& w, double target_db, std::uint64_t seed) {
  if (std::isinf(target_db) && target_db > 0) return w;
  double ps = mean_power(w.samples);
  if (ps == 0.0) throw AudioError("add_noise_at_snr: all-zero input has undefined SNR");
  Rng rng(seed);
  auto noise = gaussian_vector<double>(rng, w.size());
  double pn = mean_power(noise);
  double scale = std::sqrt(ps / std::pow(10.0, target_db / 10.0) / pn);
  Waveform out = w;
  for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += scale * noise[i];
  clip_unit(out);
  return out;
}

}  // namespace pfl
