#pragma once

// Noise predictor eps_theta(x_t, t, c): a gated residual stack of dilated
// convolutions with a per-block diffusion-step embedding and a mel
// spectrogram conditioner, in the style of waveform diffusion vocoders.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pfl/features.hpp"
#include "pfl/nn.hpp"
#include "pfl/tensor.hpp"

namespace pfl {

struct DenoiserConfig {
  std::size_t channels = 16;
  std::size_t blocks = 8;
  std::size_t dilation_cycle = 4;  // dilations 1, 2, 4, ... 2^(cycle-1), repeated
  std::size_t step_embedding = 128;
  std::size_t step_hidden = 64;
  std::size_t n_mels = 32;

  std::size_t dilation(std::size_t block) const { return std::size_t{1} << (block % dilation_cycle); }

  FeatureConfig conditioner_features(std::uint32_t sample_rate = 16000) const {
    FeatureConfig f;
    f.n_mels = n_mels;
    f.sample_rate = sample_rate;
    return f;
  }
};

/// Mel spectrogram conditioner [n_mels x frames], mapped from dB to [0, 1].
/// Inputs shorter than one window are zero-padded to a single frame.
template <typename T>
Tensor<T> conditioner(const std::vector<double>& samples, const DenoiserConfig& cfg, std::uint32_t sample_rate = 16000) {
  NoGradGuard guard;
  auto fc = cfg.conditioner_features(sample_rate);
  std::vector<double> x = samples;
  if (x.size() < fc.window_samples()) x.resize(fc.window_samples(), 0.0);
  auto mel = mel_power(Tensor<double>::vector(std::move(x)), fc);
  const std::size_t frames = mel.dim(0), m = mel.dim(1);
  std::vector<T> out(m * frames);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t k = 0; k < m; ++k) {
      const double db = 10.0 * std::log10(std::max(mel.data()[f * m + k], 1e-6));
      out[k * frames + f] = static_cast<T>(std::clamp((db + 60.0) / 100.0, 0.0, 1.0));
    }
  return Tensor<T>(Shape{m, frames}, std::move(out));
}

/// Sinusoidal encoding of a (possibly fractional) diffusion step: [1 x dim].
template <typename T>
Tensor<T> step_encoding(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(dim, T(0));
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10.0, 4.0 * static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(half - 1, 1)));
    v[i] = static_cast<T>(std::sin(t * freq));
    v[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return Tensor<T>(Shape{1, dim}, std::move(v));
}

template <typename T>
struct DenoiserModel {
  struct Block {
    Tensor<T> step_w, step_b, dil_w, dil_b, cond_w, out_w, out_b;
  };

  DenoiserConfig cfg;
  Tensor<T> in_w, in_b, emb1_w, emb1_b, emb2_w, emb2_b, skip_w, skip_b, final_w, final_b;
  std::vector<Block> blocks;

  static DenoiserModel init(const DenoiserConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {fnv1a("denoiser-init")}));
    const std::size_t c = cfg.channels, h = cfg.step_hidden, e = cfg.step_embedding, m = cfg.n_mels;
    DenoiserModel d;
    d.cfg = cfg;
    d.in_w = init_uniform<T>({c, 1, 1}, 1, rng, std::sqrt(2.0));
    d.in_b = Tensor<T>::zeros({c, 1}, true);
    d.emb1_w = init_uniform<T>({e, h}, e, rng);
    d.emb1_b = Tensor<T>::zeros({1, h}, true);
    d.emb2_w = init_uniform<T>({h, h}, h, rng);
    d.emb2_b = Tensor<T>::zeros({1, h}, true);
    for (std::size_t r = 0; r < cfg.blocks; ++r) {
      Block b;
      b.step_w = init_uniform<T>({h, c}, h, rng);
      b.step_b = Tensor<T>::zeros({1, c}, true);
      b.dil_w = init_uniform<T>({2 * c, c, 3}, 3 * c, rng);
      b.dil_b = Tensor<T>::zeros({2 * c, 1}, true);
      b.cond_w = init_uniform<T>({2 * c, m, 1}, m, rng);
      b.out_w = init_uniform<T>({2 * c, c, 1}, c, rng);
      b.out_b = Tensor<T>::zeros({2 * c, 1}, true);
      d.blocks.push_back(std::move(b));
    }
    d.skip_w = init_uniform<T>({c, c, 1}, c, rng, std::sqrt(2.0));
    d.skip_b = Tensor<T>::zeros({c, 1}, true);
    d.final_w = Tensor<T>::zeros({1, c, 1}, true);
    d.final_b = Tensor<T>::zeros({1, 1}, true);
    return d;
  }

  NamedParams<T> parameters() {
    NamedParams<T> p{{"in_w", &in_w},     {"in_b", &in_b},     {"emb1_w", &emb1_w}, {"emb1_b", &emb1_b},
                     {"emb2_w", &emb2_w}, {"emb2_b", &emb2_b}, {"skip_w", &skip_w}, {"skip_b", &skip_b},
                     {"final_w", &final_w}, {"final_b", &final_b}};
    for (std::size_t r = 0; r < blocks.size(); ++r) {
      auto& b = blocks[r];
      const std::string k = "block" + std::to_string(r) + "/";
      p.insert(p.end(), {{k + "step_w", &b.step_w}, {k + "step_b", &b.step_b}, {k + "dil_w", &b.dil_w},
                         {k + "dil_b", &b.dil_b}, {k + "cond_w", &b.cond_w}, {k + "out_w", &b.out_w},
                         {k + "out_b", &b.out_b}});
    }
    return p;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, t] : parameters()) n += t->numel();
    return n;
  }

  /// x: [L] noisy signal, cond: [n_mels x frames]. Returns predicted noise [L].
  Tensor<T> forward(const Tensor<T>& x, double t, const Tensor<T>& cond) const {
    if (x.rank() != 1) throw ShapeError("denoiser expects a 1-D signal");
    if (cond.rank() != 2 || cond.dim(0) != cfg.n_mels) throw ShapeError("denoiser conditioner must be [n_mels x frames]");
    const std::size_t len = x.dim(0), c = cfg.channels;
    const auto fc = cfg.conditioner_features();
    const double offset = static_cast<double>(fc.window_samples()) / 2.0;
    const double hop = static_cast<double>(fc.hop_samples());

    auto h = relu(conv1d(reshape(x, {1, len}), in_w) + in_b);
    auto emb = swish(matmul(step_encoding<T>(t, cfg.step_embedding), emb1_w) + emb1_b);
    emb = swish(matmul(emb, emb2_w) + emb2_b);

    const T root_half = static_cast<T>(std::sqrt(0.5));
    Tensor<T> skips;
    for (std::size_t r = 0; r < blocks.size(); ++r) {
      const auto& b = blocks[r];
      auto step = reshape(matmul(emb, b.step_w) + b.step_b, {c, 1});
      auto y = conv1d(h + step, b.dil_w, cfg.dilation(r)) + b.dil_b;
      y = y + upsample_linear(conv1d(cond, b.cond_w), len, offset, hop);
      auto gated = tanh(slice_rows(y, 0, c)) * sigmoid(slice_rows(y, c, 2 * c));
      auto out = conv1d(gated, b.out_w) + b.out_b;
      h = (h + slice_rows(out, 0, c)) * root_half;
      skips = r == 0 ? slice_rows(out, c, 2 * c) : skips + slice_rows(out, c, 2 * c);
    }
    auto s = skips * static_cast<T>(1.0 / std::sqrt(static_cast<double>(blocks.size())));
    s = relu(conv1d(s, skip_w) + skip_b);
    return reshape(conv1d(s, final_w) + final_b, {len});
  }

  /// Plain evaluation on double samples.
  std::vector<double> predict(const std::vector<double>& x, double t, const Tensor<T>& cond) const {
    NoGradGuard guard;
    auto out = forward(Tensor<T>::vector(std::vector<T>(x.begin(), x.end())), t, cond);
    return std::vector<double>(out.data().begin(), out.data().end());
  }

  template <typename U>
  DenoiserModel<U> cast() const {
    DenoiserModel<U> out;
    out.cfg = cfg;
    auto self = const_cast<DenoiserModel*>(this)->parameters();
    out.blocks.resize(blocks.size());
    auto dst = out.parameters();
    for (std::size_t i = 0; i < self.size(); ++i) {
      *dst[i].second = self[i].second->template cast<U>();
      dst[i].second->set_requires_grad(true);
    }
    return out;
  }

  void save(Checkpoint& ck) const { save_params<T>(ck, "denoiser/", const_cast<DenoiserModel*>(this)->parameters()); }
  void load(const Checkpoint& ck) { load_params<T>(ck, "denoiser/", parameters()); }
};

}  // namespace pfl
