#pragma once

// Victim speaker-verification system: a small convolutional encoder over
// CMVN-normalized log filterbanks with mean/std pooling and a unit-norm
// embedding, trained with additive angular margin softmax and scored by
// cosine similarity.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfl/audio.hpp"
#include "pfl/corpus.hpp"
#include "pfl/features.hpp"
#include "pfl/nn.hpp"
#include "pfl/rng.hpp"
#include "pfl/tensor.hpp"

namespace pfl {

struct EncoderConfig {
  std::size_t channels = 64;
  std::size_t embedding_dim = 64;
  std::size_t width1 = 5;
  std::size_t width2 = 3;
  std::size_t dilation2 = 2;
};

template <typename T>
struct EncoderModel {
  EncoderConfig arch;
  FeatureConfig features;
  Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;

  static EncoderModel init(const EncoderConfig& arch, const FeatureConfig& features, std::uint64_t seed) {
    features.validate();
    Rng rng(derive_seed(seed, {fnv1a("encoder-init")}));
    const std::size_t c = arch.channels, m = features.n_mels;
    EncoderModel e;
    e.arch = arch;
    e.features = features;
    e.conv1_w = init_uniform<T>({c, m, arch.width1}, m * arch.width1, rng, std::sqrt(2.0));
    e.conv1_b = Tensor<T>::zeros({c, 1}, true);
    e.conv2_w = init_uniform<T>({c, c, arch.width2}, c * arch.width2, rng, std::sqrt(2.0));
    e.conv2_b = Tensor<T>::zeros({c, 1}, true);
    e.proj_w = init_uniform<T>({2 * c, arch.embedding_dim}, 2 * c, rng);
    e.proj_b = Tensor<T>::zeros({1, arch.embedding_dim}, true);
    return e;
  }

  NamedParams<T> parameters() {
    return {{"conv1_w", &conv1_w}, {"conv1_b", &conv1_b}, {"conv2_w", &conv2_w},
            {"conv2_b", &conv2_b}, {"proj_w", &proj_w},   {"proj_b", &proj_b}};
  }

  /// Normalized features [frames x n_mels] -> unit embedding [1 x dim].
  Tensor<T> forward(const Tensor<T>& feats) const {
    auto x = transpose(feats);
    auto h = relu(conv1d(x, conv1_w, 1) + conv1_b);
    h = relu(conv1d(h, conv2_w, arch.dilation2) + conv2_b);
    auto mu = mean(h, 1, true);
    auto var = mean(square(h - mu), 1);
    auto sd = sqrt(clamp(var, static_cast<T>(1e-8), std::numeric_limits<T>::max()));
    auto pooled = reshape(concat<T>({reshape(mu, {arch.channels}), sd}), {1, 2 * arch.channels});
    auto v = matmul(pooled, proj_w) + proj_b;
    return v / sqrt(sum(square(v)));
  }

  /// Raw samples [length] -> unit embedding [1 x dim]; differentiable end to end.
  Tensor<T> embed_tensor(const Tensor<T>& samples) const {
    auto feats = cmvn(logfbank(samples, features));
    return forward(feats);
  }

  template <typename U>
  EncoderModel<U> cast() const {
    EncoderModel<U> out;
    out.arch = arch;
    out.features = features;
    auto conv = [](const Tensor<T>& t) {
      auto c = t.template cast<U>();
      c.set_requires_grad(true);
      return c;
    };
    out.conv1_w = conv(conv1_w);
    out.conv1_b = conv(conv1_b);
    out.conv2_w = conv(conv2_w);
    out.conv2_b = conv(conv2_b);
    out.proj_w = conv(proj_w);
    out.proj_b = conv(proj_b);
    return out;
  }

  void save(Checkpoint& ck) const {
    auto self = const_cast<EncoderModel*>(this);
    save_params<T>(ck, "encoder/", self->parameters());
    std::ostringstream meta;
    meta << "{\"channels\":" << arch.channels << ",\"embedding_dim\":" << arch.embedding_dim << ",\"width1\":"
         << arch.width1 << ",\"width2\":" << arch.width2 << ",\"dilation2\":" << arch.dilation2
         << ",\"n_mels\":" << features.n_mels << ",\"window_ms\":" << features.window_ms
         << ",\"hop_ms\":" << features.hop_ms << ",\"fft_size\":" << features.fft_size << "}";
    ck.put_bytes("encoder/meta", meta.str());
  }

  void load(const Checkpoint& ck) { load_params<T>(ck, "encoder/", parameters()); }
};

using Embedding = std::vector<double>;

class InputTooShort : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
Embedding embed(const Waveform& w, const EncoderModel<T>& model) {
  if (model.features.frame_count(w.size()) < 2)
    throw InputTooShort("embed: waveform too short for two feature frames");
  NoGradGuard guard;
  auto e = model.embed_tensor(Tensor<T>::vector(std::vector<T>(w.samples.begin(), w.samples.end())));
  return Embedding(e.data().begin(), e.data().end());
}

/// Cosine score of two unit embeddings.
inline double score(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw std::invalid_argument("score: embedding sizes differ");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (std::abs(std::sqrt(na) - 1) > 1e-3 || std::abs(std::sqrt(nb) - 1) > 1e-3)
    throw std::invalid_argument("score: embeddings must be unit norm");
  return std::clamp(dot, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Additive angular margin softmax.

/// Mean cross-entropy over logits s*cos(theta_j), with the true class using
/// s*cos(theta_y + m). embeddings [batch x dim] and weights [classes x dim]
/// are expected to have unit rows.
template <typename T>
Tensor<T> aam_softmax_loss(const Tensor<T>& embeddings, const std::vector<std::size_t>& labels,
                           const Tensor<T>& weights, double s = 32.0, double m = 0.2) {
  const std::size_t batch = embeddings.dim(0), classes = weights.dim(0);
  if (labels.size() != batch) throw std::invalid_argument("aam_softmax_loss: one label per embedding");
  std::vector<T> onehot(batch * classes, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw std::out_of_range("aam_softmax_loss: label index out of range");
    onehot[b * classes + labels[b]] = T(1);
  }
  Tensor<T> mask(Shape{batch, classes}, std::move(onehot));
  const T eps = static_cast<T>(1e-7);
  auto cosine = clamp(matmul(embeddings, transpose(weights)), T(-1) + eps, T(1) - eps);
  auto sine = sqrt(add_scalar(-square(cosine), T(1)));
  auto shifted = cosine * static_cast<T>(std::cos(m)) - sine * static_cast<T>(std::sin(m));
  auto logits = static_cast<T>(s) * (cosine + mask * (shifted - cosine));
  auto per_item = logsumexp(logits, 1) - sum(mask * logits, 1);
  return mean(per_item);
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& w) {
  return w / sqrt(sum(square(w), 1, true));
}

// ---------------------------------------------------------------------------
// Training.

struct AsvTrainConfig {
  OptimizerConfig optimizer{OptimizerKind::sgd_momentum, 1e-2, 0.9};
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double lr_decay = 0.5;
  std::size_t decay_every = 10;
  double scale = 32.0;
  double margin = 0.2;
  std::size_t min_crop_frames = 50;
  // Additive white-noise augmentation: with probability augment_prob an
  // example gets noise at an SNR drawn uniformly from the range (dB).
  double augment_prob = 0.0;
  double augment_snr_lo_db = 10.0;
  double augment_snr_hi_db = 40.0;
  std::uint64_t seed = 1;
};

template <typename T>
struct AsvTrainResult {
  EncoderModel<T> model;
  Tensor<T> class_weights;
  std::vector<double> loss_per_epoch;
};

/// Minibatch training on the corpus train split. Clean features are computed
/// once; each example is a random crop of at least min_crop_frames frames,
/// taken from a noise-augmented copy of the utterance when augmentation fires.
template <typename T>
AsvTrainResult<T> train_asv(const SpeakerCorpus& corpus, const EncoderConfig& arch, const FeatureConfig& features,
                            const AsvTrainConfig& cfg) {
  auto train = corpus.split(Split::train);
  std::vector<std::size_t> labels;
  std::map<std::string, std::size_t> speaker_ids;
  for (const auto* u : train) speaker_ids.emplace(u->speaker_id, 0);
  if (speaker_ids.size() < 2) throw std::invalid_argument("train_asv: need at least 2 speakers in the train split");
  std::size_t next = 0;
  for (auto& [k, v] : speaker_ids) v = next++;

  if (cfg.augment_prob < 0 || cfg.augment_prob > 1 || cfg.augment_snr_lo_db > cfg.augment_snr_hi_db)
    throw std::invalid_argument("train_asv: bad augmentation settings");
  auto features_of = [&](const Waveform& w) {
    FeatureConfig fc = features;
    fc.sample_rate = w.sample_rate;
    auto f = logfbank(w, fc);
    std::vector<T> v(f.values.begin(), f.values.end());
    return Tensor<T>(Shape{f.frames, f.n_mels}, std::move(v));
  };
  std::vector<Tensor<T>> feats;
  for (const auto* u : train) {
    feats.push_back(features_of(u->audio));
    labels.push_back(speaker_ids.at(u->speaker_id));
  }

  AsvTrainResult<T> result{EncoderModel<T>::init(arch, features, cfg.seed), {}, {}};
  Rng rng(derive_seed(cfg.seed, {fnv1a("asv-train")}));
  result.class_weights = init_uniform<T>({speaker_ids.size(), arch.embedding_dim}, arch.embedding_dim, rng);
  auto params = result.model.parameters();
  params.emplace_back("class_weights", &result.class_weights);
  Optimizer<T> opt(params, cfg.optimizer);

  std::vector<std::size_t> order(feats.size());
  std::iota(order.begin(), order.end(), 0);
  Rng aug(derive_seed(cfg.seed, {fnv1a("asv-augment")}));
  std::uniform_real_distribution<double> coin(0.0, 1.0), snr(cfg.augment_snr_lo_db, cfg.augment_snr_hi_db);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto augmented = [&](std::size_t k) {
    if (cfg.augment_prob <= 0 || coin(aug) >= cfg.augment_prob) return feats[k];
    Waveform w = train[k]->audio;
    const double sigma = std::sqrt(mean_power(w.samples) * std::pow(10.0, -snr(aug) / 10.0));
    for (auto& v : w.samples) v += sigma * gauss(aug);
    clip_unit(w);
    return features_of(w);
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.decay_every && epoch > 0 && epoch % cfg.decay_every == 0) opt.set_lr(opt.lr() * cfg.lr_decay);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<Tensor<T>> embs;
      std::vector<std::size_t> batch_labels;
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) {
        const auto f = augmented(order[j]);
        const std::size_t nf = f.dim(0);
        std::size_t lo = std::min(cfg.min_crop_frames, nf);
        std::uniform_int_distribution<std::size_t> len_d(lo, nf);
        std::size_t len = len_d(rng);
        std::uniform_int_distribution<std::size_t> off_d(0, nf - len);
        std::size_t off = off_d(rng);
        embs.push_back(result.model.forward(cmvn(slice_rows(f, off, off + len))));
        batch_labels.push_back(labels[order[j]]);
      }
      opt.zero_grad();
      auto loss = aam_softmax_loss(concat(embs), batch_labels, normalize_rows(result.class_weights), cfg.scale,
                                   cfg.margin);
      total += loss.item();
      ++batches;
      backward(loss);
      opt.step();
    }
    result.loss_per_epoch.push_back(total / static_cast<double>(batches));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Trials and scoring.

struct Trial {
  bool target = false;
  std::string enroll;
  std::string test;
};

struct ScoredTrial {
  Trial trial;
  double score = 0.0;
};

using ScoreSet = std::vector<ScoredTrial>;

inline std::vector<Trial> read_trials(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read trial list " + path);
  std::vector<Trial> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string label;
    Trial t;
    if (!(ss >> label >> t.enroll >> t.test) || (label != "0" && label != "1"))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'label enroll test' with label 0/1");
    t.target = label == "1";
    if (t.enroll == t.test) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": enroll equals test");
    out.push_back(std::move(t));
  }
  return out;
}

inline void write_trials(const std::string& path, const std::vector<Trial>& trials) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write trial list " + path);
  for (const auto& t : trials) os << (t.target ? 1 : 0) << ' ' << t.enroll << ' ' << t.test << '\n';
}

inline std::string format_score(double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9f", s);
  return buf;
}

inline void write_scores(const std::string& path, const ScoreSet& scores) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write scores " + path);
  os << "enroll,test,label,score\n";
  for (const auto& s : scores)
    os << s.trial.enroll << ',' << s.trial.test << ',' << (s.trial.target ? 1 : 0) << ',' << format_score(s.score) << '\n';
}

inline ScoreSet read_scores(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read scores " + path);
  ScoreSet out;
  std::string line;
  std::getline(is, line);
  if (line != "enroll,test,label,score") throw std::runtime_error(path + ": bad score header");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    if (f.size() != 4) throw std::runtime_error(path + ": bad score row '" + line + "'");
    out.push_back({{f[2] == "1", f[0], f[1]}, std::stod(f[3])});
  }
  return out;
}

using AudioLookup = std::function<Waveform(const std::string& ref)>;
/// Transformation applied to the test side of a trial (a defense, or identity).
using TestTransform = std::function<Waveform(const Waveform& test, std::size_t trial_index)>;

/// Scores every trial. When a transform is given it is applied to the test
/// utterance only; enrollment audio is always used as is.
template <typename T>
ScoreSet evaluate_trials(const std::vector<Trial>& trials, const AudioLookup& audio, const EncoderModel<T>& model,
                         const TestTransform& transform = {}) {
  std::map<std::string, Embedding> enroll_cache;
  ScoreSet out;
  out.reserve(trials.size());
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    auto it = enroll_cache.find(t.enroll);
    if (it == enroll_cache.end()) it = enroll_cache.emplace(t.enroll, embed(audio(t.enroll), model)).first;
    Waveform test = audio(t.test);
    if (transform) test = transform(test, i);
    out.push_back({t, score(it->second, embed(test, model))});
  }
  return out;
}

}  // namespace pfl
