#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "pfl/asv.hpp"
#include "pfl/gradcheck.hpp"
#include "pfl/metrics.hpp"

using namespace pfl;

namespace {

std::string temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "pfl_test_asv";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

EncoderConfig small_arch() {
  EncoderConfig a;
  a.channels = 8;
  a.embedding_dim = 8;
  return a;
}

FeatureConfig small_features() {
  FeatureConfig f;
  f.n_mels = 16;
  return f;
}

Tensor<double> random_matrix(Shape shape, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = n(rng);
  return Tensor<double>(shape, v);
}

// Straight-line evaluation of the margin loss, one sample at a time.
double aam_oracle(const std::vector<std::vector<double>>& emb, const std::vector<std::size_t>& labels,
                  const std::vector<std::vector<double>>& w, double s, double m) {
  double total = 0;
  for (std::size_t b = 0; b < emb.size(); ++b) {
    std::vector<double> logits;
    for (std::size_t c = 0; c < w.size(); ++c) {
      double dot = 0, ne = 0, nw = 0;
      for (std::size_t k = 0; k < w[c].size(); ++k) {
        dot += emb[b][k] * w[c][k];
        ne += emb[b][k] * emb[b][k];
        nw += w[c][k] * w[c][k];
      }
      double cosine = dot / std::sqrt(ne * nw);
      double theta = std::acos(std::clamp(cosine, -1 + 1e-7, 1 - 1e-7));
      logits.push_back(s * (c == labels[b] ? std::cos(theta + m) : cosine));
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    total += mx + std::log(z) - logits[labels[b]];
  }
  return total / static_cast<double>(emb.size());
}

std::vector<std::vector<double>> rows_of(const Tensor<double>& t) {
  std::vector<std::vector<double>> out(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) out[i][j] = t.data()[i * t.dim(1) + j];
  return out;
}

}  // namespace

TEST(AamSoftmax, MatchesAngleFormula) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto emb = normalize_rows(random_matrix({4, 6}, rng));
    auto w = normalize_rows(random_matrix({3, 6}, rng));
    std::vector<std::size_t> labels{0, 2, 1, 2};
    double got = aam_softmax_loss(emb, labels, w, 30.0, 0.2).item();
    EXPECT_NEAR(got, aam_oracle(rows_of(emb), labels, rows_of(w), 30.0, 0.2), 1e-9);
  }
}

TEST(AamSoftmax, ZeroMarginIsSoftmaxCrossEntropy) {
  Rng rng(4);
  auto emb = normalize_rows(random_matrix({2, 5}, rng));
  auto w = normalize_rows(random_matrix({4, 5}, rng));
  double got = aam_softmax_loss(emb, {1, 3}, w, 10.0, 0.0).item();
  EXPECT_NEAR(got, aam_oracle(rows_of(emb), {1, 3}, rows_of(w), 10.0, 0.0), 1e-12);
}

TEST(AamSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  auto raw_e = random_matrix({3, 4}, rng);
  auto raw_w = random_matrix({3, 4}, rng);
  auto r = grad_check_params(
      [&]() { return aam_softmax_loss(normalize_rows(raw_e), {0, 1, 2}, normalize_rows(raw_w), 16.0, 0.2); },
      {raw_e, raw_w});
  EXPECT_TRUE(r.checkable);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(AamSoftmax, HandExampleAlignedClass) {
  // Embedding equal to class 0, orthogonal to class 1. Cosines are clamped to
  // 1 - 1e-7, so the logits are (32 (1 - 1e-7), 0); tolerance is one ulp of 32.
  Tensor<double> e(Shape{1, 2}, {1.0, 0.0});
  Tensor<double> w(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  const double top = 32.0 * (1.0 - 1e-7);
  EXPECT_NEAR(aam_softmax_loss(e, {0}, w, 32.0, 0.0).item(), std::log1p(std::exp(-top)), 1e-14);
  EXPECT_NEAR(aam_softmax_loss(e, {1}, w, 32.0, 0.0).item(), top + std::log1p(std::exp(-top)), 1e-12);
}

TEST(AamSoftmax, MarginNeverLowersLoss) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto emb = normalize_rows(random_matrix({5, 8}, rng));
    auto w = normalize_rows(random_matrix({4, 8}, rng));
    std::vector<std::size_t> labels{0, 1, 2, 3, 0};
    EXPECT_GE(aam_softmax_loss(emb, labels, w, 32.0, 0.2).item(), aam_softmax_loss(emb, labels, w, 32.0, 0.0).item());
  }
}

TEST(AamSoftmax, InvariantToJointRotation) {
  Rng rng(7);
  auto emb = normalize_rows(random_matrix({3, 4}, rng));
  auto w = normalize_rows(random_matrix({5, 4}, rng));
  // Product of two plane rotations is orthogonal.
  const double a = 0.7, b = -1.3;
  Tensor<double> r1(Shape{4, 4}, {std::cos(a), -std::sin(a), 0, 0, std::sin(a), std::cos(a), 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tensor<double> r2(Shape{4, 4}, {1, 0, 0, 0, 0, std::cos(b), 0, -std::sin(b), 0, 0, 1, 0, 0, std::sin(b), 0, std::cos(b)});
  auto rot = matmul(r1, r2);
  std::vector<std::size_t> labels{4, 0, 2};
  EXPECT_NEAR(aam_softmax_loss(matmul(emb, rot), labels, matmul(w, rot), 32.0, 0.2).item(),
              aam_softmax_loss(emb, labels, w, 32.0, 0.2).item(), 1e-10);
}

TEST(AamSoftmax, RejectsBadLabels) {
  auto e = Tensor<double>::ones({1, 2});
  auto w = Tensor<double>::ones({2, 2});
  EXPECT_THROW(aam_softmax_loss(e, {2}, w), std::out_of_range);
  EXPECT_THROW(aam_softmax_loss(e, {0, 1}, w), std::invalid_argument);
}

TEST(Encoder, EmbeddingIsUnitNormAndDeterministic) {
  auto model = EncoderModel<float>::init(small_arch(), small_features(), 7);
  CorpusConfig cc;
  cc.n_speakers = 2;
  cc.utts_per_speaker = 2;
  cc.eval_per_speaker = 1;
  auto corpus = synth_corpus(cc);
  auto a = embed(corpus.utterances[0].audio, model);
  auto b = embed(corpus.utterances[0].audio, model);
  EXPECT_EQ(a, b);
  double n = 0;
  for (double x : a) n += x * x;
  EXPECT_NEAR(std::sqrt(n), 1.0, 1e-5);
  EXPECT_NEAR(score(a, b), 1.0, 1e-5);
}

TEST(Encoder, DefaultArchitectureGivesUnitEmbeddingsForAnyLength) {
  auto model = EncoderModel<float>::init(EncoderConfig{}, FeatureConfig{}, 3);
  Rng rng(8);
  std::normal_distribution<double> n(0.0, 0.1);
  for (std::size_t len : {16000u, 32000u}) {
    Waveform w;
    w.samples.resize(len);
    for (auto& v : w.samples) v = n(rng);
    auto e = embed(w, model);
    ASSERT_EQ(e.size(), 64u);
    double norm = 0;
    for (double x : e) norm += x * x;
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-5);
  }
}

TEST(Encoder, ShortInputRejected) {
  auto model = EncoderModel<float>::init(small_arch(), small_features(), 7);
  Waveform w;
  w.samples.assign(500, 0.1);
  EXPECT_THROW(embed(w, model), InputTooShort);
}

TEST(Encoder, GradientWrtSamplesMatchesFiniteDifferences) {
  FeatureConfig f = small_features();
  auto model = EncoderModel<double>::init(small_arch(), f, 11);
  Rng rng(2);
  std::normal_distribution<double> n(0.0, 0.1);
  std::vector<double> x(1200);
  for (auto& v : x) v = n(rng);
  auto target = normalize_rows(random_matrix({1, 8}, rng));
  auto samples = Tensor<double>::vector(x);
  auto r = grad_check_params([&]() { return sum(model.embed_tensor(samples) * target); }, {samples}, 1e-6, 60);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Score, RejectsNonUnitEmbeddings) {
  EXPECT_THROW(score({1.0, 1.0}, {1.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(score({1.0}, {1.0, 0.0}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(score({1.0, 0.0}, {0.0, 1.0}), 0.0);
}

TEST(Encoder, CheckpointRoundTripPreservesEmbeddings) {
  auto model = EncoderModel<float>::init(small_arch(), small_features(), 9);
  Checkpoint ck;
  model.save(ck);
  auto path = temp_path("enc.pflw");
  ck.save(path);
  auto other = EncoderModel<float>::init(small_arch(), small_features(), 10);
  other.load(Checkpoint::load(path));
  Waveform w;
  Rng rng(1);
  std::normal_distribution<double> n(0.0, 0.1);
  w.samples.resize(8000);
  for (auto& v : w.samples) v = n(rng);
  EXPECT_EQ(embed(w, model), embed(w, other));
}

TEST(TrainAsv, SeparatesTwoSpeakersOnTrainingTrials) {
  CorpusConfig cc;
  cc.n_speakers = 2;
  cc.utts_per_speaker = 6;
  cc.eval_per_speaker = 2;
  cc.duration_s = 0.6;
  auto corpus = synth_corpus(cc);
  AsvTrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 4;
  auto result = train_asv<float>(corpus, small_arch(), small_features(), tc);
  ASSERT_EQ(result.loss_per_epoch.size(), 30u);
  EXPECT_LT(result.loss_per_epoch.back(), result.loss_per_epoch.front());

  auto train = corpus.split(Split::train);
  std::vector<Embedding> embs;
  for (const auto* u : train) embs.push_back(embed(u->audio, result.model));
  std::vector<LabeledScore> scores;
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t j = i + 1; j < train.size(); ++j)
      scores.push_back({score(embs[i], embs[j]), train[i]->speaker_id == train[j]->speaker_id});
  EXPECT_EQ(eer(scores), 0.0);
}

TEST(TrainAsv, DeterministicGivenSeed) {
  CorpusConfig cc;
  cc.n_speakers = 3;
  cc.utts_per_speaker = 3;
  cc.eval_per_speaker = 1;
  cc.duration_s = 0.6;
  auto corpus = synth_corpus(cc);
  AsvTrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 3;
  auto a = train_asv<float>(corpus, small_arch(), small_features(), tc);
  auto b = train_asv<float>(corpus, small_arch(), small_features(), tc);
  EXPECT_EQ(a.loss_per_epoch, b.loss_per_epoch);
  EXPECT_EQ(embed(corpus.utterances[0].audio, a.model), embed(corpus.utterances[0].audio, b.model));
  tc.seed = 99;
  auto c = train_asv<float>(corpus, small_arch(), small_features(), tc);
  EXPECT_NE(a.loss_per_epoch, c.loss_per_epoch);
}

TEST(TrainAsv, NoiseAugmentationIsSeededAndValidated) {
  CorpusConfig cc;
  cc.n_speakers = 3;
  cc.utts_per_speaker = 3;
  cc.eval_per_speaker = 1;
  cc.duration_s = 0.6;
  auto corpus = synth_corpus(cc);
  AsvTrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 3;
  auto plain = train_asv<float>(corpus, small_arch(), small_features(), tc);
  tc.augment_prob = 1.0;
  auto a = train_asv<float>(corpus, small_arch(), small_features(), tc);
  auto b = train_asv<float>(corpus, small_arch(), small_features(), tc);
  EXPECT_EQ(a.loss_per_epoch, b.loss_per_epoch);
  EXPECT_NE(a.loss_per_epoch, plain.loss_per_epoch);
  tc.augment_prob = 1.5;
  EXPECT_THROW(train_asv<float>(corpus, small_arch(), small_features(), tc), std::invalid_argument);
  tc.augment_prob = 0.5;
  tc.augment_snr_lo_db = 50;
  EXPECT_THROW(train_asv<float>(corpus, small_arch(), small_features(), tc), std::invalid_argument);
}

TEST(TrainAsv, NeedsTwoSpeakers) {
  CorpusConfig cc;
  cc.n_speakers = 2;
  cc.utts_per_speaker = 3;
  cc.eval_per_speaker = 1;
  auto corpus = synth_corpus(cc);
  const std::string keep = corpus.utterances[0].speaker_id;
  std::erase_if(corpus.utterances, [&](const Utterance& u) { return u.speaker_id != keep; });
  EXPECT_THROW(train_asv<float>(corpus, small_arch(), small_features(), {}), std::invalid_argument);
}

TEST(Trials, FileRoundTripAndValidation) {
  std::vector<Trial> trials{{true, "a", "b"}, {false, "a", "c"}};
  auto path = temp_path("trials.txt");
  write_trials(path, trials);
  auto back = read_trials(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(back[0].target);
  EXPECT_EQ(back[1].test, "c");
  {
    std::ofstream os(path);
    os << "2 a b\n";
  }
  EXPECT_THROW(read_trials(path), std::runtime_error);
  {
    std::ofstream os(path);
    os << "1 a a\n";
  }
  EXPECT_THROW(read_trials(path), std::runtime_error);
}

TEST(Trials, ScoresRoundTrip) {
  ScoreSet s{{{true, "e1", "t1"}, 0.25}, {{false, "e1", "t2"}, -0.5}};
  auto path = temp_path("scores.csv");
  write_scores(path, s);
  auto back = read_scores(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].trial.enroll, "e1");
  EXPECT_FALSE(back[1].trial.target);
  EXPECT_DOUBLE_EQ(back[0].score, 0.25);
}

TEST(Trials, TransformTouchesOnlyTestSide) {
  auto model = EncoderModel<float>::init(small_arch(), small_features(), 3);
  CorpusConfig cc;
  cc.n_speakers = 2;
  cc.utts_per_speaker = 2;
  cc.eval_per_speaker = 1;
  auto corpus = synth_corpus(cc);
  std::map<std::string, Waveform> audio;
  for (const auto& u : corpus.utterances) audio[u.utt_id] = u.audio;
  const auto& ids = corpus.utterances;
  std::vector<Trial> trials{{true, ids[0].utt_id, ids[1].utt_id}, {false, ids[0].utt_id, ids[2].utt_id}};
  std::vector<std::string> seen;
  auto lookup = [&](const std::string& id) {
    seen.push_back(id);
    return audio.at(id);
  };
  std::size_t transformed = 0;
  auto scores = evaluate_trials<float>(trials, lookup, model, [&](const Waveform& w, std::size_t) {
    ++transformed;
    return w;
  });
  EXPECT_EQ(transformed, 2u);
  ASSERT_EQ(scores.size(), 2u);
  // Enrollment embedding is computed once and reused.
  EXPECT_EQ(std::count(seen.begin(), seen.end(), ids[0].utt_id), 1);
  auto plain = evaluate_trials<float>(trials, lookup, model);
  EXPECT_DOUBLE_EQ(plain[0].score, scores[0].score);
}
