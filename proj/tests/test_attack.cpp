#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "pfl/attack.hpp"
#include "pfl/gradcheck.hpp"

using namespace pfl;

namespace {

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

struct Victim {
  SpeakerCorpus corpus;
  EncoderModel<float> model;
};

const Victim& victim() {
  static const Victim v = [] {
    CorpusConfig cc;
    cc.n_speakers = 2;
    cc.utts_per_speaker = 6;
    cc.eval_per_speaker = 2;
    cc.duration_s = 0.5;
    auto corpus = synth_corpus(cc);
    AsvTrainConfig tc;
    tc.epochs = 30;
    tc.batch_size = 4;
    auto model = train_asv<float>(corpus, small_arch(), small_features(), tc).model;
    return Victim{std::move(corpus), std::move(model)};
  }();
  return v;
}

const Utterance& utt(std::size_t i) { return victim().corpus.utterances[i]; }

}  // namespace

TEST(AttackLoss, SelfTargetTrialIsPlusOne) {
  const auto& v = victim();
  auto e = embed(utt(0).audio, v.model);
  EXPECT_NEAR(attack_loss(utt(0).audio, e, true, v.model), 1.0, 1e-5);
  EXPECT_NEAR(attack_loss(utt(0).audio, e, false, v.model), -1.0, 1e-5);
}

TEST(AttackLoss, GradientMatchesFiniteDifferencesIn64Bit) {
  auto model = victim().model.cast<double>();
  auto enroll = embed(utt(0).audio, model);
  std::vector<double> x(utt(1).audio.samples.begin(), utt(1).audio.samples.begin() + 2000);
  auto samples = Tensor<double>::vector(x);
  auto r = grad_check_params([&]() { return attack_loss(samples, enroll, true, model); }, {samples}, 1e-6, 80);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Attack, ZeroStepsIsIdentity) {
  const auto& v = victim();
  auto enroll = embed(utt(0).audio, v.model);
  for (auto method : {AttackMethod::pgd_l2, AttackMethod::bim_linf}) {
    AttackConfig cfg;
    cfg.method = method;
    cfg.steps = 0;
    auto ex = run_attack(utt(1).audio, enroll, true, v.model, cfg);
    EXPECT_EQ(ex.perturbed, utt(1).audio);
    EXPECT_EQ(linf_norm(ex.perturbation), 0.0);
  }
}

TEST(Attack, BimBudgetIsExactAndScoreDrops) {
  const auto& v = victim();
  auto enroll = embed(utt(0).audio, v.model);
  AttackConfig cfg;
  cfg.steps = 40;
  auto pcm = decode_wav(encode_wav(utt(1).audio));
  auto ex = bim_linf(pcm, enroll, true, v.model, cfg);
  EXPECT_LE(linf_norm(ex.perturbation), 30.0 / 32768.0);
  EXPECT_GT(linf_norm(ex.perturbation), 0.0);
  EXPECT_LT(ex.final_score, ex.initial_score);
  for (std::size_t i = 0; i < ex.perturbed.size(); ++i) {
    EXPECT_NEAR(ex.perturbed.samples[i], ex.original.samples[i] + ex.perturbation.samples[i], 1e-7);
    ASSERT_LE(std::abs(ex.perturbed.samples[i]), 1.0);
  }
  // Starting from PCM16 audio the example stays on the 16-bit grid.
  auto back = decode_wav(encode_wav(ex.perturbed));
  EXPECT_EQ(back.samples, ex.perturbed.samples);
}

TEST(Attack, NontargetTrialScoreRises) {
  const auto& v = victim();
  const auto& spk = utt(0).speaker_id;
  std::size_t other = 0;
  while (utt(other).speaker_id == spk) ++other;
  auto enroll = embed(utt(0).audio, v.model);
  AttackConfig cfg;
  cfg.steps = 20;
  auto ex = pgd_l2(utt(other).audio, enroll, false, v.model, cfg);
  EXPECT_GT(ex.final_score, ex.initial_score);
}

TEST(Attack, PgdBudgetHolds) {
  const auto& v = victim();
  auto enroll = embed(utt(0).audio, v.model);
  AttackConfig cfg;
  cfg.epsilon = 5;
  cfg.steps = 30;
  for (bool quantize : {true, false}) {
    cfg.quantize = quantize;
    auto ex = pgd_l2(utt(2).audio, enroll, true, v.model, cfg);
    double radius = cfg.l2_radius(ex.original.size());
    EXPECT_LE(l2_norm(ex.perturbation), radius * (1 + 1e-6));
    EXPECT_GT(l2_norm(ex.perturbation), 0.5 * radius);
  }
}

TEST(Attack, DeterministicAndEnrollUntouched) {
  const auto& v = victim();
  Waveform enroll_audio = utt(0).audio;
  auto enroll = embed(enroll_audio, v.model);
  AttackConfig cfg;
  cfg.steps = 5;
  auto a = pgd_l2(utt(1).audio, enroll, true, v.model, cfg);
  auto b = pgd_l2(utt(1).audio, enroll, true, v.model, cfg);
  EXPECT_EQ(a.perturbed, b.perturbed);
  EXPECT_EQ(enroll_audio, utt(0).audio);
}

TEST(Attack, SnapshotsMatchSeparateRuns) {
  const auto& v = victim();
  auto enroll = embed(utt(0).audio, v.model);
  AttackConfig cfg;
  cfg.method = AttackMethod::bim_linf;
  auto snaps = attack_snapshots(utt(1).audio, enroll, true, v.model, cfg, {6, 3});
  ASSERT_EQ(snaps.size(), 2u);
  EXPECT_EQ(snaps[0].steps, 3u);
  cfg.steps = 3;
  EXPECT_EQ(run_attack(utt(1).audio, enroll, true, v.model, cfg).perturbed, snaps[0].perturbed);
  cfg.steps = 6;
  EXPECT_EQ(run_attack(utt(1).audio, enroll, true, v.model, cfg).perturbed, snaps[1].perturbed);
}

TEST(Attack, PgdApproachesQuadraticMinimumMonotonically) {
  Waveform w;
  w.samples.assign(64, 0.0);
  std::vector<double> goal(64);
  for (std::size_t i = 0; i < goal.size(); ++i) goal[i] = 0.01 * std::sin(0.3 * i);
  auto grad = [&](const std::vector<double>& x) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] - goal[i];
    return g;
  };
  AttackConfig cfg;
  cfg.quantize = false;
  cfg.alpha = 20;
  cfg.epsilon = 400;
  std::vector<std::size_t> steps(40);
  for (std::size_t k = 0; k < steps.size(); ++k) steps[k] = k;
  auto path = perturbation_path(w, grad, cfg, steps);
  auto dist = [&](const std::vector<double>& d) {
    double s = 0;
    for (std::size_t i = 0; i < d.size(); ++i) s += (d[i] - goal[i]) * (d[i] - goal[i]);
    return std::sqrt(s);
  };
  const double step_len = cfg.alpha_unit() * 8.0;
  for (std::size_t k = 1; k < path.size(); ++k) {
    double before = dist(path[k - 1]), after = dist(path[k]);
    // Each step moves straight toward the goal: progress is the full step
    // length until the goal is within one step.
    if (before > step_len) EXPECT_NEAR(before - after, step_len, 1e-12) << k;
    else EXPECT_LE(after, step_len + 1e-12) << k;
  }
}

TEST(Attack, PgdStopsOnTheBall) {
  Waveform w;
  w.samples.assign(16, 0.0);
  auto grad = [](const std::vector<double>& x) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] - 1.0;
    return g;
  };
  AttackConfig cfg;
  cfg.quantize = false;
  cfg.epsilon = 3;
  cfg.steps = 50;
  auto d = perturbation_path(w, grad, cfg, {50}).front();
  double n = 0;
  for (double x : d) n += x * x;
  EXPECT_NEAR(std::sqrt(n), cfg.l2_radius(16), 1e-12);
  for (double x : d) EXPECT_NEAR(x, cfg.epsilon_unit(), 1e-12);
}

TEST(Attack, ZeroGradientSkipsStep) {
  Waveform w;
  w.samples.assign(8, 0.1);
  auto zero = [](const std::vector<double>& x) { return std::vector<double>(x.size(), 0.0); };
  AttackConfig cfg;
  auto d = perturbation_path(w, zero, cfg, {10}).front();
  for (double x : d) EXPECT_EQ(x, 0.0);
}

TEST(Attack, ZeroLengthRejected) {
  Waveform w;
  auto zero = [](const std::vector<double>& x) { return x; };
  EXPECT_THROW(perturbation_path(w, zero, {}, {1}), std::invalid_argument);
}

TEST(MatchedNoise, SnrMatchesPerturbation) {
  const auto& v = victim();
  auto enroll = embed(utt(0).audio, v.model);
  AttackConfig cfg;
  cfg.steps = 10;
  auto ex = pgd_l2(utt(1).audio, enroll, true, v.model, cfg);
  auto g = genuine_with_matched_noise(utt(1).audio, ex, 3);
  double adv_snr = snr_db(utt(1).audio, ex.perturbed);
  EXPECT_NEAR(snr_db(utt(1).audio, g), adv_snr, 0.5);

  AdversarialExample none = ex;
  std::fill(none.perturbation.samples.begin(), none.perturbation.samples.end(), 0.0);
  EXPECT_EQ(genuine_with_matched_noise(utt(1).audio, none, 3), utt(1).audio);
}

TEST(AttackManifest, RoundTrip) {
  AttackConfig cfg;
  AdversarialExample ex;
  ex.original.samples = {0.5, -0.5};
  ex.perturbation.samples = {0.001, 0.0};
  ex.steps = 7;
  ex.final_score = 0.25;
  auto rec = make_record("t0001", cfg, ex);
  auto path = (std::filesystem::temp_directory_path() / "pfl_attack_manifest.csv").string();
  write_attack_manifest(path, {rec});
  auto back = read_attack_manifest(path);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].trial_id, "t0001");
  EXPECT_EQ(back[0].method, "pgd_l2");
  EXPECT_EQ(back[0].steps, 7u);
  EXPECT_NEAR(back[0].perturbation_linf, 0.001, 1e-12);
  EXPECT_NEAR(back[0].snr_db, 10 * std::log10(0.25 / 0.0000005), 1e-3);
}
