#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "pfl/defenses.hpp"

using namespace pfl;

namespace {

Waveform wave(std::vector<double> v) {
  Waveform w;
  w.samples = std::move(v);
  return w;
}

Waveform random_wave(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.8, 0.8);
  Waveform w;
  w.samples.resize(n);
  for (auto& v : w.samples) v = u(rng);
  return w;
}

double at_replicated(const std::vector<double>& x, long i) {
  return x[std::clamp<long>(i, 0, static_cast<long>(x.size()) - 1)];
}

std::vector<double> median_oracle(const std::vector<double>& x, std::size_t k) {
  std::vector<double> out;
  long h = static_cast<long>(k / 2);
  for (long i = 0; i < static_cast<long>(x.size()); ++i) {
    std::vector<double> win;
    for (long j = i - h; j <= i + h; ++j) win.push_back(at_replicated(x, j));
    std::sort(win.begin(), win.end());
    out.push_back(win[win.size() / 2]);
  }
  return out;
}

std::vector<double> conv_oracle(const std::vector<double>& x, const std::vector<double>& k) {
  std::vector<double> out;
  long h = static_cast<long>(k.size() / 2);
  for (long i = 0; i < static_cast<long>(x.size()); ++i) {
    double acc = 0;
    for (long j = -h; j <= h; ++j) acc += k[static_cast<std::size_t>(j + h)] * at_replicated(x, i + j);
    out.push_back(acc);
  }
  return out;
}

}  // namespace

TEST(MedianFilter, IdentityConstantAndOracle) {
  auto x = random_wave(200, 1);
  EXPECT_EQ(median_filter(x, 1).samples, x.samples);
  auto c = wave(std::vector<double>(50, 0.3));
  EXPECT_EQ(median_filter(c, 5).samples, c.samples);
  auto alt = wave({0, 1, 0, 1, 0});
  EXPECT_EQ(median_filter(alt, 3).samples, median_oracle(alt.samples, 3));
  for (std::size_t k : {3u, 5u, 9u}) EXPECT_EQ(median_filter(x, k).samples, median_oracle(x.samples, k));
  EXPECT_THROW(median_filter(x, 4), std::invalid_argument);
  EXPECT_THROW(median_filter(x, 0), std::invalid_argument);
}

TEST(MeanFilter, ConstantAndOracle) {
  auto c = wave(std::vector<double>(40, -0.2));
  for (double v : mean_filter(c, 7).samples) EXPECT_NEAR(v, -0.2, 1e-15);
  auto x = random_wave(300, 2);
  auto got = mean_filter(x, 5).samples;
  auto want = conv_oracle(x.samples, std::vector<double>(5, 0.2));
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  EXPECT_THROW(mean_filter(x, 2), std::invalid_argument);
}

TEST(GaussianFilter, KernelAndImpulseResponse) {
  auto k = gaussian_kernel(1.0);
  ASSERT_EQ(k.size(), 7u);
  double total = 0;
  for (double v : k) total += v;
  EXPECT_NEAR(total, 1.0, 1e-15);
  EXPECT_EQ(gaussian_kernel(1.5).size(), 2 * 5 + 1u);

  std::vector<double> imp(21, 0.0);
  imp[10] = 1.0;
  auto out = gaussian_filter(wave(imp), 1.0).samples;
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(out[7 + i], k[i], 1e-15);
  EXPECT_EQ(out[0], 0.0);

  auto x = random_wave(256, 3);
  auto got = gaussian_filter(x, 2.0).samples;
  auto want = conv_oracle(x.samples, gaussian_kernel(2.0));
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
  EXPECT_THROW(gaussian_kernel(0.0), std::invalid_argument);
}

TEST(Filters, ShiftEquivariantInInterior) {
  auto x = random_wave(400, 4);
  const std::size_t shift = 17;
  Waveform shifted = x;
  std::rotate(shifted.samples.begin(), shifted.samples.begin() + shift, shifted.samples.end());
  auto check = [&](auto&& f, std::size_t margin) {
    auto a = f(x).samples, b = f(shifted).samples;
    for (std::size_t i = margin; i + margin + shift < x.size(); ++i) EXPECT_EQ(b[i], a[i + shift]);
  };
  check([](const Waveform& w) { return median_filter(w, 5); }, 3);
  check([](const Waveform& w) { return mean_filter(w, 5); }, 3);
  check([](const Waveform& w) { return gaussian_filter(w, 1.0); }, 4);
}

TEST(AddNoise, StatisticsAndDeterminism) {
  Waveform z = wave(std::vector<double>(16000, 0.0));
  EXPECT_EQ(add_noise_defense(z, 0.0, 1), z);
  auto out = add_noise_defense(z, 0.01, 7);
  double s = 0;
  for (double v : out.samples) s += v * v;
  double sd = std::sqrt(s / out.size());
  EXPECT_NEAR(sd, 0.01, 3 * 0.01 / std::sqrt(2.0 * 16000));
  EXPECT_EQ(out, add_noise_defense(z, 0.01, 7));
  EXPECT_NE(out, add_noise_defense(z, 0.01, 8));
  auto loud = add_noise_defense(wave(std::vector<double>(100, 0.999)), 0.05, 2);
  for (double v : loud.samples) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_THROW(add_noise_defense(z, -1.0, 1), std::invalid_argument);
}

TEST(DefenseSpec, IdsAndDispatch) {
  auto x = random_wave(500, 5);
  DefenseSpec d;
  EXPECT_EQ(d.id(), "none");
  EXPECT_EQ(apply_defense(x, d, 0), x);
  d.kind = DefenseKind::median;
  EXPECT_EQ(d.id(), "median_k3");
  EXPECT_EQ(apply_defense(x, d, 0), median_filter(x, 3));
  d.kind = DefenseKind::add_noise;
  d.noise_sigma = 0.005;
  EXPECT_EQ(d.id(), "noise_s0.005");
  EXPECT_EQ(apply_defense(x, d, 3), add_noise_defense(x, 0.005, 3));
  d.kind = DefenseKind::dap;
  EXPECT_EQ(d.id(), "dap_t2_full");
  EXPECT_THROW(apply_defense(x, d, 0), ModelNotTrained);
  EXPECT_EQ(parse_defense_kind("gaussian_filter"), DefenseKind::gaussian_filter);
  EXPECT_THROW(parse_defense_kind("wavlm"), std::invalid_argument);
  for (auto k : {DefenseKind::median, DefenseKind::mean, DefenseKind::gaussian_filter, DefenseKind::add_noise}) {
    d.kind = k;
    EXPECT_EQ(apply_defense(x, d, 1).size(), x.size());
  }
}
