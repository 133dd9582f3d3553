#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pfl/checkpoint.hpp"
#include "pfl/fft.hpp"
#include "pfl/gradcheck.hpp"
#include "pfl/tensor.hpp"

using namespace pfl;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return T64(std::move(shape), std::move(v));
}

// Sliding-window reference for "same"-padded dilated cross-correlation.
std::vector<double> conv_oracle(const std::vector<double>& x, std::size_t cin, std::size_t len,
                                const std::vector<double>& w, std::size_t cout, std::size_t width, std::size_t d) {
  std::vector<double> out(cout * len, 0.0);
  long pad = static_cast<long>(d * (width - 1) / 2);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t t = 0; t < len; ++t) {
      double acc = 0.0;
      for (std::size_t i = 0; i < cin; ++i)
        for (std::size_t k = 0; k < width; ++k) {
          long src = static_cast<long>(t) + static_cast<long>(k * d) - pad;
          if (src >= 0 && src < static_cast<long>(len)) acc += w[(o * cin + i) * width + k] * x[i * len + src];
        }
      out[o * len + t] = acc;
    }
  return out;
}

}  // namespace

TEST(Elementwise, AddsVectors) {
  auto r = add(T64::vector({1, 2}), T64::vector({3, 4}));
  EXPECT_EQ(r.values(), (std::vector<double>{4, 6}));
}

TEST(Elementwise, MultiplyByOnesIsIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({3, 4}, rng);
  EXPECT_EQ(mul(x, T64::ones({3, 4})).values(), x.values());
}

TEST(Elementwise, SquareSumGradient) {
  T64 x(Shape{3}, {1, 2, 3}, true);
  auto loss = sum(x * x);
  backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Elementwise, DomainErrorsAreExplicit) {
  EXPECT_THROW(log(T64::vector({1.0, 0.0})), std::domain_error);
  EXPECT_THROW(log(T64::vector({-2.0})), std::domain_error);
  EXPECT_THROW(sqrt(T64::vector({-1e-3})), std::domain_error);
  EXPECT_THROW(div(T64::vector({1.0}), T64::vector({0.0})), std::domain_error);
  EXPECT_THROW(add(T64::zeros({2, 3}), T64::zeros({4})), ShapeError);
}

TEST(Broadcast, MatchesExplicitTilingExhaustively) {
  std::vector<Shape> shapes;
  for (std::size_t rank = 0; rank <= 3; ++rank) {
    std::size_t count = 1;
    for (std::size_t r = 0; r < rank; ++r) count *= 4;
    for (std::size_t c = 0; c < count; ++c) {
      Shape s;
      std::size_t v = c;
      for (std::size_t r = 0; r < rank; ++r) {
        s.push_back(v % 4 + 1);
        v /= 4;
      }
      shapes.push_back(s);
    }
  }
  std::mt19937_64 rng(7);
  std::size_t checked = 0;
  for (const auto& sa : shapes)
    for (const auto& sb : shapes) {
      // Expected output shape and tiling, computed independently.
      std::size_t rank = std::max(sa.size(), sb.size());
      Shape out(rank);
      bool ok = true;
      auto ext = [&](const Shape& s, std::size_t d) { return d + s.size() >= rank ? s[d + s.size() - rank] : 1; };
      for (std::size_t d = 0; d < rank; ++d) {
        std::size_t a = ext(sa, d), b = ext(sb, d);
        if (a != b && a != 1 && b != 1) ok = false;
        out[d] = std::max(a, b);
      }
      auto A = random_tensor(sa, rng), B = random_tensor(sb, rng);
      if (!ok) {
        EXPECT_THROW(add(A, B), ShapeError);
        continue;
      }
      auto sum_ab = add(A, B), prod_ab = mul(A, B);
      ASSERT_EQ(sum_ab.shape(), out);
      std::size_t total = numel_of(out);
      for (std::size_t lin = 0; lin < total; ++lin) {
        std::vector<std::size_t> idx(rank);
        std::size_t rem = lin;
        for (std::size_t d = rank; d-- > 0;) {
          idx[d] = rem % out[d];
          rem /= out[d];
        }
        auto flat = [&](const Shape& s) {
          std::size_t f = 0;
          for (std::size_t k = 0; k < s.size(); ++k) f = f * s[k] + idx[k + rank - s.size()] % s[k];
          return f;
        };
        double a = A.values()[flat(sa)], b = B.values()[flat(sb)];
        ASSERT_EQ(sum_ab.values()[lin], a + b);
        ASSERT_EQ(prod_ab.values()[lin], a * b);
      }
      ++checked;
    }
  EXPECT_GT(checked, 1000u);
}

TEST(Broadcast, GradientReducesOverStretchedAxes) {
  T64 bias(Shape{3, 1}, {1, 2, 3}, true);
  auto loss = sum(add(T64::ones({3, 5}), bias));
  backward(loss);
  for (double g : bias.grad()) EXPECT_EQ(g, 5.0);
}

TEST(Matmul, IdentityAndHandExample) {
  std::mt19937_64 rng(3);
  auto m = random_tensor({3, 4}, rng);
  T64 eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(eye, m).values(), m.values());
  auto r = matmul(T64(Shape{2, 2}, {1, 2, 3, 4}), T64(Shape{2, 1}, {1, 1}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.values(), (std::vector<double>{3, 7}));
  EXPECT_THROW(matmul(T64::zeros({2, 3}), T64::zeros({2, 3})), ShapeError);
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(4);
  auto a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 5; ++k) acc += a.values()[i * 5 + k] * b.values()[k * 3 + j];
      EXPECT_NEAR(c.values()[i * 3 + j], acc, 1e-6);
    }
}

TEST(Conv1d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({2, 9}, rng);
  T64 k(Shape{2, 2, 3}, {0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0});
  EXPECT_EQ(conv1d(x, k).values(), x.values());
}

TEST(Conv1d, SamePaddingPreservesLength) {
  for (std::size_t d = 1; d <= 4; ++d) {
    auto y = conv1d(T64::ones({1, 17}), T64::ones({2, 1, 3}), d);
    EXPECT_EQ(y.shape(), (Shape{2, 17}));
  }
  EXPECT_THROW(conv1d(T64::ones({2, 8}), T64::ones({1, 3, 3})), ShapeError);
  EXPECT_THROW(conv1d(T64::ones({1, 8}), T64::ones({1, 1, 3}), 0), std::invalid_argument);
}

TEST(Conv1d, MatchesSlidingWindowOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> width(1, 5), dil(1, 4), length(1, 32), chan(1, 3);
  for (int c = 0; c < 100; ++c) {
    std::size_t w = width(rng), d = dil(rng), len = length(rng), cin = chan(rng), cout = chan(rng);
    auto x = random_tensor({cin, len}, rng);
    auto k = random_tensor({cout, cin, w}, rng);
    auto got = conv1d(x, k, d);
    auto want = conv_oracle(x.values(), cin, len, k.values(), cout, w, d);
    ASSERT_EQ(got.numel(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(got.values()[i], want[i], 1e-6);
  }
}

TEST(Reduce, BasicValues) {
  EXPECT_EQ(sum(T64::vector({1, 2, 3})).item(), 6.0);
  const double a = 0.37;
  EXPECT_NEAR(logsumexp(T64::vector({a, a}), 0).item(), a + std::log(2.0), 1e-15);
  EXPECT_THROW(sum(T64::zeros({2, 2}), 2), std::out_of_range);
}

TEST(Reduce, MeanGradientIsUniform) {
  T64 x(Shape{4}, {3, -1, 2, 8}, true);
  auto m = mean(x, 0);
  backward(m);
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Reduce, MaxTiesRouteToLowestIndex) {
  T64 x(Shape{5}, {1, 4, 2, 4, 4}, true);
  auto m = max(x, 0);
  backward(m);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0, 0, 0}));
}

TEST(Backward, LinearLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  auto w = random_tensor({3, 4}, rng);
  auto x = random_tensor({4, 1}, rng);
  auto r = grad_check_params([&] { return sum(matmul(w, x)); }, {w});
  EXPECT_LT(r.max_rel_error, 1e-8);
  // d/dW sum(W x) = 1 x^T
  w.zero_grad();
  auto loss = sum(matmul(w, x));
  backward(loss);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(w.grad()[i * 4 + j], x.values()[j]);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
  T64 w(Shape{2}, {1, 2}, true);
  w.zero_grad();
  auto loss = T64::scalar(3.0);
  backward(loss);
  for (double g : w.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, ReuseAccumulates) {
  T64 x(Shape{}, {1.5}, true);
  auto f = x + x;
  backward(f);
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, RejectsNonScalarLoss) {
  T64 x(Shape{2}, {1, 2}, true);
  auto y = x * x;
  EXPECT_THROW(backward(y), ShapeError);
}

TEST(Backward, TraceIsTopologicalAndVisitedOnce) {
  std::mt19937_64 rng(9);
  auto w = random_tensor({3, 3}, rng).set_requires_grad(true);
  auto x = random_tensor({3, 1}, rng);
  auto h = tanh(matmul(w, x));
  auto loss = sum(h * h + h);
  auto order = topological_order(loss);
  std::unordered_set<const detail::Node<double>*> done;
  for (auto* node : order) {
    for (auto& p : node->parents) EXPECT_TRUE(done.count(p.get())) << "parent after child";
    done.insert(node);
  }
  EXPECT_EQ(trace(loss).back(), "sum");
  backward(loss, true);
  for (auto c : backward_visit_counts(loss)) EXPECT_EQ(c, 1u);
}

TEST(Backward, IsDeterministic) {
  std::mt19937_64 rng(10);
  auto w = random_tensor({6, 5}, rng).set_requires_grad(true);
  auto x = random_tensor({5, 7}, rng);
  auto loss = logsumexp(reshape(sigmoid(matmul(w, x)), {42}), 0);
  w.zero_grad();
  backward(loss, true);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss, true);
  std::vector<double> second(w.grad().begin(), w.grad().end());
  EXPECT_EQ(first, second);
}

TEST(GradCheck, QuadraticIsExact) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({6}, rng);
  auto r = grad_check([](const T64& v) { return sum(v * v); }, x);
  EXPECT_TRUE(r.checkable);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradCheck, KinkIsReportedAsNonCheckable) {
  auto r = grad_check([](const T64& v) { return sum(abs(v)); }, T64::vector({0.5, 0.0, -0.3}));
  EXPECT_FALSE(r.checkable);
}

TEST(GradCheck, NonFiniteValuesThrow) {
  EXPECT_THROW(grad_check([](const T64& v) { return sum(v * T64::scalar(std::nan(""))); }, T64::vector({1.0})),
               NonFiniteError);
}

// Every differentiable op, ten random points each.
TEST(GradCheck, EveryOpPassesAtRandomPoints) {
  using Fn = std::function<T64(const T64&)>;
  std::mt19937_64 rng(12);
  auto other = random_tensor({3, 4}, rng, 0.5, 1.5);
  auto col = random_tensor({3, 1}, rng, 0.5, 1.5);
  auto kern = random_tensor({2, 3, 3}, rng);
  auto mat = random_tensor({4, 2}, rng);
  auto lhs = random_tensor({2, 3}, rng);
  struct Case {
    const char* name;
    Fn f;
    double lo, hi;
  };
  std::vector<Case> cases = {
      {"add", [&](const T64& x) { return sum(square(x + col)); }, -1, 1},
      {"sub", [&](const T64& x) { return sum(square(other - x)); }, -1, 1},
      {"mul", [&](const T64& x) { return sum(x * other * x); }, -1, 1},
      {"div", [&](const T64& x) { return sum(col / x); }, 0.5, 2},
      {"div_num", [&](const T64& x) { return sum(square(x / other)); }, -1, 1},
      {"neg", [&](const T64& x) { return sum(square(-x)); }, -1, 1},
      {"exp", [&](const T64& x) { return sum(exp(x)); }, -1, 1},
      {"log", [&](const T64& x) { return sum(log(x)); }, 0.5, 2},
      {"sqrt", [&](const T64& x) { return sum(sqrt(x)); }, 0.5, 2},
      {"clamp", [&](const T64& x) { return sum(square(clamp(x, -0.7, 0.7))); }, -1, 1},
      {"tanh", [&](const T64& x) { return sum(tanh(x)); }, -1, 1},
      {"sigmoid", [&](const T64& x) { return sum(sigmoid(x)); }, -1, 1},
      {"swish", [&](const T64& x) { return sum(swish(x)); }, -1, 1},
      {"relu", [&](const T64& x) { return sum(square(relu(x))); }, -1, 1},
      {"matmul", [&](const T64& x) { return sum(square(matmul(x, mat))); }, -1, 1},
      {"matmul_rhs", [&](const T64& x) { return sum(square(matmul(lhs, x))); }, -1, 1},
      {"conv1d_x", [&](const T64& x) { return sum(square(conv1d(x, kern, 2))); }, -1, 1},
      {"conv1d_w", [&](const T64& x) { return sum(square(conv1d(other, reshape(slice_rows(reshape(x, {12}), 0, 12), {1, 3, 4}), 1, Padding::valid))); }, -1, 1},
      {"sum_axis", [&](const T64& x) { return sum(square(sum(x, 1))); }, -1, 1},
      {"mean_axis", [&](const T64& x) { return sum(square(mean(x, 0, true) - x)); }, -1, 1},
      {"max_axis", [&](const T64& x) { return sum(square(max(x, 1))); }, -1, 1},
      {"logsumexp", [&](const T64& x) { return sum(logsumexp(x, 1)); }, -1, 1},
      {"concat", [&](const T64& x) { return sum(square(concat<double>({x, x * other}))); }, -1, 1},
      {"frames", [&](const T64& x) { return sum(square(frames(reshape(x, {12}), 5, 3))); }, -1, 1},
      {"upsample", [&](const T64& x) { return sum(square(upsample_linear(x, 11, 1.0, 3.0))); }, -1, 1},
      {"power_spectrum", [&](const T64& x) { return sum(log(add_scalar(power_spectrum(x, 8), 1.0))); }, -1, 1},
  };
  for (const auto& c : cases) {
    for (int rep = 0; rep < 10; ++rep) {
      auto x = random_tensor({3, 4}, rng, c.lo, c.hi);
      auto r = grad_check(c.f, x, 1e-5);
      EXPECT_LT(r.max_rel_error, 1e-4) << c.name;
    }
  }
}

TEST(PowerSpectrum, MatchesDirectDft) {
  std::mt19937_64 rng(13);
  auto x = random_tensor({2, 6}, rng);
  auto p = power_spectrum(x, 8);
  ASSERT_EQ(p.shape(), (Shape{2, 5}));
  for (std::size_t f = 0; f < 2; ++f)
    for (std::size_t k = 0; k < 5; ++k) {
      double re = 0, im = 0;
      for (std::size_t n = 0; n < 6; ++n) {
        double ang = -2.0 * M_PI * static_cast<double>(k * n) / 8.0;
        re += x.values()[f * 6 + n] * std::cos(ang);
        im += x.values()[f * 6 + n] * std::sin(ang);
      }
      EXPECT_NEAR(p.values()[f * 5 + k], re * re + im * im, 1e-12);
    }
}

TEST(NoGrad, GuardSuppressesTrace) {
  T64 w(Shape{2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = w * w;
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(trace(y).empty());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(14);
  Checkpoint ck;
  Tensor<float> a(Shape{2, 3}, {1.5f, -0.0f, 3.25e-30f, std::numeric_limits<float>::denorm_min(), 7.f, -1e30f});
  ck.put("enc/a", a);
  ck.put("b", random_tensor({4}, rng));
  ck.put("scalar", T64::scalar(M_PI));
  ck.put_bytes("meta", "{\"T\":100}");
  auto blob = ck.serialize();
  auto back = Checkpoint::deserialize(blob);
  EXPECT_EQ(back.serialize(), blob);
  auto a2 = back.at("enc/a").tensor<float>();
  EXPECT_EQ(a2.shape(), a.shape());
  EXPECT_EQ(std::memcmp(a2.data().data(), a.data().data(), sizeof(float) * 6), 0);
  EXPECT_EQ(back.at("meta").bytes, "{\"T\":100}");
  EXPECT_EQ(blob.substr(0, 4), "PFLW");
  EXPECT_EQ(static_cast<unsigned char>(blob[4]), 1);  // version, little-endian
  EXPECT_EQ(static_cast<unsigned char>(blob[5]), 0);
}

TEST(Checkpoint, RejectsCorruptContainers) {
  Checkpoint ck;
  ck.put("x", T64::vector({1, 2, 3}));
  auto blob = ck.serialize();
  EXPECT_THROW(Checkpoint::deserialize("PFLX" + blob.substr(4)), FormatError);
  EXPECT_THROW(Checkpoint::deserialize(blob.substr(0, blob.size() - 3)), FormatError);
  EXPECT_THROW(Checkpoint::deserialize(blob + "x"), FormatError);
}
