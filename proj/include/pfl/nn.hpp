#pragma once

// Parameter initialization and first-order optimizers.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "pfl/checkpoint.hpp"
#include "pfl/rng.hpp"
#include "pfl/tensor.hpp"

namespace pfl {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>*>>;

/// Uniform(-bound, bound) with bound = gain * sqrt(3 / fan_in).
template <typename T>
Tensor<T> init_uniform(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
void save_params(Checkpoint& ck, const std::string& prefix, const NamedParams<T>& params) {
  for (const auto& [name, t] : params) ck.put(prefix + name, *t);
}

template <typename T>
void load_params(const Checkpoint& ck, const std::string& prefix, const NamedParams<T>& params) {
  for (const auto& [name, t] : params) {
    auto loaded = ck.at(prefix + name).template tensor<T>();
    if (loaded.shape() != t->shape())
      throw FormatError("checkpoint entry " + prefix + name + " has shape " + to_string(loaded.shape()) +
                        ", model expects " + to_string(t->shape()));
    *t = Tensor<T>(loaded.shape(), loaded.values(), true);
  }
}

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double lr = 1e-2;
  double momentum = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
};

template <typename T>
class Optimizer {
 public:
  Optimizer(NamedParams<T> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr) {
    for (auto& [name, t] : params_) {
      state1_.emplace_back(t->numel(), 0.0);
      state2_.emplace_back(cfg_.kind == OptimizerKind::adam ? t->numel() : 0, 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t->zero_grad();
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  /// Global gradient norm before clipping.
  double step() {
    ++steps_;
    double sq = 0.0;
    for (auto& [name, t] : params_)
      if (t->has_grad())
        for (T g : t->grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    const double scale = (cfg_.grad_clip > 0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& t = *params_[p].second;
      if (!t.has_grad()) continue;
      auto data = t.data();
      auto grad = t.grad();
      auto& m = state1_[p];
      auto& v = state2_[p];
      for (std::size_t i = 0; i < data.size(); ++i) {
        double g = scale * grad[i] + cfg_.weight_decay * data[i];
        if (cfg_.kind == OptimizerKind::sgd_momentum) {
          m[i] = cfg_.momentum * m[i] + g;
          data[i] = static_cast<T>(data[i] - lr_ * m[i]);
        } else {
          m[i] = cfg_.momentum * m[i] + (1 - cfg_.momentum) * g;
          v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
          const double mh = m[i] / (1 - std::pow(cfg_.momentum, steps_));
          const double vh = v[i] / (1 - std::pow(cfg_.beta2, steps_));
          data[i] = static_cast<T>(data[i] - lr_ * mh / (std::sqrt(vh) + cfg_.eps));
        }
      }
    }
    return norm;
  }

 private:
  NamedParams<T> params_;
  OptimizerConfig cfg_;
  double lr_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> state1_, state2_;
};

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}
inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

}  // namespace pfl
