#pragma once

// Diffusion-based purification: denoiser training, truncated forward noising
// to t*, and reverse denoising with the full chain or the six-step fast sampler.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfl/audio.hpp"
#include "pfl/denoiser.hpp"
#include "pfl/diffusion.hpp"
#include "pfl/rng.hpp"

namespace pfl {

enum class Sampler { full_reverse, fast_six_step };

inline const char* sampler_name(Sampler s) { return s == Sampler::full_reverse ? "full_reverse" : "fast_six_step"; }
inline Sampler parse_sampler(const std::string& s) {
  if (s == "full_reverse" || s == "full") return Sampler::full_reverse;
  if (s == "fast_six_step" || s == "fast") return Sampler::fast_six_step;
  throw std::invalid_argument("unknown sampler '" + s + "'");
}

struct ScheduleConfig {
  std::size_t T = 100;
  double beta_lo = 1e-4;
  double beta_hi = 0.035;
  NoiseSchedule build() const { return make_linear_schedule(T, beta_lo, beta_hi); }
};

struct PurifierConfig {
  std::size_t t_star = 2;
  Sampler sampler = Sampler::full_reverse;
  FastSchedule fast;
  std::uint64_t seed = 0;
};

class ModelNotTrained : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Purifier {
  ScheduleConfig schedule_cfg;
  NoiseSchedule schedule;
  DenoiserModel<T> model;
  bool trained = false;

  static Purifier init(const ScheduleConfig& sc, const DenoiserConfig& dc, std::uint64_t seed) {
    return {sc, sc.build(), DenoiserModel<T>::init(dc, seed), false};
  }

  void save(Checkpoint& ck) const {
    model.save(ck);
    nlohmann::json meta = {{"T", schedule_cfg.T},
                           {"beta_lo", schedule_cfg.beta_lo},
                           {"beta_hi", schedule_cfg.beta_hi},
                           {"channels", model.cfg.channels},
                           {"blocks", model.cfg.blocks},
                           {"dilation_cycle", model.cfg.dilation_cycle},
                           {"step_embedding", model.cfg.step_embedding},
                           {"step_hidden", model.cfg.step_hidden},
                           {"n_mels", model.cfg.n_mels},
                           {"trained", trained}};
    ck.put_bytes("dap/meta", meta.dump());
  }

  static Purifier load(const Checkpoint& ck) {
    if (!ck.contains("dap/meta")) throw FormatError("checkpoint has no purifier metadata (dap/meta)");
    auto meta = nlohmann::json::parse(ck.at("dap/meta").bytes);
    ScheduleConfig sc{meta.at("T").get<std::size_t>(), meta.at("beta_lo").get<double>(), meta.at("beta_hi").get<double>()};
    DenoiserConfig dc;
    dc.channels = meta.at("channels");
    dc.blocks = meta.at("blocks");
    dc.dilation_cycle = meta.at("dilation_cycle");
    dc.step_embedding = meta.at("step_embedding");
    dc.step_hidden = meta.at("step_hidden");
    dc.n_mels = meta.at("n_mels");
    auto p = init(sc, dc, 0);
    p.model.load(ck);
    p.trained = meta.at("trained").get<bool>();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Training objective.

/// ||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t, c)||^2 for one item.
template <typename T>
Tensor<T> diffusion_loss(const DenoiserModel<T>& model, const NoiseSchedule& s, const std::vector<double>& x0,
                         std::size_t t, const std::vector<double>& eps, const Tensor<T>& cond) {
  auto xt = q_sample(x0, t, eps, s);
  auto pred = model.forward(Tensor<T>::vector(std::vector<T>(xt.begin(), xt.end())), static_cast<double>(t), cond);
  Tensor<T> target(Shape{eps.size()}, std::vector<T>(eps.begin(), eps.end()));
  return sum(square(target - pred));
}

/// Same objective for an arbitrary predictor, evaluated in double.
inline double diffusion_loss_value(const EpsPredictor& eps_fn, const NoiseSchedule& s, const std::vector<double>& x0,
                                   std::size_t t, const std::vector<double>& eps) {
  auto xt = q_sample(x0, t, eps, s);
  auto pred = eps_fn(xt, static_cast<double>(t));
  double acc = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) acc += (eps[i] - pred[i]) * (eps[i] - pred[i]);
  return acc;
}

enum class DapTrainMode { clean, adversarial };

inline const char* dap_mode_name(DapTrainMode m) { return m == DapTrainMode::clean ? "clean" : "adversarial"; }
inline DapTrainMode parse_dap_mode(const std::string& s) {
  if (s == "clean") return DapTrainMode::clean;
  if (s == "adversarial") return DapTrainMode::adversarial;
  throw std::invalid_argument("unknown DAP training mode '" + s + "'");
}

/// One training waveform. The conditioner is computed from `condition`
/// (the clean audio itself in clean mode, its adversarial version otherwise);
/// the diffusion target is always `clean`.
struct DapExample {
  std::vector<double> clean;
  std::vector<double> condition;
};

struct DapTrainConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 2;
  std::size_t crop_samples = 4000;
  OptimizerConfig optimizer{OptimizerKind::sgd_momentum, 2e-4, 0.9};
  std::uint64_t seed = 2;
};

struct DapTrainResult {
  std::vector<double> loss;  // per iteration, mean over the batch
};

/// One optimizer update: t ~ U{1..T} and eps ~ N(0, I) per item.
template <typename T>
double train_step(Purifier<T>& p, Optimizer<T>& opt, const std::vector<const DapExample*>& batch,
                  std::size_t crop_samples, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  std::uniform_int_distribution<std::size_t> step_d(1, p.schedule.T);
  opt.zero_grad();
  std::vector<Tensor<T>> losses;
  double total = 0.0;
  for (const auto* ex : batch) {
    const std::size_t n = ex->clean.size();
    const std::size_t len = std::min(crop_samples, n);
    std::uniform_int_distribution<std::size_t> off_d(0, n - len);
    const std::size_t off = off_d(rng);
    std::vector<double> x0(ex->clean.begin() + off, ex->clean.begin() + off + len);
    std::vector<double> c(ex->condition.begin() + off, ex->condition.begin() + off + len);
    const std::size_t t = step_d(rng);
    auto eps = gaussian_vector<double>(rng, len, 1.0);
    auto loss = diffusion_loss(p.model, p.schedule, x0, t, eps, conditioner<T>(c, p.model.cfg));
    total += loss.item();
    losses.push_back(reshape(loss, {1}));
  }
  auto mean_loss = mean(concat(losses));
  backward(mean_loss);
  opt.step();
  return total / static_cast<double>(batch.size());
}

template <typename T>
DapTrainResult train_dap(Purifier<T>& p, const std::vector<DapExample>& data, const DapTrainConfig& cfg,
                         const std::function<void(std::size_t, double)>& progress = {}) {
  if (data.empty()) throw std::invalid_argument("train_dap: no training audio");
  for (const auto& ex : data)
    if (ex.clean.size() != ex.condition.size() || ex.clean.empty())
      throw std::invalid_argument("train_dap: clean/condition lengths differ or are empty");
  Rng rng(derive_seed(cfg.seed, {fnv1a("dap-train")}));
  Optimizer<T> opt(p.model.parameters(), cfg.optimizer);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  DapTrainResult result;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<const DapExample*> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(&data[pick(rng)]);
    result.loss.push_back(train_step(p, opt, batch, cfg.crop_samples, rng));
    if (progress) progress(it, result.loss.back());
  }
  p.trained = true;
  return result;
}

// ---------------------------------------------------------------------------
// Sampling and purification.

struct SampleResult {
  std::vector<double> samples;
  std::size_t model_evaluations = 0;
};

/// Fast reverse updates with gamma as the step variances, running fast steps
/// `steps`..1 from x; the predictor sees each step's aligned training step.
inline SampleResult fast_sample(std::vector<double> x, std::size_t steps, const EpsPredictor& eps,
                                const FastSchedule& fast, const NoiseSchedule& s, Rng& rng) {
  const auto aligned = fast.aligned_steps(s);
  if (steps > fast.gamma.size()) throw std::invalid_argument("fast_sample: more steps than the fast schedule has");
  const auto ab = fast.alpha_bar();
  SampleResult r;
  for (std::size_t k = steps; k >= 1; --k) {
    const double g = fast.gamma[k - 1];
    const double a = 1.0 - g;
    const double ab_k = ab[k - 1];
    auto e = eps(x, static_cast<double>(aligned[k - 1]));
    ++r.model_evaluations;
    const double coef = g / std::sqrt(1.0 - ab_k);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - coef * e[i]) / std::sqrt(a);
    if (k > 1) {
      const double sigma = std::sqrt((1.0 - ab[k - 2]) / (1.0 - ab_k) * g);
      auto z = gaussian_vector<double>(rng, x.size(), 1.0);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += sigma * z[i];
    }
  }
  r.samples = std::move(x);
  return r;
}

/// Full reverse chain from step t_start down to 1.
inline SampleResult reverse_chain(std::vector<double> x, std::size_t t_start, const EpsPredictor& eps,
                                  const NoiseSchedule& s, Rng& rng) {
  SampleResult r;
  for (std::size_t t = t_start; t >= 1; --t) {
    std::vector<double> z;
    if (t > 1) z = gaussian_vector<double>(rng, x.size(), 1.0);
    x = reverse_step(x, t, eps, s, z);
    ++r.model_evaluations;
  }
  r.samples = std::move(x);
  return r;
}

/// Number of fast steps whose aligned training step is within t*.
inline std::size_t fast_steps_within(const FastSchedule& fast, const NoiseSchedule& s, std::size_t t_star) {
  std::size_t k = 0;
  for (std::size_t t : fast.aligned_steps(s))
    if (t <= t_star) ++k;
  return std::max<std::size_t>(k, 1);
}

/// Diffuse to t* and denoise back, conditioned on the input's own spectrogram.
/// Output has the input's length and is clipped to [-1, 1].
template <typename T>
SampleResult purify_samples(const std::vector<double>& x, const Purifier<T>& p, const PurifierConfig& cfg,
                            std::uint64_t seed, std::uint32_t sample_rate = 16000) {
  if (!p.trained) throw ModelNotTrained("purify requires a trained purifier checkpoint");
  p.schedule.check(cfg.t_star);
  if (x.empty()) throw std::invalid_argument("purify: empty input");
  Rng rng(derive_seed(cfg.seed, {seed, fnv1a("purify")}));
  const auto cond = conditioner<T>(x, p.model.cfg, sample_rate);
  EpsPredictor eps = [&](const std::vector<double>& xt, double t) { return p.model.predict(xt, t, cond); };
  auto noise = gaussian_vector<double>(rng, x.size(), 1.0);
  SampleResult r;
  if (cfg.sampler == Sampler::full_reverse) {
    r = reverse_chain(q_sample(x, cfg.t_star, noise, p.schedule), cfg.t_star, eps, p.schedule, rng);
  } else {
    const std::size_t k = fast_steps_within(cfg.fast, p.schedule, cfg.t_star);
    const double ab = cfg.fast.alpha_bar()[k - 1];
    std::vector<double> xt(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) xt[i] = std::sqrt(ab) * x[i] + std::sqrt(1.0 - ab) * noise[i];
    r = fast_sample(std::move(xt), k, eps, cfg.fast, p.schedule, rng);
  }
  for (auto& v : r.samples) v = std::clamp(v, -1.0, 1.0);
  return r;
}

template <typename T>
Waveform purify(const Waveform& w, const Purifier<T>& p, const PurifierConfig& cfg, std::uint64_t seed) {
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples = purify_samples(w.samples, p, cfg, seed, w.sample_rate).samples;
  return out;
}

// ---------------------------------------------------------------------------
// Choosing t*.

struct TStarPoint {
  std::size_t t = 0;
  double eer_adversarial = 0.0;
  double eer_genuine = 0.0;
  double objective = 0.0;
};

struct TStarSelection {
  std::size_t t_star = 0;
  std::vector<TStarPoint> curve;
};

/// Grid search minimizing EER_adv(t) + lambda * EER_gen(t). `evaluate` returns
/// (EER_adv, EER_gen) at a given t; ties go to the smaller t.
inline TStarSelection select_t_star(const std::vector<std::size_t>& grid,
                                    const std::function<std::pair<double, double>(std::size_t)>& evaluate,
                                    double lambda = 1.0) {
  if (grid.empty()) throw std::invalid_argument("select_t_star: empty grid");
  TStarSelection sel;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t t : grid) {
    auto [adv, gen] = evaluate(t);
    TStarPoint pt{t, adv, gen, adv + lambda * gen};
    if (pt.objective < best || (pt.objective == best && t < sel.t_star)) {
      best = pt.objective;
      sel.t_star = t;
    }
    sel.curve.push_back(pt);
  }
  return sel;
}

/// Default grid {5, 10, ..., T}.
inline std::vector<std::size_t> default_t_grid(std::size_t T, std::size_t stride = 5) {
  std::vector<std::size_t> g;
  for (std::size_t t = stride; t <= T; t += stride) g.push_back(t);
  return g;
}

}  // namespace pfl
