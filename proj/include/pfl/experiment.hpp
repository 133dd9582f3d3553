#pragma once

// End-to-end experiment orchestration: a JSON config with embedded defaults,
// run-scoped artifact directories, and the stages synth-data, train-asv,
// train-dap, attack, defend, evaluate and report.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "pfl/asv.hpp"
#include "pfl/attack.hpp"
#include "pfl/corpus.hpp"
#include "pfl/defenses.hpp"
#include "pfl/metrics.hpp"
#include "pfl/purifier.hpp"

namespace pfl {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

/// An upstream artifact needed by a stage does not exist.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration.

inline Json default_config() {
  return Json::parse(R"({
  "seed": 1,
  "out": "runs/toy",
  "corpus": {"n_speakers": 8, "utts_per_speaker": 10, "eval_per_speaker": 5, "duration_s": 1.0,
             "sample_rate": 16000, "peak": 0.5, "noise_floor_db": -20.0},
  "features": {"n_mels": 40, "window_ms": 25.0, "hop_ms": 10.0, "fft_size": 512, "low_hz": 20.0, "high_hz": 0.0},
  "asv": {"channels": 64, "embedding_dim": 64, "width1": 5, "width2": 3, "dilation2": 2,
          "epochs": 60, "batch_size": 8, "lr_decay": 0.5, "decay_every": 20, "scale": 32.0, "margin": 0.2,
          "min_crop_frames": 50, "augment_prob": 0.5, "augment_snr_lo_db": 10.0, "augment_snr_hi_db": 40.0,
          "optimizer": {"kind": "sgd_momentum", "lr": 0.003, "momentum": 0.9, "beta2": 0.999, "grad_clip": 0.0}},
  "trials": {"count": 200, "target_fraction": 0.5},
  "attack": {"methods": ["pgd_l2", "bim_linf"], "epsilon": 30.0, "alpha": 1.0, "steps": 50,
             "step_grid": [10, 20, 50, 100], "quantize": true},
  "defenses": {"filters": [{"kind": "median", "kernel": 3}, {"kind": "mean", "kernel": 3},
                           {"kind": "gaussian_filter", "sigma": 1.0}],
               "noise_sigmas": [0.002, 0.005, 0.01, 0.02, 0.05],
               "table4_noise_sigma": 0.01},
  "dap": {"T": 100, "beta_lo": 0.0001, "beta_hi": 0.035,
          "channels": 16, "blocks": 8, "dilation_cycle": 4, "step_embedding": 128, "step_hidden": 64, "n_mels": 32,
          "train_mode": "clean", "iterations": 1000, "batch_size": 2, "crop_samples": 4000,
          "optimizer": {"kind": "adam", "lr": 0.0002, "momentum": 0.9, "beta2": 0.999, "grad_clip": 0.0},
          "t_star": 1, "sampler": "full_reverse", "compare_fast": true, "compare_t_star": [2],
          "t_grid": [1, 2, 3, 5, 10], "select_trials": 40, "select_lambda": 1.0},
  "metrics": ["eer", "min_dcf", "si_sdr", "stoi_like"],
  "dcf": {"p_target": 0.01, "c_miss": 1.0, "c_fa": 1.0}
})");
}

/// Applies "a.b.c=value"; the value is parsed as JSON when possible, else taken as a string.
/// Only keys that already exist in the config may be set.
inline void apply_override(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  Json* node = &cfg;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  *node = value;
}

namespace detail {

inline void merge_known(Json& base, const Json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) merge_known(slot, it.value(), path);
    else slot = it.value();
  }
}

}  // namespace detail

/// Defaults, then the file (if any), then --set overrides.
inline Json load_config(const std::string& path, const std::vector<std::string>& overrides) {
  Json cfg = default_config();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config " + path);
    Json file = Json::parse(is, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
    detail::merge_known(cfg, file, "");
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

/// FNV-1a of the canonical dump, excluding the output directory.
inline std::string config_hash(const Json& cfg) {
  Json c = cfg;
  c.erase("out");
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(c.dump())));
  return buf;
}

inline OptimizerConfig optimizer_from(const Json& j) {
  OptimizerConfig o;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "sgd_momentum") o.kind = OptimizerKind::sgd_momentum;
  else if (kind == "adam") o.kind = OptimizerKind::adam;
  else throw ConfigError("unknown optimizer '" + kind + "'");
  o.lr = j.at("lr");
  o.momentum = j.at("momentum");
  o.beta2 = j.at("beta2");
  o.grad_clip = j.at("grad_clip");
  return o;
}

/// Typed views of the config tree.
struct Settings {
  std::uint64_t seed = 0;
  CorpusConfig corpus;
  FeatureConfig features;
  EncoderConfig encoder;
  AsvTrainConfig asv;
  std::size_t trial_count = 0;
  double target_fraction = 0.5;
  std::vector<AttackConfig> attacks;  // one per method at the default step count
  std::vector<std::size_t> step_grid;
  std::vector<DefenseSpec> filters;
  std::vector<double> noise_sigmas;
  double table4_sigma = 0.01;
  ScheduleConfig schedule;
  DenoiserConfig denoiser;
  DapTrainMode dap_mode = DapTrainMode::clean;
  DapTrainConfig dap_train;
  PurifierConfig purifier;
  bool compare_fast = true;
  std::vector<std::size_t> compare_t_star;
  std::vector<std::size_t> t_grid;
  std::size_t select_trials = 40;
  double select_lambda = 1.0;
  std::set<std::string> metrics;
  DcfParams dcf;

  static Settings from(const Json& j) {
    try {
      Settings s;
      s.seed = j.at("seed");
      const auto& c = j.at("corpus");
      s.corpus.seed = derive_seed(s.seed, {fnv1a("corpus")});
      s.corpus.n_speakers = c.at("n_speakers");
      s.corpus.utts_per_speaker = c.at("utts_per_speaker");
      s.corpus.eval_per_speaker = c.at("eval_per_speaker");
      s.corpus.duration_s = c.at("duration_s");
      s.corpus.sample_rate = c.at("sample_rate");
      s.corpus.peak = c.at("peak");
      s.corpus.noise_floor_db = c.at("noise_floor_db");

      const auto& f = j.at("features");
      s.features.n_mels = f.at("n_mels");
      s.features.window_ms = f.at("window_ms");
      s.features.hop_ms = f.at("hop_ms");
      s.features.fft_size = f.at("fft_size");
      s.features.low_hz = f.at("low_hz");
      s.features.high_hz = f.at("high_hz");
      s.features.sample_rate = s.corpus.sample_rate;
      s.features.validate();

      const auto& a = j.at("asv");
      s.encoder.channels = a.at("channels");
      s.encoder.embedding_dim = a.at("embedding_dim");
      s.encoder.width1 = a.at("width1");
      s.encoder.width2 = a.at("width2");
      s.encoder.dilation2 = a.at("dilation2");
      s.asv.optimizer = optimizer_from(a.at("optimizer"));
      s.asv.epochs = a.at("epochs");
      s.asv.batch_size = a.at("batch_size");
      s.asv.lr_decay = a.at("lr_decay");
      s.asv.decay_every = a.at("decay_every");
      s.asv.scale = a.at("scale");
      s.asv.margin = a.at("margin");
      s.asv.min_crop_frames = a.at("min_crop_frames");
      s.asv.augment_prob = a.at("augment_prob");
      s.asv.augment_snr_lo_db = a.at("augment_snr_lo_db");
      s.asv.augment_snr_hi_db = a.at("augment_snr_hi_db");
      s.asv.seed = derive_seed(s.seed, {fnv1a("asv")});

      s.trial_count = j.at("trials").at("count");
      s.target_fraction = j.at("trials").at("target_fraction");
      if (s.trial_count < 2) throw ConfigError("trials.count must be at least 2");
      if (!(s.target_fraction > 0 && s.target_fraction < 1)) throw ConfigError("trials.target_fraction must be in (0, 1)");

      const auto& at = j.at("attack");
      for (const auto& m : at.at("methods")) {
        AttackConfig ac;
        ac.method = parse_attack(m.get<std::string>());
        ac.epsilon = at.at("epsilon");
        ac.alpha = at.at("alpha");
        ac.steps = at.at("steps");
        ac.quantize = at.at("quantize");
        ac.validate();
        s.attacks.push_back(ac);
      }
      if (s.attacks.empty()) throw ConfigError("attack.methods is empty");
      s.step_grid = at.at("step_grid").get<std::vector<std::size_t>>();

      const auto& d = j.at("defenses");
      for (const auto& fj : d.at("filters")) {
        DefenseSpec spec;
        spec.kind = parse_defense_kind(fj.at("kind").get<std::string>());
        if (spec.kind == DefenseKind::gaussian_filter) spec.kernel_sigma = fj.at("sigma");
        else if (spec.kind == DefenseKind::median || spec.kind == DefenseKind::mean) spec.kernel = fj.at("kernel");
        else throw ConfigError("defenses.filters accepts median, mean and gaussian_filter");
        spec.validate();
        s.filters.push_back(spec);
      }
      s.noise_sigmas = d.at("noise_sigmas").get<std::vector<double>>();
      s.table4_sigma = d.at("table4_noise_sigma");

      const auto& p = j.at("dap");
      s.schedule = {p.at("T"), p.at("beta_lo"), p.at("beta_hi")};
      s.schedule.build();
      s.denoiser.channels = p.at("channels");
      s.denoiser.blocks = p.at("blocks");
      s.denoiser.dilation_cycle = p.at("dilation_cycle");
      s.denoiser.step_embedding = p.at("step_embedding");
      s.denoiser.step_hidden = p.at("step_hidden");
      s.denoiser.n_mels = p.at("n_mels");
      s.dap_mode = parse_dap_mode(p.at("train_mode").get<std::string>());
      s.dap_train.iterations = p.at("iterations");
      s.dap_train.batch_size = p.at("batch_size");
      s.dap_train.crop_samples = p.at("crop_samples");
      s.dap_train.optimizer = optimizer_from(p.at("optimizer"));
      s.dap_train.seed = derive_seed(s.seed, {fnv1a("dap")});
      s.purifier.t_star = p.at("t_star");
      s.purifier.sampler = parse_sampler(p.at("sampler").get<std::string>());
      s.purifier.seed = derive_seed(s.seed, {fnv1a("purify")});
      if (s.purifier.t_star > s.schedule.T) throw ConfigError("dap.t_star exceeds dap.T");
      s.compare_fast = p.at("compare_fast");
      s.compare_t_star = p.at("compare_t_star").get<std::vector<std::size_t>>();
      for (auto t : s.compare_t_star)
        if (t < 1 || t > s.schedule.T) throw ConfigError("dap.compare_t_star entries must lie in [1, T]");
      s.t_grid = p.at("t_grid").get<std::vector<std::size_t>>();
      for (auto t : s.t_grid)
        if (t < 1 || t > s.schedule.T) throw ConfigError("dap.t_grid entries must lie in [1, T]");
      s.select_trials = p.at("select_trials");
      s.select_lambda = p.at("select_lambda");

      for (const auto& m : j.at("metrics")) {
        const auto name = m.get<std::string>();
        if (name != "eer" && name != "min_dcf" && name != "si_sdr" && name != "stoi_like")
          throw ConfigError("unknown metric '" + name + "'");
        s.metrics.insert(name);
      }
      s.dcf.p_target = j.at("dcf").at("p_target");
      s.dcf.c_miss = j.at("dcf").at("c_miss");
      s.dcf.c_fa = j.at("dcf").at("c_fa");
      return s;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("invalid config: ") + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("invalid config: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Run directory and naming.

inline std::string attack_condition(AttackMethod m, std::size_t steps) {
  return std::string(attack_name(m)) + "_s" + std::to_string(steps);
}

inline std::string condition_label(const std::string& cond, const Settings& s) {
  if (cond == "clean" || cond == "genuine") return cond;
  for (const auto& a : s.attacks) {
    const std::string tag = a.method == AttackMethod::pgd_l2 ? "adv-PGD" : "adv-BIM";
    if (cond == attack_condition(a.method, a.steps)) return tag;
    for (auto k : s.step_grid)
      if (cond == attack_condition(a.method, k)) return tag + "@" + std::to_string(k);
  }
  return cond;
}

inline std::string trial_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "t%04zu", i);
  return buf;
}

struct Cell {
  std::string condition;
  std::string defense;
  bool operator<(const Cell& o) const { return std::tie(condition, defense) < std::tie(o.condition, o.defense); }
  bool operator==(const Cell& o) const = default;
};

class Experiment {
 public:
  Json config;
  Settings s;
  fs::path dir;
  std::string hash;
  std::ostream* log = &std::clog;

  explicit Experiment(Json cfg) : config(std::move(cfg)), s(Settings::from(config)) {
    dir = config.at("out").get<std::string>();
    hash = config_hash(config);
  }

  fs::path path(const std::string& rel) const { return dir / rel; }

  void note(const std::string& stage, const std::string& msg) const {
    if (log) *log << "[" << stage << "] " << msg << std::endl;
  }

  void require(const std::string& stage, const std::string& rel, const std::string& what) const {
    if (!fs::exists(path(rel)))
      throw MissingArtifact(stage + " requires " + what + " (" + path(rel).string() + "); run the upstream stage first");
  }

  /// Writes the config dump; called by every stage so a run directory is self-describing.
  void prepare() const {
    fs::create_directories(dir);
    std::ofstream(path("config.json")) << config.dump(2) << '\n';
  }

  // ----- Defense lists --------------------------------------------------------

  std::size_t t_star() const {
    if (s.purifier.t_star != 0) return s.purifier.t_star;
    require("defend", "models/t_star.txt", "the selected purification step");
    std::ifstream is(path("models/t_star.txt"));
    std::size_t t = 0;
    if (!(is >> t) || t == 0) throw MissingArtifact("models/t_star.txt is unreadable");
    return t;
  }

  DefenseSpec dap_spec(Sampler sampler) const {
    DefenseSpec d;
    d.kind = DefenseKind::dap;
    d.purifier = s.purifier;
    d.purifier.sampler = sampler;
    d.purifier.t_star = t_star();
    return d;
  }

  std::vector<DefenseSpec> dap_variants() const {
    std::vector<DefenseSpec> out{dap_spec(s.purifier.sampler)};
    if (s.compare_fast) {
      const Sampler other = s.purifier.sampler == Sampler::full_reverse ? Sampler::fast_six_step : Sampler::full_reverse;
      out.push_back(dap_spec(other));
    }
    for (auto t : s.compare_t_star) {
      auto d = dap_spec(s.purifier.sampler);
      if (t == d.purifier.t_star) continue;
      d.purifier.t_star = t;
      out.push_back(d);
    }
    return out;
  }

  static DefenseSpec noise_spec(double sigma) {
    DefenseSpec d;
    d.kind = DefenseKind::add_noise;
    d.noise_sigma = sigma;
    return d;
  }

  std::vector<DefenseSpec> main_defenses() const {
    std::vector<DefenseSpec> out{DefenseSpec{}};
    out.insert(out.end(), s.filters.begin(), s.filters.end());
    for (double sig : s.noise_sigmas) out.push_back(noise_spec(sig));
    for (auto& d : dap_variants()) out.push_back(d);
    return out;
  }

  std::vector<std::string> main_conditions() const {
    std::vector<std::string> out{"genuine"};
    for (const auto& a : s.attacks) out.push_back(attack_condition(a.method, a.steps));
    return out;
  }

  std::vector<std::size_t> snapshot_steps() const {
    std::set<std::size_t> st(s.step_grid.begin(), s.step_grid.end());
    st.insert(s.attacks.front().steps);
    return {st.begin(), st.end()};
  }

  /// Every scored (condition, defense) cell, in report order.
  std::vector<std::pair<Cell, DefenseSpec>> cells() const {
    std::vector<std::pair<Cell, DefenseSpec>> out;
    std::set<Cell> seen;
    auto add = [&](const std::string& c, const DefenseSpec& d) {
      Cell cell{c, d.id()};
      if (seen.insert(cell).second) out.emplace_back(cell, d);
    };
    add("clean", DefenseSpec{});
    for (const auto& c : main_conditions())
      for (const auto& d : main_defenses()) add(c, d);
    for (const auto& a : s.attacks)
      for (auto k : s.step_grid)
        for (const auto& d : {DefenseSpec{}, noise_spec(s.table4_sigma), dap_variants().front()})
          add(attack_condition(a.method, k), d);
    return out;
  }

  /// Conditions whose test audio must be purified by each DAP variant.
  std::vector<std::string> dap_conditions(bool primary) const {
    auto out = main_conditions();
    if (!primary) return out;
    for (const auto& a : s.attacks)
      for (auto k : s.step_grid) {
        auto c = attack_condition(a.method, k);
        if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
      }
    return out;
  }

  // ----- Artifact access ------------------------------------------------------

  std::vector<ManifestEntry> manifest() const {
    require("this stage", "data/manifest.tsv", "the synthesized corpus");
    return read_manifest(path("data/manifest.tsv").string());
  }

  std::vector<Trial> trials() const {
    require("this stage", "data/trials.txt", "the trial list");
    return read_trials(path("data/trials.txt").string());
  }

  AudioLookup corpus_audio() const {
    std::map<std::string, std::string> where;
    for (const auto& e : manifest()) where[e.utt_id] = e.path;
    return [where, this](const std::string& utt) {
      auto it = where.find(utt);
      if (it == where.end()) throw std::runtime_error("utterance '" + utt + "' is not in the manifest");
      return load_wav(path(it->second).string());
    };
  }

  fs::path condition_wav(const std::string& cond, std::size_t i) const {
    return path("attack/" + cond + "/" + trial_id(i) + ".wav");
  }

  fs::path purified_wav(const std::string& dap_id, const std::string& cond, std::size_t i) const {
    return path("defend/" + dap_id + "/" + cond + "/" + trial_id(i) + ".wav");
  }

  EncoderModel<float> load_asv(const std::string& stage) const {
    require(stage, "models/asv.pflw", "a trained ASV checkpoint");
    auto model = EncoderModel<float>::init(s.encoder, s.features, 0);
    model.load(Checkpoint::load(path("models/asv.pflw").string()));
    return model;
  }

  Purifier<float> load_dap(const std::string& stage) const {
    require(stage, "models/dap.pflw", "a trained DAP checkpoint");
    auto p = Purifier<float>::load(Checkpoint::load(path("models/dap.pflw").string()));
    if (!p.trained) throw ModelNotTrained(stage + " requires a trained DAP checkpoint; models/dap.pflw is untrained");
    return p;
  }

  void record_time(const std::string& stage, double seconds) const {
    std::map<std::string, double> rows;
    std::ifstream is(path("timings.csv"));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      auto comma = line.find(',');
      if (comma != std::string::npos) rows[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    }
    rows[stage] = seconds;
    std::ofstream os(path("timings.csv"));
    os << "stage,seconds\n";
    for (const auto& [k, v] : rows) os << k << ',' << v << '\n';
  }
};

// ---------------------------------------------------------------------------
// Stages.

namespace detail {

template <typename F>
void timed(const Experiment& ex, const std::string& stage, F&& body) {
  ex.prepare();
  const auto start = std::chrono::steady_clock::now();
  body();
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ex.record_time(stage, sec);
  char buf[64];
  std::snprintf(buf, sizeof buf, "done in %.1f s", sec);
  ex.note(stage, buf);
}

/// Balanced trials over the eval split: all ordered same-speaker pairs and all
/// different-speaker pairs are shuffled and the required number drawn from each.
inline std::vector<Trial> sample_trials(const std::vector<ManifestEntry>& entries, std::size_t count,
                                        double target_fraction, std::uint64_t seed) {
  std::vector<const ManifestEntry*> eval;
  for (const auto& e : entries)
    if (e.split == Split::eval) eval.push_back(&e);
  std::vector<Trial> tar, non;
  for (const auto* a : eval)
    for (const auto* b : eval) {
      if (a == b) continue;
      (a->speaker_id == b->speaker_id ? tar : non).push_back({a->speaker_id == b->speaker_id, a->utt_id, b->utt_id});
    }
  const auto n_tar = static_cast<std::size_t>(std::llround(static_cast<double>(count) * target_fraction));
  const std::size_t n_non = count - n_tar;
  if (n_tar == 0 || n_non == 0 || tar.size() < n_tar || non.size() < n_non)
    throw ConfigError("the eval split cannot supply " + std::to_string(n_tar) + " target and " +
                      std::to_string(n_non) + " nontarget trials");
  Rng rng(derive_seed(seed, {fnv1a("trials")}));
  std::shuffle(tar.begin(), tar.end(), rng);
  std::shuffle(non.begin(), non.end(), rng);
  std::vector<Trial> out(tar.begin(), tar.begin() + static_cast<std::ptrdiff_t>(n_tar));
  out.insert(out.end(), non.begin(), non.begin() + static_cast<std::ptrdiff_t>(n_non));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline SpeakerCorpus load_corpus(const Experiment& ex) {
  SpeakerCorpus c;
  for (const auto& e : ex.manifest()) c.utterances.push_back({e.speaker_id, e.utt_id, e.split, load_wav(ex.path(e.path).string())});
  return c;
}

inline std::vector<LabeledScore> labeled(const ScoreSet& scores) {
  std::vector<LabeledScore> out;
  for (const auto& s : scores) out.push_back({s.score, s.trial.target});
  return out;
}

inline std::string fmt(double v, const char* f = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace detail

inline void stage_synth_data(const Experiment& ex) {
  detail::timed(ex, "synth-data", [&] {
    auto corpus = synth_corpus(ex.s.corpus);
    fs::create_directories(ex.path("data/wav"));
    std::vector<ManifestEntry> entries;
    for (const auto& u : corpus.utterances) {
      const std::string rel = "data/wav/" + u.utt_id + ".wav";
      save_wav(ex.path(rel).string(), u.audio);
      entries.push_back({u.speaker_id, u.utt_id, u.split, rel});
    }
    write_manifest(ex.path("data/manifest.tsv").string(), entries);
    auto trials = detail::sample_trials(entries, ex.s.trial_count, ex.s.target_fraction, ex.s.seed);
    write_trials(ex.path("data/trials.txt").string(), trials);
    ex.note("synth-data", std::to_string(entries.size()) + " utterances, " + std::to_string(trials.size()) + " trials");
  });
}

inline void stage_train_asv(const Experiment& ex) {
  detail::timed(ex, "train-asv", [&] {
    ex.require("train-asv", "data/manifest.tsv", "the synthesized corpus");
    auto corpus = detail::load_corpus(ex);
    auto result = train_asv<float>(corpus, ex.s.encoder, ex.s.features, ex.s.asv);
    fs::create_directories(ex.path("models"));
    Checkpoint ck;
    result.model.save(ck);
    ck.save(ex.path("models/asv.pflw").string());
    std::ofstream os(ex.path("models/asv_loss.csv"));
    os << "epoch,loss\n";
    for (std::size_t e = 0; e < result.loss_per_epoch.size(); ++e) os << e + 1 << ',' << detail::fmt(result.loss_per_epoch[e]) << '\n';
    ex.note("train-asv", "final loss " + detail::fmt(result.loss_per_epoch.back(), "%.4f"));
  });
}

inline void stage_train_dap(const Experiment& ex) {
  detail::timed(ex, "train-dap", [&] {
    ex.require("train-dap", "data/manifest.tsv", "the synthesized corpus");
    auto corpus = detail::load_corpus(ex);
    auto train = corpus.split(Split::train);
    std::vector<DapExample> data;
    if (ex.s.dap_mode == DapTrainMode::clean) {
      for (const auto* u : train) data.push_back({u->audio.samples, u->audio.samples});
    } else {
      // Condition on PGD examples against a nontarget enrollment from the train split.
      auto model = ex.load_asv("train-dap in adversarial mode");
      for (std::size_t i = 0; i < train.size(); ++i) {
        const auto* u = train[i];
        const Utterance* other = nullptr;
        for (std::size_t k = 1; k < train.size() && !other; ++k)
          if (train[(i + k) % train.size()]->speaker_id != u->speaker_id) other = train[(i + k) % train.size()];
        auto adv = run_attack(u->audio, embed(other->audio, model), false, model, ex.s.attacks.front());
        data.push_back({u->audio.samples, adv.perturbed.samples});
      }
    }
    auto p = Purifier<float>::init(ex.s.schedule, ex.s.denoiser, derive_seed(ex.s.seed, {fnv1a("dap-init")}));
    const std::size_t every = std::max<std::size_t>(1, ex.s.dap_train.iterations / 10);
    double window = 0;
    auto result = train_dap(p, data, ex.s.dap_train, [&](std::size_t it, double loss) {
      window += loss;
      if ((it + 1) % every == 0) {
        ex.note("train-dap", "iteration " + std::to_string(it + 1) + " mean loss " +
                                 detail::fmt(window / static_cast<double>(every), "%.2f"));
        window = 0;
      }
    });
    fs::create_directories(ex.path("models"));
    Checkpoint ck;
    p.save(ck);
    ck.save(ex.path("models/dap.pflw").string());
    std::ofstream os(ex.path("models/dap_loss.csv"));
    os << "iteration,loss\n";
    for (std::size_t i = 0; i < result.loss.size(); ++i) os << i + 1 << ',' << detail::fmt(result.loss[i]) << '\n';
  });
}

inline void stage_attack(const Experiment& ex) {
  detail::timed(ex, "attack", [&] {
    auto model = ex.load_asv("attack");
    auto trials = ex.trials();
    auto audio = ex.corpus_audio();
    const auto steps = ex.snapshot_steps();
    std::map<std::string, std::vector<AttackRecord>> records;
    std::vector<AttackRecord> genuine_records;
    std::map<std::string, Embedding> enroll_cache;
    for (const auto& a : ex.s.attacks)
      for (auto k : steps) fs::create_directories(ex.path("attack/" + attack_condition(a.method, k)));
    fs::create_directories(ex.path("attack/genuine"));

    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto& t = trials[i];
      auto it = enroll_cache.find(t.enroll);
      if (it == enroll_cache.end()) it = enroll_cache.emplace(t.enroll, embed(audio(t.enroll), model)).first;
      const auto test = audio(t.test);
      for (std::size_t m = 0; m < ex.s.attacks.size(); ++m) {
        const auto& cfg = ex.s.attacks[m];
        auto snaps = attack_snapshots(test, it->second, t.target, model, cfg, steps);
        for (const auto& snap : snaps) {
          const auto cond = attack_condition(cfg.method, snap.steps);
          save_wav(ex.condition_wav(cond, i).string(), snap.perturbed);
          records[cond].push_back(make_record(trial_id(i), cfg, snap));
          if (m == 0 && snap.steps == cfg.steps) {
            auto g = genuine_with_matched_noise(test, snap, derive_seed(ex.s.seed, {fnv1a("genuine"), i}));
            save_wav(ex.condition_wav("genuine", i).string(), g);
            AdversarialExample gx;
            gx.original = test;
            gx.perturbed = load_wav(ex.condition_wav("genuine", i).string());
            gx.perturbation = gx.perturbed;
            for (std::size_t j = 0; j < test.size(); ++j) gx.perturbation.samples[j] -= test.samples[j];
            gx.steps = 0;
            gx.final_score = score(it->second, embed(gx.perturbed, model));
            auto rec = make_record(trial_id(i), cfg, gx);
            rec.method = "matched_noise";
            genuine_records.push_back(rec);
          }
        }
      }
      if ((i + 1) % 20 == 0) ex.note("attack", std::to_string(i + 1) + "/" + std::to_string(trials.size()) + " trials");
    }
    for (const auto& [cond, rows] : records) write_attack_manifest(ex.path("attack/" + cond + "/manifest.csv").string(), rows);
    write_attack_manifest(ex.path("attack/genuine/manifest.csv").string(), genuine_records);
  });
}

namespace detail {

inline double eer_of(const std::vector<Trial>& trials, const std::vector<Embedding>& enroll,
                     const std::vector<Waveform>& tests, const EncoderModel<float>& model) {
  std::vector<LabeledScore> ls;
  for (std::size_t i = 0; i < trials.size(); ++i) ls.push_back({score(enroll[i], embed(tests[i], model)), trials[i].target});
  return eer(ls);
}

/// Chooses t* on the first select_trials trials by EER_adv + lambda * EER_gen.
inline std::size_t select_t(const Experiment& ex, const Purifier<float>& dap) {
  auto model = ex.load_asv("defend (t* selection)");
  auto all = ex.trials();
  auto audio = ex.corpus_audio();
  const std::size_t n = std::min(ex.s.select_trials, all.size());
  std::vector<Trial> trials(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
  bool has_tar = false, has_non = false;
  for (const auto& t : trials) (t.target ? has_tar : has_non) = true;
  if (!has_tar || !has_non) throw ConfigError("dap.select_trials must cover both target and nontarget trials");
  const auto& a = ex.s.attacks.front();
  const auto adv_cond = attack_condition(a.method, a.steps);
  std::vector<Embedding> enroll;
  std::vector<Waveform> gen, adv;
  for (std::size_t i = 0; i < n; ++i) {
    enroll.push_back(embed(audio(trials[i].enroll), model));
    gen.push_back(load_wav(ex.condition_wav("genuine", i).string()));
    adv.push_back(load_wav(ex.condition_wav(adv_cond, i).string()));
  }
  auto evaluate = [&](std::size_t t) {
    PurifierConfig pc = ex.s.purifier;
    pc.t_star = t;
    std::vector<Waveform> pg, pa;
    for (std::size_t i = 0; i < n; ++i) {
      pg.push_back(purify(gen[i], dap, pc, derive_seed(ex.s.seed, {fnv1a("select"), i})));
      pa.push_back(purify(adv[i], dap, pc, derive_seed(ex.s.seed, {fnv1a("select"), i})));
    }
    return std::make_pair(eer_of(trials, enroll, pa, model), eer_of(trials, enroll, pg, model));
  };
  auto sel = select_t_star(ex.s.t_grid, evaluate, ex.s.select_lambda);
  std::ofstream os(ex.path("models/t_star.csv"));
  os << "t,eer_adversarial,eer_genuine,objective\n";
  for (const auto& p : sel.curve)
    os << p.t << ',' << fmt(p.eer_adversarial) << ',' << fmt(p.eer_genuine) << ',' << fmt(p.objective) << '\n';
  std::ofstream(ex.path("models/t_star.txt")) << sel.t_star << '\n';
  ex.note("defend", "selected t* = " + std::to_string(sel.t_star));
  return sel.t_star;
}

}  // namespace detail

inline void stage_defend(const Experiment& ex) {
  detail::timed(ex, "defend", [&] {
    auto dap = ex.load_dap("defend");
    for (const auto& cond : ex.dap_conditions(true))
      ex.require("defend", "attack/" + cond + "/manifest.csv", "attack outputs for " + cond);
    if (ex.s.purifier.t_star == 0) detail::select_t(ex, dap);
    const auto n = ex.trials().size();
    auto variants = ex.dap_variants();
    for (std::size_t v = 0; v < variants.size(); ++v) {
      const auto& d = variants[v];
      for (const auto& cond : ex.dap_conditions(v == 0)) {
        fs::create_directories(ex.purified_wav(d.id(), cond, 0).parent_path());
        for (std::size_t i = 0; i < n; ++i) {
          auto w = load_wav(ex.condition_wav(cond, i).string());
          save_wav(ex.purified_wav(d.id(), cond, i).string(), apply_defense(w, d, derive_seed(ex.s.seed, {fnv1a("dap"), i}), &dap));
        }
        ex.note("defend", d.id() + " " + cond);
      }
    }
  });
}

inline void stage_evaluate(const Experiment& ex) {
  detail::timed(ex, "evaluate", [&] {
    auto model = ex.load_asv("evaluate");
    auto trials = ex.trials();
    auto audio = ex.corpus_audio();
    const bool quality = ex.s.metrics.count("si_sdr") || ex.s.metrics.count("stoi_like");
    const auto main_conds = ex.main_conditions();
    fs::create_directories(ex.path("scores"));
    fs::create_directories(ex.path("quality"));
    std::map<std::string, Embedding> enroll_cache;
    std::vector<Embedding> enroll;
    for (const auto& t : trials) {
      auto it = enroll_cache.find(t.enroll);
      if (it == enroll_cache.end()) it = enroll_cache.emplace(t.enroll, embed(audio(t.enroll), model)).first;
      enroll.push_back(it->second);
    }
    std::vector<Waveform> clean;
    for (const auto& t : trials) clean.push_back(audio(t.test));

    for (const auto& [cell, d] : ex.cells()) {
      if (cell.condition != "clean")
        ex.require("evaluate", "attack/" + cell.condition + "/manifest.csv", "attack outputs for " + cell.condition);
      if (d.kind == DefenseKind::dap)
        ex.require("evaluate", "defend/" + d.id() + "/" + cell.condition, "purified audio for " + d.id());
      ScoreSet scores;
      std::ostringstream q;
      q << "trial_id,si_sdr,stoi_like\n";
      const bool with_quality = quality && std::find(main_conds.begin(), main_conds.end(), cell.condition) != main_conds.end();
      for (std::size_t i = 0; i < trials.size(); ++i) {
        Waveform test;
        if (d.kind == DefenseKind::dap) test = load_wav(ex.purified_wav(d.id(), cell.condition, i).string());
        else {
          test = cell.condition == "clean" ? clean[i] : load_wav(ex.condition_wav(cell.condition, i).string());
          test = apply_defense(test, d, derive_seed(ex.s.seed, {fnv1a("defense"), fnv1a(d.id()), i}));
        }
        scores.push_back({trials[i], score(enroll[i], embed(test, model))});
        if (with_quality) q << trial_id(i) << ',' << detail::fmt(si_sdr(test, clean[i])) << ',' << detail::fmt(stoi_like(test, clean[i])) << '\n';
      }
      const auto stem = cell.condition + "__" + cell.defense + ".csv";
      write_scores(ex.path("scores/" + stem).string(), scores);
      if (with_quality) std::ofstream(ex.path("quality/" + stem)) << q.str();
    }
    ex.note("evaluate", std::to_string(ex.cells().size()) + " cells scored");
  });
}

// ---------------------------------------------------------------------------
// Report.

struct ReportRow {
  std::string condition, label, defense;
  double eer = 0, min_dcf = 0;
  std::optional<double> si_sdr, stoi;
  std::size_t n_trials = 0;
};

namespace detail {

inline std::vector<std::pair<double, double>> read_quality(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw MissingArtifact("cannot read " + p.string());
  std::string line;
  std::getline(is, line);
  std::vector<std::pair<double, double>> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto a = line.find(','), b = line.find(',', a + 1);
    out.emplace_back(std::stod(line.substr(a + 1, b - a - 1)), std::stod(line.substr(b + 1)));
  }
  return out;
}

inline std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace detail

inline std::vector<ReportRow> collect_report(const Experiment& ex) {
  const auto cells = ex.cells();
  std::vector<std::string> missing;
  for (const auto& [cell, d] : cells) {
    const auto stem = cell.condition + "__" + cell.defense + ".csv";
    if (!fs::exists(ex.path("scores/" + stem))) missing.push_back("scores/" + stem);
  }
  if (!missing.empty()) {
    std::string msg = "report is missing " + std::to_string(missing.size()) + " score file(s); run `evaluate` first:";
    for (const auto& m : missing) msg += "\n  " + ex.path(m).string();
    throw MissingArtifact(msg);
  }
  std::vector<ReportRow> rows;
  for (const auto& [cell, d] : cells) {
    const auto stem = cell.condition + "__" + cell.defense + ".csv";
    auto scores = read_scores(ex.path("scores/" + stem).string());
    ReportRow r;
    r.condition = cell.condition;
    r.label = condition_label(cell.condition, ex.s);
    r.defense = cell.defense;
    auto ls = detail::labeled(scores);
    r.eer = eer(ls);
    r.min_dcf = min_dcf(ls, ex.s.dcf);
    r.n_trials = scores.size();
    if (fs::exists(ex.path("quality/" + stem))) {
      auto q = detail::read_quality(ex.path("quality/" + stem));
      double a = 0, b = 0;
      for (auto [x, y] : q) a += x, b += y;
      if (!q.empty()) {
        if (ex.s.metrics.count("si_sdr")) r.si_sdr = a / static_cast<double>(q.size());
        if (ex.s.metrics.count("stoi_like")) r.stoi = b / static_cast<double>(q.size());
      }
    }
    rows.push_back(r);
  }
  return rows;
}

/// The ordinal checks that the toy-scale run is expected to satisfy.
struct OrdinalCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

inline const ReportRow* find_row(const std::vector<ReportRow>& rows, const std::string& cond, const std::string& def) {
  for (const auto& r : rows)
    if (r.condition == cond && r.defense == def) return &r;
  return nullptr;
}

inline std::vector<OrdinalCheck> ordinal_checks(const Experiment& ex, const std::vector<ReportRow>& rows) {
  using detail::fmt;
  std::vector<OrdinalCheck> out;
  const auto dap = ex.dap_variants().front().id();
  const auto* gen = find_row(rows, "genuine", "none");
  const auto* gen_dap = find_row(rows, "genuine", dap);
  for (const auto& a : ex.s.attacks) {
    const auto cond = attack_condition(a.method, a.steps);
    const auto* adv = find_row(rows, cond, "none");
    const auto* adv_dap = find_row(rows, cond, dap);
    const ReportRow* adv_med = nullptr;
    for (const auto& f : ex.s.filters)
      if (f.kind == DefenseKind::median && !adv_med) adv_med = find_row(rows, cond, f.id());
    const std::string tag = condition_label(cond, ex.s);
    out.push_back({tag + " undefended EER >= 5x genuine", adv->eer >= 5 * gen->eer,
                   fmt(adv->eer, "%.2f") + " vs " + fmt(gen->eer, "%.2f")});
    out.push_back({tag + " DAP EER <= 0.5x undefended", adv_dap->eer <= 0.5 * adv->eer,
                   fmt(adv_dap->eer, "%.2f") + " vs " + fmt(adv->eer, "%.2f")});
    if (adv_med && adv_med->stoi && adv_dap->stoi)
      out.push_back({tag + " STOI-like DAP >= median", *adv_dap->stoi >= *adv_med->stoi,
                     fmt(*adv_dap->stoi, "%.4f") + " vs " + fmt(*adv_med->stoi, "%.4f")});
    if (adv_dap->si_sdr)
      out.push_back({tag + " SI-SDR DAP >= 0 dB", *adv_dap->si_sdr >= 0, fmt(*adv_dap->si_sdr, "%.2f") + " dB"});
    double prev = -1e9;
    bool mono = true;
    std::string trend;
    for (auto k : ex.s.step_grid) {
      const auto* r = find_row(rows, attack_condition(a.method, k), "none");
      mono = mono && r->eer >= prev - 2.0;
      prev = std::max(prev, r->eer);
      trend += (trend.empty() ? "" : " ") + fmt(r->eer, "%.2f");
    }
    out.push_back({tag + " undefended EER non-decreasing in steps (+-2)", mono, trend});
  }
  out.push_back({"genuine DAP EER <= undefended + 5", gen_dap->eer <= gen->eer + 5.0,
                 fmt(gen_dap->eer, "%.2f") + " vs " + fmt(gen->eer, "%.2f")});
  double prev = -1e9;
  bool mono = true;
  std::string trend;
  for (double sig : ex.s.noise_sigmas) {
    const auto* r = find_row(rows, "genuine", Experiment::noise_spec(sig).id());
    mono = mono && r->eer >= prev - 1.0;
    prev = std::max(prev, r->eer);
    trend += (trend.empty() ? "" : " ") + fmt(r->eer, "%.2f");
  }
  out.push_back({"genuine EER non-decreasing in noise sigma (+-1)", mono, trend});
  return out;
}

inline void stage_report(const Experiment& ex) {
  detail::timed(ex, "report", [&] {
    using detail::fmt;
    auto rows = collect_report(ex);
    fs::create_directories(ex.path("report"));
    {
      std::ofstream os(ex.path("report/report.csv"));
      os << "config_hash,condition,label,defense,eer,min_dcf,si_sdr,stoi_like,n_trials\n";
      for (const auto& r : rows)
        os << ex.hash << ',' << r.condition << ',' << r.label << ',' << r.defense << ',' << fmt(r.eer) << ','
           << fmt(r.min_dcf) << ',' << detail::opt_fmt(r.si_sdr) << ',' << detail::opt_fmt(r.stoi) << ',' << r.n_trials
           << '\n';
    }
    const auto conds = ex.main_conditions();
    {
      std::ofstream os(ex.path("report/table2.csv"));
      os << "config_hash,defense";
      for (const auto& c : conds) os << ',' << condition_label(c, ex.s);
      os << '\n';
      for (const auto& d : ex.main_defenses()) {
        os << ex.hash << ',' << d.id();
        for (const auto& c : conds) os << ',' << fmt(find_row(rows, c, d.id())->eer);
        os << '\n';
      }
    }
    {
      std::ofstream os(ex.path("report/table3.csv"));
      os << "config_hash,condition,defense,si_sdr,stoi_like\n";
      for (const auto& c : conds)
        for (const auto& d : ex.main_defenses()) {
          const auto* r = find_row(rows, c, d.id());
          os << ex.hash << ',' << condition_label(c, ex.s) << ',' << d.id() << ',' << detail::opt_fmt(r->si_sdr) << ','
             << detail::opt_fmt(r->stoi) << '\n';
        }
    }
    {
      const std::vector<std::string> defs{"none", Experiment::noise_spec(ex.s.table4_sigma).id(), ex.dap_variants().front().id()};
      std::ofstream os(ex.path("report/table4.csv"));
      os << "config_hash,method,steps";
      for (const auto& d : defs) os << ',' << d;
      os << '\n';
      for (const auto& a : ex.s.attacks)
        for (auto k : ex.s.step_grid) {
          os << ex.hash << ',' << attack_name(a.method) << ',' << k;
          for (const auto& d : defs) os << ',' << fmt(find_row(rows, attack_condition(a.method, k), d)->eer);
          os << '\n';
        }
    }
    {
      auto clean = read_scores(ex.path("scores/clean__none.csv").string());
      const double theta = eer_threshold(detail::labeled(clean));
      std::ofstream os(ex.path("report/summary.txt"));
      os << "config hash: " << ex.hash << '\n';
      os << "trials: " << clean.size() << '\n';
      os << "clean EER: " << fmt(eer(detail::labeled(clean)), "%.2f") << " %\n";
      os << "decision threshold (clean EER point): " << fmt(theta) << '\n';
      os << "DAP: " << ex.dap_variants().front().id() << '\n';
      os << "\nattack success at the clean threshold (undefended):\n";
      for (const auto& c : conds) {
        auto sc = read_scores(ex.path("scores/" + c + "__none.csv").string());
        std::size_t wrong = 0;
        for (const auto& s : sc) wrong += (s.score >= theta) != s.trial.target;
        os << "  " << condition_label(c, ex.s) << ": " << wrong << "/" << sc.size() << " decisions wrong\n";
      }
      os << "\nordinal checks:\n";
      for (const auto& chk : ordinal_checks(ex, rows))
        os << "  [" << (chk.pass ? "PASS" : "FAIL") << "] " << chk.name << ": " << chk.detail << '\n';
    }
    ex.note("report", "wrote " + ex.path("report").string());
  });
}

inline void run_all(const Experiment& ex) {
  stage_synth_data(ex);
  stage_train_asv(ex);
  stage_train_dap(ex);
  stage_attack(ex);
  stage_defend(ex);
  stage_evaluate(ex);
  stage_report(ex);
}

}  // namespace pfl
