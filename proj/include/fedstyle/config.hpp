#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedstyle/domain.hpp"
#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/eval.hpp"
#include "fedstyle/losses.hpp"
#include "fedstyle/memory.hpp"
#include "fedstyle/optimizer.hpp"

namespace fedstyle {

// Geometry of the synthetic source/target domains.
struct DataConfig {
  std::size_t num_sources = 3;
  std::size_t input_dim = 16;
  std::size_t identities = 20;
  std::size_t samples_per_identity = 10;
  // Extra identities per domain kept out of training for evaluation.
  std::size_t holdout_identities = 10;
  double noise_sigma = 0.6;
  // Shared nuisance subspace (random unit directions, common to all domains).
  std::size_t nuisance_dims = 4;
  double nuisance_sigma = 2.0;
  // Domain styles: scale = exp(scale_spread * z), shift = shift_spread * z.
  double scale_spread = 0.5;
  double shift_spread = 1.0;
  double query_fraction = 0.5;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

// Per-domain overrides, [domain.N] sections. Empty vectors / negative values mean "not set".
struct DomainOverride {
  long long identities = -1;
  long long samples_per_identity = -1;
  double noise_sigma = -1.0;
  std::vector<double> scale;
  std::vector<double> shift;

  friend bool operator==(const DomainOverride&, const DomainOverride&) = default;
};

struct EncoderConfig {
  std::size_t hidden_dim = 64;
  std::size_t output_dim = 32;
  Activation activation = Activation::relu;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct OptimizerConfig {
  double base_lr = 1e-3;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  std::vector<std::size_t> milestones{20, 40};
  double gamma = 0.1;

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct MemoryConfig {
  double momentum = 0.2;
  RenormPolicy policy = RenormPolicy::renormalize;
  std::size_t warmup_epochs = 1;
  InitAverage init_average = InitAverage::normalized;

  friend bool operator==(const MemoryConfig&, const MemoryConfig&) = default;
};

struct TransformSettings {
  double mix_alpha = 0.5;
  double degrade_prob = 0.0;
  double degrade_sigma = 0.0;
  double style_jitter = 1.0;
  // Rounds (1-based) in which every client's transform degrades every batch.
  std::vector<std::size_t> force_degrade_rounds;

  friend bool operator==(const TransformSettings&, const TransformSettings&) = default;
};

// Each switch removes one component: the styled-image branch (NSA), the
// memory-based branch (PSCU) and the Rank-1 gate on memory updates.
struct AblationFlags {
  bool enable_nsa = true;
  bool enable_pscu = true;
  bool enable_screening = true;

  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

struct BatchConfig {
  std::size_t p = 16;
  std::size_t k = 4;

  friend bool operator==(const BatchConfig&, const BatchConfig&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t rounds = 60;
  std::size_t epochs_per_round = 1;
  std::size_t threads = 1;
  std::string output_dir = "out";
  DataConfig data;
  std::map<int, DomainOverride> domains;
  EncoderConfig encoder;
  LossConfig loss;
  OptimizerConfig optimizer;
  MemoryConfig memory;
  TransformSettings transform;
  AblationFlags ablation;
  BatchConfig batch;
  EvalPlan plan = EvalPlan::leave_one_out;

  void validate() const {
    if (batch.p == 0 || batch.k == 0) throw ConfigError("batch.p and batch.k must be positive");
    if (batch.k < 2) throw ConfigError("batch.k must be >= 2 for triplet mining");
    if (data.num_sources == 0) throw ConfigError("data.num_sources must be positive");
    if (data.input_dim == 0) throw ConfigError("data.input_dim must be positive");
    if (data.holdout_identities < 2) throw ConfigError("data.holdout_identities must be >= 2");
    if (epochs_per_round == 0) throw ConfigError("experiment.epochs_per_round must be positive");
    if (!(data.query_fraction > 0.0 && data.query_fraction < 1.0)) {
      throw ConfigError("data.query_fraction must be in (0, 1)");
    }
    if (encoder.hidden_dim == 0 || encoder.output_dim == 0) {
      throw ConfigError("encoder dims must be positive");
    }
    for (const auto& [id, o] : domains) {
      if (id < 0 || static_cast<std::size_t>(id) > data.num_sources) {
        throw ConfigError("[domain." + std::to_string(id) + "] names no domain");
      }
      if ((!o.scale.empty() && o.scale.size() != data.input_dim) ||
          (!o.shift.empty() && o.shift.size() != data.input_dim)) {
        throw ConfigError("[domain." + std::to_string(id) + "] style vectors need input_dim entries");
      }
    }
    loss.validate();
    if (!(memory.momentum >= 0.0 && memory.momentum <= 1.0)) {
      throw ConfigError("memory.momentum must be in [0,1]");
    }
    StyleTransformConfig{transform.mix_alpha, transform.degrade_prob, transform.degrade_sigma,
                         transform.style_jitter, 0}
        .validate();
    OptimizerState{optimizer.base_lr, optimizer.base_lr, optimizer.weight_decay,
                   optimizer.momentum, optimizer.milestones, optimizer.gamma, {}}
        .validate();
    plan_training_sources(plan, data.num_sources);
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names{"baseline", "nsa", "pscu", "full"};
  return names;
}

// baseline: plain FedAvg with CE + triplet. nsa: + styled-image branch.
// pscu: + memory branch with screening. full: everything.
inline AblationFlags ablation_preset(std::string_view name) {
  if (name == "baseline") return {false, false, false};
  if (name == "nsa") return {true, false, false};
  if (name == "pscu") return {false, true, true};
  if (name == "full") return {true, true, true};
  throw ConfigError("unknown ablation '" + std::string(name) + "' (baseline|nsa|pscu|full)");
}

inline OptimizerState make_optimizer_state(const OptimizerConfig& o) {
  OptimizerState s;
  s.base_lr = s.current_lr = o.base_lr;
  s.weight_decay = o.weight_decay;
  s.sgd_momentum = o.momentum;
  s.milestones = o.milestones;
  s.gamma = o.gamma;
  return s;
}

inline StyleTransformConfig make_transform_config(const TransformSettings& t, std::uint64_t seed) {
  return {t.mix_alpha, t.degrade_prob, t.degrade_sigma, t.style_jitter, seed};
}

// Source domains carry ids 0..num_sources-1; the target is num_sources.
// Each spec includes the held-out identities after the training ones.
inline std::vector<DomainSpec> resolve_domains(const ExperimentConfig& cfg) {
  std::vector<DomainSpec> specs;
  const std::size_t total = cfg.data.num_sources + 1;
  Tensor basis = Tensor::matrix(cfg.data.nuisance_dims, cfg.data.input_dim);
  {
    std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x6e75697361ULL));
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t j = 0; j < basis.rows(); ++j) {
      auto row = basis.row(j);
      for (double& v : row) v = n(rng);
      const double norm = std::sqrt(dot(row, row));
      for (double& v : row) v /= norm;
    }
  }
  for (std::size_t k = 0; k < total; ++k) {
    const int id = static_cast<int>(k);
    DomainSpec s;
    s.domain_id = id;
    s.seed = cfg.seed ^ static_cast<std::uint64_t>(id);
    s.num_identities = cfg.data.identities;
    s.samples_per_identity = cfg.data.samples_per_identity;
    s.noise_sigma = cfg.data.noise_sigma;
    if (cfg.data.nuisance_dims > 0) {
      s.nuisance_basis = basis;
      s.nuisance_sigma = cfg.data.nuisance_sigma;
    }
    std::mt19937_64 rng(mix_seed(s.seed ^ 0x7374796c65ULL));
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t c = 0; c < cfg.data.input_dim; ++c) {
      s.style_scale.push_back(std::exp(cfg.data.scale_spread * n(rng)));
      s.style_shift.push_back(cfg.data.shift_spread * n(rng));
    }
    if (auto it = cfg.domains.find(id); it != cfg.domains.end()) {
      const auto& o = it->second;
      if (o.identities >= 0) s.num_identities = static_cast<std::size_t>(o.identities);
      if (o.samples_per_identity >= 0) {
        s.samples_per_identity = static_cast<std::size_t>(o.samples_per_identity);
      }
      if (o.noise_sigma >= 0.0) s.noise_sigma = o.noise_sigma;
      if (!o.scale.empty()) s.style_scale = o.scale;
      if (!o.shift.empty()) s.style_shift = o.shift;
    }
    // The target domain is all test data; sources add held-out identities.
    if (k < cfg.data.num_sources) s.num_identities += cfg.data.holdout_identities;
    s.validate();
    specs.push_back(std::move(s));
  }
  return specs;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline double parse_double(const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::logic_error&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
  if (used != v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline std::size_t parse_size(const std::string& v) { return static_cast<std::size_t>(parse_u64(v)); }

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

template <class T, class F>
std::vector<T> parse_list(const std::string& v, F parse_one) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_one(trim(item)));
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"experiment.seed", [](auto& c, auto& v) { c.seed = parse_u64(v); }},
      {"experiment.rounds", [](auto& c, auto& v) { c.rounds = parse_size(v); }},
      {"experiment.epochs_per_round", [](auto& c, auto& v) { c.epochs_per_round = parse_size(v); }},
      {"experiment.threads", [](auto& c, auto& v) { c.threads = parse_size(v); }},
      {"experiment.output_dir", [](auto& c, auto& v) { c.output_dir = v; }},
      {"data.num_sources", [](auto& c, auto& v) { c.data.num_sources = parse_size(v); }},
      {"data.input_dim", [](auto& c, auto& v) { c.data.input_dim = parse_size(v); }},
      {"data.identities", [](auto& c, auto& v) { c.data.identities = parse_size(v); }},
      {"data.samples_per_identity",
       [](auto& c, auto& v) { c.data.samples_per_identity = parse_size(v); }},
      {"data.holdout_identities", [](auto& c, auto& v) { c.data.holdout_identities = parse_size(v); }},
      {"data.noise_sigma", [](auto& c, auto& v) { c.data.noise_sigma = parse_double(v); }},
      {"data.nuisance_dims", [](auto& c, auto& v) { c.data.nuisance_dims = parse_size(v); }},
      {"data.nuisance_sigma", [](auto& c, auto& v) { c.data.nuisance_sigma = parse_double(v); }},
      {"data.scale_spread", [](auto& c, auto& v) { c.data.scale_spread = parse_double(v); }},
      {"data.shift_spread", [](auto& c, auto& v) { c.data.shift_spread = parse_double(v); }},
      {"data.query_fraction", [](auto& c, auto& v) { c.data.query_fraction = parse_double(v); }},
      {"encoder.hidden_dim", [](auto& c, auto& v) { c.encoder.hidden_dim = parse_size(v); }},
      {"encoder.output_dim", [](auto& c, auto& v) { c.encoder.output_dim = parse_size(v); }},
      {"encoder.activation", [](auto& c, auto& v) { c.encoder.activation = parse_activation(v); }},
      {"loss.temperature", [](auto& c, auto& v) { c.loss.temperature = parse_double(v); }},
      {"loss.triplet_margin", [](auto& c, auto& v) { c.loss.triplet_margin = parse_double(v); }},
      {"loss.label_smoothing", [](auto& c, auto& v) { c.loss.label_smoothing = parse_double(v); }},
      {"optimizer.base_lr", [](auto& c, auto& v) { c.optimizer.base_lr = parse_double(v); }},
      {"optimizer.weight_decay", [](auto& c, auto& v) { c.optimizer.weight_decay = parse_double(v); }},
      {"optimizer.momentum", [](auto& c, auto& v) { c.optimizer.momentum = parse_double(v); }},
      {"optimizer.milestones",
       [](auto& c, auto& v) { c.optimizer.milestones = parse_list<std::size_t>(v, parse_size); }},
      {"optimizer.gamma", [](auto& c, auto& v) { c.optimizer.gamma = parse_double(v); }},
      {"memory.momentum", [](auto& c, auto& v) { c.memory.momentum = parse_double(v); }},
      {"memory.policy", [](auto& c, auto& v) { c.memory.policy = parse_renorm_policy(v); }},
      {"memory.warmup_epochs", [](auto& c, auto& v) { c.memory.warmup_epochs = parse_size(v); }},
      {"memory.init_average",
       [](auto& c, auto& v) { c.memory.init_average = parse_init_average(v); }},
      {"transform.mix_alpha", [](auto& c, auto& v) { c.transform.mix_alpha = parse_double(v); }},
      {"transform.degrade_prob", [](auto& c, auto& v) { c.transform.degrade_prob = parse_double(v); }},
      {"transform.degrade_sigma",
       [](auto& c, auto& v) { c.transform.degrade_sigma = parse_double(v); }},
      {"transform.style_jitter", [](auto& c, auto& v) { c.transform.style_jitter = parse_double(v); }},
      {"transform.force_degrade_rounds",
       [](auto& c, auto& v) {
         c.transform.force_degrade_rounds = parse_list<std::size_t>(v, parse_size);
       }},
      {"ablation.enable_nsa", [](auto& c, auto& v) { c.ablation.enable_nsa = parse_bool(v); }},
      {"ablation.enable_pscu", [](auto& c, auto& v) { c.ablation.enable_pscu = parse_bool(v); }},
      {"ablation.enable_screening",
       [](auto& c, auto& v) { c.ablation.enable_screening = parse_bool(v); }},
      {"batch.p", [](auto& c, auto& v) { c.batch.p = parse_size(v); }},
      {"batch.k", [](auto& c, auto& v) { c.batch.k = parse_size(v); }},
      {"eval.plan", [](auto& c, auto& v) { c.plan = parse_eval_plan(v); }},
  };
  return table;
}

inline void set_domain_key(DomainOverride& o, const std::string& key, const std::string& v) {
  if (key == "identities") {
    o.identities = static_cast<long long>(parse_u64(v));
  } else if (key == "samples_per_identity") {
    o.samples_per_identity = static_cast<long long>(parse_u64(v));
  } else if (key == "noise_sigma") {
    o.noise_sigma = parse_double(v);
  } else if (key == "scale") {
    o.scale = parse_list<double>(v, parse_double);
  } else if (key == "shift") {
    o.shift = parse_list<double>(v, parse_double);
  } else {
    throw ConfigError("unknown key '" + key + "'");
  }
}

}  // namespace detail

// Line-oriented "key = value" text with [section] headers. Keys before the
// first header belong to [experiment]. '#' and ';' start comments.
inline ExperimentConfig parse_config_text(std::string_view text) {
  ExperimentConfig cfg;
  std::istringstream is{std::string(text)};
  std::string line, section = "experiment";
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto cut = line.find_first_of("#;");
    std::string body = detail::trim(cut == std::string::npos ? line : line.substr(0, cut));
    if (body.empty()) continue;
    try {
      if (body.front() == '[') {
        if (body.back() != ']') throw ConfigError("malformed section header '" + body + "'");
        section = detail::trim(std::string_view(body).substr(1, body.size() - 2));
        const bool known = section.rfind("domain.", 0) == 0 ||
                           std::any_of(detail::setters().begin(), detail::setters().end(),
                                       [&](const auto& kv) {
                                         return kv.first.rfind(section + ".", 0) == 0;
                                       });
        if (!known) throw ConfigError("unknown section [" + section + "]");
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + body + "'");
      const std::string key = detail::trim(std::string_view(body).substr(0, eq));
      const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
      if (key.empty()) throw ConfigError("empty key");
      if (section.rfind("domain.", 0) == 0) {
        int id = 0;
        const std::string num = section.substr(7);
        const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), id);
        if (ec != std::errc() || ptr != num.data() + num.size()) {
          throw ConfigError("bad domain section [" + section + "]");
        }
        detail::set_domain_key(cfg.domains[id], key, value);
        continue;
      }
      const auto it = detail::setters().find(section + "." + key);
      if (it == detail::setters().end()) {
        throw ConfigError("unknown key '" + key + "' in [" + section + "]");
      }
      it->second(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Every field, explicitly. Parsing the result reproduces the config exactly.
inline std::string to_config_text(const ExperimentConfig& c) {
  using detail::format_double;
  using detail::join;
  std::ostringstream os;
  auto b = [](bool v) { return v ? "true" : "false"; };
  os << "[experiment]\n"
     << "seed = " << c.seed << "\nrounds = " << c.rounds
     << "\nepochs_per_round = " << c.epochs_per_round << "\nthreads = " << c.threads
     << "\noutput_dir = " << c.output_dir << "\n\n";
  os << "[data]\n"
     << "num_sources = " << c.data.num_sources << "\ninput_dim = " << c.data.input_dim
     << "\nidentities = " << c.data.identities
     << "\nsamples_per_identity = " << c.data.samples_per_identity
     << "\nholdout_identities = " << c.data.holdout_identities
     << "\nnoise_sigma = " << format_double(c.data.noise_sigma)
     << "\nnuisance_dims = " << c.data.nuisance_dims
     << "\nnuisance_sigma = " << format_double(c.data.nuisance_sigma)
     << "\nscale_spread = " << format_double(c.data.scale_spread)
     << "\nshift_spread = " << format_double(c.data.shift_spread)
     << "\nquery_fraction = " << format_double(c.data.query_fraction) << "\n\n";
  for (const auto& [id, o] : c.domains) {
    os << "[domain." << id << "]\n";
    if (o.identities >= 0) os << "identities = " << o.identities << '\n';
    if (o.samples_per_identity >= 0) os << "samples_per_identity = " << o.samples_per_identity << '\n';
    if (o.noise_sigma >= 0.0) os << "noise_sigma = " << format_double(o.noise_sigma) << '\n';
    if (!o.scale.empty()) os << "scale = " << join(o.scale) << '\n';
    if (!o.shift.empty()) os << "shift = " << join(o.shift) << '\n';
    os << '\n';
  }
  os << "[encoder]\n"
     << "hidden_dim = " << c.encoder.hidden_dim << "\noutput_dim = " << c.encoder.output_dim
     << "\nactivation = " << to_string(c.encoder.activation) << "\n\n";
  os << "[loss]\n"
     << "temperature = " << format_double(c.loss.temperature)
     << "\ntriplet_margin = " << format_double(c.loss.triplet_margin)
     << "\nlabel_smoothing = " << format_double(c.loss.label_smoothing) << "\n\n";
  os << "[optimizer]\n"
     << "base_lr = " << format_double(c.optimizer.base_lr)
     << "\nweight_decay = " << format_double(c.optimizer.weight_decay)
     << "\nmomentum = " << format_double(c.optimizer.momentum)
     << "\nmilestones = " << join(c.optimizer.milestones)
     << "\ngamma = " << format_double(c.optimizer.gamma) << "\n\n";
  os << "[memory]\n"
     << "momentum = " << format_double(c.memory.momentum)
     << "\npolicy = " << to_string(c.memory.policy)
     << "\nwarmup_epochs = " << c.memory.warmup_epochs
     << "\ninit_average = " << to_string(c.memory.init_average) << "\n\n";
  os << "[transform]\n"
     << "mix_alpha = " << format_double(c.transform.mix_alpha)
     << "\ndegrade_prob = " << format_double(c.transform.degrade_prob)
     << "\ndegrade_sigma = " << format_double(c.transform.degrade_sigma)
     << "\nstyle_jitter = " << format_double(c.transform.style_jitter)
     << "\nforce_degrade_rounds = " << join(c.transform.force_degrade_rounds) << "\n\n";
  os << "[ablation]\n"
     << "enable_nsa = " << b(c.ablation.enable_nsa)
     << "\nenable_pscu = " << b(c.ablation.enable_pscu)
     << "\nenable_screening = " << b(c.ablation.enable_screening) << "\n\n";
  os << "[batch]\np = " << c.batch.p << "\nk = " << c.batch.k << "\n\n";
  os << "[eval]\nplan = " << to_string(c.plan) << '\n';
  return os.str();
}

}  // namespace fedstyle
