#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <future>
#include <iomanip>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedstyle/config.hpp"
#include "fedstyle/domain.hpp"
#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/eval.hpp"
#include "fedstyle/losses.hpp"
#include "fedstyle/memory.hpp"
#include "fedstyle/optimizer.hpp"

namespace fedstyle {

struct ClientState {
  int client_id = 0;
  DomainDataset dataset;
  EncoderParams client_global;
  EncoderParams client_local;
  ClassifierParams classifier;
  StyleMemory memory;
  StyleTransformConfig transform;
  OptimizerState opt_global;
  OptimizerState opt_local;
  OptimizerState opt_classifier;
  std::mt19937_64 rng;
};

// Holds only the aggregated feature extractor: classifiers stay on clients.
struct ServerState {
  EncoderParams global_encoder;
  std::size_t round = 0;
  std::optional<double> last_rank1;
  std::vector<std::size_t> client_sizes;

  std::vector<double> weights() const {
    double total = 0.0;
    for (std::size_t n : client_sizes) total += static_cast<double>(n);
    if (!(total > 0.0)) throw ConfigError("aggregate: total client data volume is zero");
    std::vector<double> w;
    for (std::size_t n : client_sizes) w.push_back(static_cast<double>(n) / total);
    return w;
  }
};

// Unit-norm style features of one client for one round, grouped by identity.
class ClientStyleCache {
 public:
  ClientStyleCache() = default;
  ClientStyleCache(std::size_t num_identities, std::size_t dim)
      : rows_(num_identities), dim_(dim) {}

  void append(Label identity, std::span<const double> row) {
    if (row.size() != dim_) throw ShapeError("style cache: feature dim mismatch");
    rows_.at(identity).insert(rows_.at(identity).end(), row.begin(), row.end());
  }

  std::size_t num_identities() const { return rows_.size(); }
  std::size_t count(Label identity) const { return rows_.at(identity).size() / dim_; }

  Tensor features(Label identity) const {
    const auto& r = rows_.at(identity);
    return Tensor({r.size() / dim_, dim_}, r);
  }

  void clear() {
    for (auto& r : rows_) r.clear();
  }

 private:
  std::vector<std::vector<double>> rows_;
  std::size_t dim_ = 0;
};

struct StyleFeatureCache {
  std::vector<ClientStyleCache> clients;

  void clear() {
    for (auto& c : clients) c.clear();
  }
};

struct ClientRoundReport {
  int client_id = 0;
  std::size_t iterations = 0;
  std::size_t degraded_batches = 0;
  double mean_ns = 0.0;
  double mean_ps = 0.0;
  std::vector<double> ns_per_iteration;
};

struct TrainingOptions {
  LossConfig loss;
  std::size_t p = 16;
  std::size_t k = 4;
  std::size_t epochs_per_round = 1;
  // Global epoch index of this round's first local epoch, for the lr schedule.
  std::size_t first_epoch = 0;
  bool enable_nsa = true;
  bool enable_pscu = true;
  bool force_degrade = false;
};

inline void distribute(const ServerState& server, std::span<ClientState> clients) {
  server.global_encoder.validate();
  for (auto& c : clients) c.client_global = server.global_encoder;
}

inline std::size_t iterations_per_epoch(std::size_t dataset_size, std::size_t p, std::size_t k) {
  const std::size_t b = p * k;
  return std::max<std::size_t>(1, (dataset_size + b - 1) / b);
}

namespace detail {

// One recognition-loss step for an encoder on untransformed inputs.
inline double recognition_step(EncoderParams& model, OptimizerState& opt, const Tensor& inputs,
                               std::span<const Label> labels, const Tensor& prototypes,
                               double temperature) {
  const auto trace = forward_encoder_traced(model, inputs);
  const Tensor unit = l2_normalize(trace.output);
  const auto rec = recognition_loss(unit, labels, prototypes, temperature);
  const auto grads = backward_encoder(model, trace, l2_normalize_backward(trace.output, rec.grad));
  sgd_step(model, grads, opt);
  return rec.loss;
}

}  // namespace detail

// One round of collaborative style training on a client. Per iteration:
// styled-batch CE + triplet step on client_global and the classifier, then
// recognition-loss steps on client_local and client_global using the original
// batch, then caching of normalized client_global features of the styled batch.
inline ClientRoundReport cst_round(ClientState& client, const TrainingOptions& opts,
                                   ClientStyleCache& cache) {
  if (opts.enable_pscu && !client.memory.initialized()) {
    throw StateError("cst_round: client " + std::to_string(client.client_id) +
                     " memory is not initialized");
  }
  StyleTransformConfig transform = client.transform;
  if (opts.force_degrade) transform.degrade_prob = 1.0;
  const Tensor prototypes = opts.enable_pscu ? client.memory.prototypes() : Tensor{};

  ClientRoundReport report;
  report.client_id = client.client_id;
  double ps_sum = 0.0;
  const std::size_t iters = iterations_per_epoch(client.dataset.size(), opts.p, opts.k);
  for (std::size_t ep = 0; ep < opts.epochs_per_round; ++ep) {
    for (OptimizerState* o : {&client.opt_global, &client.opt_local, &client.opt_classifier}) {
      lr_schedule(*o, opts.first_epoch + ep);
    }
    for (std::size_t it = 0; it < iters; ++it) {
      const Batch batch = sample_pk_batch(client.dataset, opts.p, opts.k, client.rng);
      Tensor styled = batch.features;
      if (opts.enable_nsa) {
        auto out = style_transform_detailed(batch.features, transform, client.rng);
        report.degraded_batches += out.degraded ? 1 : 0;
        styled = std::move(out.batch);
      }

      // New-style branch.
      const auto trace = forward_encoder_traced(client.client_global, styled);
      const Tensor logits = forward_classifier(client.classifier, trace.output);
      const auto ce = cross_entropy_loss(logits, batch.labels, opts.loss.label_smoothing);
      const auto tri = triplet_loss(trace.output, batch.labels, opts.loss.triplet_margin);
      auto cls_back = backward_classifier(client.classifier, trace.output, ce.grad);
      Tensor feat_grad = cls_back.grad_features;
      for (std::size_t j = 0; j < feat_grad.size(); ++j) feat_grad[j] += tri.grad[j];
      const auto enc_grads = backward_encoder(client.client_global, trace, feat_grad);
      sgd_step(client.client_global, enc_grads, client.opt_global);
      sgd_step(client.classifier, cls_back.grads, client.opt_classifier);
      report.ns_per_iteration.push_back(ce.loss + tri.loss);

      if (opts.enable_pscu) {
        // Positive-style branch.
        const double ps_local =
            detail::recognition_step(client.client_local, client.opt_local, batch.features,
                                     batch.labels, prototypes, opts.loss.temperature);
        const double ps_global =
            detail::recognition_step(client.client_global, client.opt_global, batch.features,
                                     batch.labels, prototypes, opts.loss.temperature);
        ps_sum += ps_local + ps_global;

        const Tensor style_feats = l2_normalize(forward_encoder(client.client_global, styled));
        for (std::size_t r = 0; r < style_feats.rows(); ++r) {
          cache.append(batch.labels[r], style_feats.row(r));
        }
      }
      ++report.iterations;
    }
  }
  double ns_sum = 0.0;
  for (double v : report.ns_per_iteration) ns_sum += v;
  if (report.iterations > 0) {
    report.mean_ns = ns_sum / static_cast<double>(report.iterations);
    report.mean_ps = ps_sum / static_cast<double>(report.iterations);
  }
  return report;
}

// Sum_k w_k * encoder_k over every parameter tensor.
inline EncoderParams weighted_average(std::span<const EncoderParams* const> encoders,
                                      std::span<const double> weights) {
  if (encoders.empty() || encoders.size() != weights.size()) {
    throw ConfigError("weighted_average: need one weight per encoder");
  }
  EncoderParams out = zeros_like(*encoders.front());
  auto dst = out.tensors();
  for (std::size_t k = 0; k < encoders.size(); ++k) {
    if (encoders[k]->layers.size() != out.layers.size()) throw ShapeError("aggregate: layer count");
    const auto src = encoders[k]->tensors();
    for (std::size_t t = 0; t < dst.size(); ++t) {
      require_same_shape(*dst[t], *src[t], "aggregate");
      for (std::size_t j = 0; j < dst[t]->size(); ++j) (*dst[t])[j] += weights[k] * (*src[t])[j];
    }
  }
  return out;
}

// Only client_global feature extractors are uploaded.
inline void aggregate(ServerState& server, std::span<const ClientState> clients) {
  if (clients.size() != server.client_sizes.size()) {
    throw ConfigError("aggregate: client count does not match recorded data volumes");
  }
  const auto w = server.weights();
  std::vector<const EncoderParams*> encs;
  for (const auto& c : clients) encs.push_back(&c.client_global);
  server.global_encoder = weighted_average(encs, w);
}

struct LedgerEntry {
  std::size_t round = 0;
  std::optional<double> rank1_before;
  double rank1_after = 0.0;
  // Outcome of the gate rule: first round or strict Rank-1 increase.
  bool positive = false;
  bool screening = true;
  bool memory_updated = false;
  std::vector<double> mean_ns;
  std::vector<double> mean_ps;
  std::vector<std::size_t> degraded_batches;
  std::vector<std::uint64_t> memory_hashes;
  double lr = 0.0;
  // Not serialized: the ledger file must be reproducible byte for byte.
  double wall_seconds = 0.0;
};

inline bool gate_rule(const std::optional<double>& before, double after) {
  return !before.has_value() || after > *before;
}

inline std::string to_json_line(const LedgerEntry& e) {
  nlohmann::ordered_json j;
  j["round"] = e.round;
  if (e.rank1_before) {
    j["rank1_before"] = *e.rank1_before;
  } else {
    j["rank1_before"] = nullptr;
  }
  j["rank1_after"] = e.rank1_after;
  j["decision"] = e.positive ? "positive" : "negative";
  j["screening"] = e.screening;
  j["memory_updated"] = e.memory_updated;
  j["mean_L_NS"] = e.mean_ns;
  j["mean_L_PS"] = e.mean_ps;
  j["degraded_batches"] = e.degraded_batches;
  std::vector<std::string> hashes;
  for (auto h : e.memory_hashes) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    hashes.push_back(os.str());
  }
  j["memory_hashes"] = hashes;
  j["lr"] = e.lr;
  return j.dump();
}

struct ScreeningOptions {
  bool memory_enabled = true;
  bool screening_enabled = true;
  std::size_t training_sources = 0;
};

// Evaluates the aggregated model on the source validation splits and folds
// this round's style features into the memories when the gate passes.
// Caches are always cleared.
inline LedgerEntry screen_and_update(ServerState& server, std::span<ClientState> clients,
                                     StyleFeatureCache& cache, const EvalData& data,
                                     const ScreeningOptions& opts) {
  LedgerEntry e;
  e.round = server.round;
  e.screening = opts.screening_enabled;
  const std::size_t n_sources = opts.training_sources ? opts.training_sources : clients.size();
  e.rank1_after = source_validation_rank1(server.global_encoder, data, n_sources);
  e.rank1_before = server.last_rank1;
  e.positive = gate_rule(e.rank1_before, e.rank1_after);
  const bool apply = opts.memory_enabled && (!opts.screening_enabled || e.positive);
  if (apply) {
    for (std::size_t k = 0; k < clients.size(); ++k) {
      if (!clients[k].memory.initialized() || k >= cache.clients.size()) continue;
      const auto& cc = cache.clients[k];
      for (Label id = 0; id < cc.num_identities(); ++id) {
        if (cc.count(id) == 0) continue;
        momentum_update(clients[k].memory, id, cc.features(id));
      }
    }
    e.memory_updated = true;
  }
  cache.clear();
  server.last_rank1 = e.rank1_after;
  for (const auto& c : clients) {
    e.memory_hashes.push_back(c.memory.initialized() ? checkpoint_hash(c.memory) : 0);
  }
  return e;
}

// Training data, evaluation splits and the initial models of one experiment.
struct ExperimentSetup {
  std::vector<DomainSpec> specs;
  std::vector<DomainDataset> train;  // one per training source
  EvalData eval;
  std::size_t training_sources = 0;
  std::size_t batch_p = 0;
  std::vector<std::string> warnings;
};

inline ExperimentSetup prepare_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentSetup s;
  s.specs = resolve_domains(cfg);
  s.training_sources = plan_training_sources(cfg.plan, cfg.data.num_sources);
  std::mt19937_64 split_rng(mix_seed(cfg.seed ^ 0x73706c6974ULL));
  for (std::size_t k = 0; k < cfg.data.num_sources; ++k) {
    const auto full = generate_domain(s.specs[k]);
    const std::size_t train_ids = full.num_identities - cfg.data.holdout_identities;
    s.train.push_back(select_identities(full, 0, train_ids));
    const auto holdout = select_identities(full, train_ids, cfg.data.holdout_identities);
    s.eval.sources.push_back(
        {full.domain_id, make_query_gallery_split(holdout, cfg.data.query_fraction, split_rng)});
  }
  const auto target = generate_domain(s.specs.back());
  s.eval.target = {target.domain_id,
                   make_query_gallery_split(target, cfg.data.query_fraction, split_rng)};
  s.train.resize(s.training_sources);

  s.batch_p = cfg.batch.p;
  for (const auto& ds : s.train) {
    if (ds.num_identities < s.batch_p) {
      s.warnings.push_back("domain " + std::to_string(ds.domain_id) + " has " +
                           std::to_string(ds.num_identities) + " identities; clamping P from " +
                           std::to_string(s.batch_p));
      s.batch_p = ds.num_identities;
    }
    const auto groups = ds.by_identity();
    for (const auto& g : groups) {
      if (g.size() < cfg.batch.k) {
        throw SamplingError("domain " + std::to_string(ds.domain_id) +
                            " has an identity with fewer than K samples");
      }
    }
  }
  return s;
}

inline EncoderParams initial_server_encoder(const ExperimentConfig& cfg) {
  std::mt19937_64 rng(mix_seed(cfg.seed ^ 0x656e636f646572ULL));
  const std::vector<std::size_t> dims{cfg.data.input_dim, cfg.encoder.hidden_dim,
                                      cfg.encoder.output_dim};
  return make_encoder(dims, cfg.encoder.activation, rng);
}

// Clients before memory initialization: models copied from the server,
// fresh classifiers and optimizers, per-client RNG streams.
inline std::vector<ClientState> make_clients(const ExperimentConfig& cfg, const ExperimentSetup& s,
                                             const EncoderParams& server_encoder) {
  std::vector<ClientState> clients;
  for (const auto& ds : s.train) {
    ClientState c;
    c.client_id = ds.domain_id;
    c.dataset = ds;
    c.client_global = server_encoder;
    c.client_local = server_encoder;
    const std::uint64_t client_seed = cfg.seed ^ static_cast<std::uint64_t>(ds.domain_id);
    c.rng.seed(mix_seed(client_seed ^ 0x636c69656e74ULL));
    c.classifier = make_classifier(ds.num_identities, server_encoder.output_dim(), c.rng);
    c.transform = make_transform_config(cfg.transform, client_seed);
    c.opt_global = c.opt_local = c.opt_classifier = make_optimizer_state(cfg.optimizer);
    clients.push_back(std::move(c));
  }
  return clients;
}

// Warm-up with client-side cross entropy on a copy of the server encoder,
// then prototypes from that encoder. The warmed copy seeds client_local.
inline void initialize_client_memory(ClientState& c, const ExperimentConfig& cfg,
                                     std::size_t batch_p) {
  EncoderParams warm = c.client_global;
  OptimizerState opt = make_optimizer_state(cfg.optimizer);
  const std::size_t iters = iterations_per_epoch(c.dataset.size(), batch_p, cfg.batch.k);
  for (std::size_t ep = 0; ep < cfg.memory.warmup_epochs; ++ep) {
    for (std::size_t it = 0; it < iters; ++it) {
      const Batch b = sample_pk_batch(c.dataset, batch_p, cfg.batch.k, c.rng);
      const auto trace = forward_encoder_traced(warm, b.features);
      const auto ce = cross_entropy_loss(forward_classifier(c.classifier, trace.output), b.labels,
                                         cfg.loss.label_smoothing);
      auto cb = backward_classifier(c.classifier, trace.output, ce.grad);
      sgd_step(warm, backward_encoder(warm, trace, cb.grad_features), opt);
      sgd_step(c.classifier, cb.grads, c.opt_classifier);
    }
  }
  c.memory = initialize_memory(c.dataset, warm, cfg.memory.momentum, cfg.memory.policy,
                               cfg.memory.init_average);
  c.client_local = std::move(warm);
}

struct MetricRow {
  std::size_t round = 0;
  EvalPlan plan = EvalPlan::leave_one_out;
  int domain = 0;
  double map = 0.0;
  double rank1 = 0.0;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "round,plan,domain,map,rank1\n" << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    os << r.round << ',' << to_string(r.plan) << ',' << r.domain << ',' << r.map << ','
       << r.rank1 << '\n';
  }
  return os.str();
}

inline std::string ledger_jsonl(const std::vector<LedgerEntry>& entries) {
  std::string out;
  for (const auto& e : entries) out += to_json_line(e) + '\n';
  return out;
}

struct ExperimentResult {
  EncoderParams final_encoder;
  std::vector<MetricRow> metrics;
  std::vector<LedgerEntry> ledger;
  std::vector<DomainReport> final_reports;
  std::vector<StyleMemory> memories;
  std::vector<std::string> warnings;
};

// Raised when a run fails midway; carries everything completed so far.
class ExperimentError : public Error {
 public:
  ExperimentError(const std::string& what, ExperimentResult partial)
      : Error(what), partial_(std::move(partial)) {}
  const ExperimentResult& partial() const noexcept { return partial_; }

 private:
  ExperimentResult partial_;
};

struct RoundView {
  std::size_t round;
  const ServerState& server;
  std::span<const ClientState> clients;
  const LedgerEntry& entry;
};

struct RunHooks {
  std::function<void(const RoundView&)> on_round;
  std::function<void(const std::string&)> on_warning;
};

// Runs cst_round for every client; with threads > 1 clients train
// concurrently. Each client owns its RNG and state, so results do not depend
// on scheduling.
inline std::vector<ClientRoundReport> train_clients(std::vector<ClientState>& clients,
                                                    StyleFeatureCache& cache,
                                                    const TrainingOptions& opts,
                                                    std::size_t threads) {
  std::vector<ClientRoundReport> reports(clients.size());
  const std::size_t workers = std::max<std::size_t>(1, threads);
  for (std::size_t start = 0; start < clients.size(); start += workers) {
    const std::size_t end = std::min(clients.size(), start + workers);
    if (workers == 1) {
      reports[start] = cst_round(clients[start], opts, cache.clients[start]);
      continue;
    }
    std::vector<std::future<ClientRoundReport>> jobs;
    for (std::size_t k = start; k < end; ++k) {
      jobs.push_back(std::async(std::launch::async, [&, k] {
        return cst_round(clients[k], opts, cache.clients[k]);
      }));
    }
    for (std::size_t k = start; k < end; ++k) reports[k] = jobs[k - start].get();
  }
  return reports;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const RunHooks& hooks = {}) {
  ExperimentResult result;
  const ExperimentSetup setup = prepare_experiment(cfg);
  result.warnings = setup.warnings;
  if (hooks.on_warning) {
    for (const auto& w : setup.warnings) hooks.on_warning(w);
  }

  ServerState server;
  server.global_encoder = initial_server_encoder(cfg);
  auto clients = make_clients(cfg, setup, server.global_encoder);
  for (const auto& c : clients) server.client_sizes.push_back(c.dataset.size());

  const auto& flags = cfg.ablation;
  try {
    if (flags.enable_pscu) {
      for (auto& c : clients) initialize_client_memory(c, cfg, setup.batch_p);
    }
    StyleFeatureCache cache;
    for (const auto& c : clients) {
      cache.clients.emplace_back(c.dataset.num_identities, cfg.encoder.output_dim);
    }

    for (std::size_t e = 1; e <= cfg.rounds; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      server.round = e;
      distribute(server, clients);

      TrainingOptions opts;
      opts.loss = cfg.loss;
      opts.p = setup.batch_p;
      opts.k = cfg.batch.k;
      opts.epochs_per_round = cfg.epochs_per_round;
      opts.first_epoch = (e - 1) * cfg.epochs_per_round;
      opts.enable_nsa = flags.enable_nsa;
      opts.enable_pscu = flags.enable_pscu;
      const auto& forced = cfg.transform.force_degrade_rounds;
      opts.force_degrade = std::find(forced.begin(), forced.end(), e) != forced.end();

      const auto reports = train_clients(clients, cache, opts, cfg.threads);
      aggregate(server, clients);

      auto entry = screen_and_update(
          server, clients, cache, setup.eval,
          {flags.enable_pscu, flags.enable_screening, setup.training_sources});
      for (const auto& r : reports) {
        entry.mean_ns.push_back(r.mean_ns);
        entry.mean_ps.push_back(r.mean_ps);
        entry.degraded_batches.push_back(r.degraded_batches);
      }
      entry.lr = clients.front().opt_global.current_lr;

      for (const auto& rep : evaluate_plan(server.global_encoder, cfg.plan, setup.eval,
                                           setup.training_sources)) {
        result.metrics.push_back({e, cfg.plan, rep.domain_id, rep.metrics.map, rep.metrics.rank1});
      }
      entry.wall_seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.ledger.push_back(entry);
      if (hooks.on_round) hooks.on_round({e, server, clients, result.ledger.back()});
    }
    result.final_reports =
        evaluate_plan(server.global_encoder, cfg.plan, setup.eval, setup.training_sources);
  } catch (const Error& err) {
    result.final_encoder = server.global_encoder;
    throw ExperimentError(std::string("experiment aborted at round ") +
                              std::to_string(server.round) + ": " + err.what(),
                          std::move(result));
  }
  result.final_encoder = server.global_encoder;
  for (const auto& c : clients) {
    if (c.memory.initialized()) result.memories.push_back(c.memory);
  }
  return result;
}

}  // namespace fedstyle
