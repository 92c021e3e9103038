#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedstyle/domain.hpp"
#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

struct RankingResult {
  // order[q] lists gallery indices by ascending distance, ties by index.
  std::vector<std::vector<std::size_t>> order;
  // matches[q][r] is true when the item at rank r shares the query identity.
  std::vector<std::vector<bool>> matches;

  std::size_t num_queries() const { return order.size(); }
  std::size_t gallery_size() const { return order.empty() ? 0 : order.front().size(); }
};

struct MetricsReport {
  double map = 0.0;
  double rank1 = 0.0;
  std::vector<double> cmc;
  std::size_t num_queries = 0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

// Ranks unit-norm gallery features by cosine distance 1 - q.g for each query.
inline RankingResult rank_features(const Tensor& query_features, std::span<const Label> query_ids,
                                   const Tensor& gallery_features,
                                   std::span<const Label> gallery_ids) {
  if (gallery_features.rows() == 0) throw EvalError("rank_gallery: empty gallery");
  if (query_features.cols() != gallery_features.cols()) throw ShapeError("rank_gallery: dims");
  const std::size_t nq = query_features.rows(), ng = gallery_features.rows();
  RankingResult out;
  out.order.resize(nq);
  out.matches.resize(nq);
  std::vector<double> dist(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    auto qf = query_features.row(q);
    for (std::size_t g = 0; g < ng; ++g) dist[g] = 1.0 - dot(qf, gallery_features.row(g));
    auto& ord = out.order[q];
    ord.resize(ng);
    std::iota(ord.begin(), ord.end(), std::size_t{0});
    std::stable_sort(ord.begin(), ord.end(),
                     [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
    out.matches[q].reserve(ng);
    for (std::size_t g : ord) out.matches[q].push_back(gallery_ids[g] == query_ids[q]);
  }
  return out;
}

inline std::vector<Label> sample_labels(const std::vector<Sample>& samples) {
  std::vector<Label> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.identity);
  return out;
}

inline Tensor sample_features(const std::vector<Sample>& samples, std::size_t dim) {
  Tensor out = Tensor::matrix(samples.size(), dim);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].features.begin(), samples[i].features.end(), out.row(i).begin());
  }
  return out;
}

inline RankingResult rank_gallery(const EncoderParams& encoder, const QueryGallerySplit& split) {
  if (split.gallery.empty()) throw EvalError("rank_gallery: empty gallery");
  const std::size_t d_in = encoder.input_dim();
  Tensor gf = l2_normalize(forward_encoder(encoder, sample_features(split.gallery, d_in)));
  Tensor qf = split.queries.empty()
                  ? Tensor::matrix(0, gf.cols())
                  : l2_normalize(forward_encoder(encoder, sample_features(split.queries, d_in)));
  return rank_features(qf, sample_labels(split.queries), gf, sample_labels(split.gallery));
}

// Uninterpolated AP: mean over relevant ranks r of precision@r.
inline double average_precision(const std::vector<bool>& matches) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < matches.size(); ++r) {
    if (matches[r]) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  if (hits == 0.0) throw EvalError("compute_map: query without relevant gallery items");
  return sum / hits;
}

inline double compute_map(const RankingResult& ranking) {
  if (ranking.num_queries() == 0) throw EvalError("compute_map: no queries");
  double s = 0.0;
  for (const auto& m : ranking.matches) s += average_precision(m);
  return s / static_cast<double>(ranking.num_queries());
}

inline std::vector<double> compute_cmc(const RankingResult& ranking, std::size_t max_rank) {
  if (max_rank > ranking.gallery_size()) throw EvalError("compute_cmc: max_rank > gallery size");
  if (ranking.num_queries() == 0) throw EvalError("compute_cmc: no queries");
  std::vector<double> cmc(max_rank, 0.0);
  for (const auto& m : ranking.matches) {
    const auto first = std::find(m.begin(), m.end(), true);
    const auto pos = static_cast<std::size_t>(first - m.begin());
    for (std::size_t r = pos; r < max_rank; ++r) cmc[r] += 1.0;
  }
  for (double& v : cmc) v /= static_cast<double>(ranking.num_queries());
  return cmc;
}

inline MetricsReport evaluate_split(const EncoderParams& encoder, const QueryGallerySplit& split) {
  if (split.queries.empty()) throw EvalError("evaluate: split has no queries");
  const auto ranking = rank_gallery(encoder, split);
  MetricsReport r;
  r.map = compute_map(ranking);
  r.cmc = compute_cmc(ranking, std::min<std::size_t>(ranking.gallery_size(), 20));
  r.rank1 = r.cmc.front();
  r.num_queries = ranking.num_queries();
  return r;
}

// leave_one_out: test on the held-out target domain, all sources train.
// reduced_sources: as leave_one_out but the last source sits out of training.
// source_domains: test on the held-out split of every training domain.
enum class EvalPlan { leave_one_out, reduced_sources, source_domains };

inline std::string_view to_string(EvalPlan p) {
  switch (p) {
    case EvalPlan::leave_one_out: return "leave_one_out";
    case EvalPlan::reduced_sources: return "reduced_sources";
    case EvalPlan::source_domains: return "source_domains";
  }
  return "?";
}

inline EvalPlan parse_eval_plan(std::string_view s) {
  if (s == "leave_one_out") return EvalPlan::leave_one_out;
  if (s == "reduced_sources") return EvalPlan::reduced_sources;
  if (s == "source_domains") return EvalPlan::source_domains;
  throw ConfigError("unknown eval plan '" + std::string(s) + "'");
}

// Number of source domains that take part in training under a plan.
inline std::size_t plan_training_sources(EvalPlan plan, std::size_t num_sources) {
  if (plan == EvalPlan::reduced_sources) {
    if (num_sources < 2) throw ConfigError("reduced_sources plan needs at least 2 sources");
    return num_sources - 1;
  }
  return num_sources;
}

struct DomainSplit {
  int domain_id = 0;
  QueryGallerySplit split;
};

// Held-out evaluation data for one experiment.
struct EvalData {
  DomainSplit target;
  std::vector<DomainSplit> sources;
};

struct DomainReport {
  int domain_id = 0;
  MetricsReport metrics;

  friend bool operator==(const DomainReport&, const DomainReport&) = default;
};

// Reports for the domains a plan tests on. For source_domains only the
// first `training_sources` source splits are tested.
inline std::vector<DomainReport> evaluate_plan(const EncoderParams& encoder, EvalPlan plan,
                                               const EvalData& data,
                                               std::optional<std::size_t> training_sources = {}) {
  std::vector<DomainReport> out;
  switch (plan) {
    case EvalPlan::leave_one_out:
    case EvalPlan::reduced_sources:
      out.push_back({data.target.domain_id, evaluate_split(encoder, data.target.split)});
      break;
    case EvalPlan::source_domains: {
      const std::size_t n = std::min(training_sources.value_or(data.sources.size()),
                                     data.sources.size());
      for (std::size_t i = 0; i < n; ++i) {
        out.push_back({data.sources[i].domain_id, evaluate_split(encoder, data.sources[i].split)});
      }
      break;
    }
  }
  return out;
}

// Rank-1 averaged over source validation splits.
inline double source_validation_rank1(const EncoderParams& encoder, const EvalData& data,
                                      std::size_t training_sources) {
  if (training_sources == 0 || data.sources.empty()) throw EvalError("empty screening split");
  double s = 0.0;
  for (std::size_t i = 0; i < training_sources; ++i) {
    s += evaluate_split(encoder, data.sources[i].split).rank1;
  }
  return s / static_cast<double>(training_sources);
}

}  // namespace fedstyle
