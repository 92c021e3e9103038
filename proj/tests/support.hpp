#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "fedstyle/fedstyle.hpp"

namespace fedstyle::testing {

inline Tensor random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                            double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = n(rng);
  return t;
}

inline Tensor random_unit_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  return l2_normalize(random_matrix(rows, cols, rng));
}

// P identities x K instances, identity-major.
inline std::vector<Label> pk_labels(std::size_t p, std::size_t k) {
  std::vector<Label> out;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < k; ++j) out.push_back(i);
  }
  return out;
}

// Central differences of f at x, step h.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  Tensor g(x.shape(), 0.0);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

// Straight-line ranking: sort (distance, index) pairs.
inline std::vector<std::vector<bool>> brute_force_matches(const Tensor& q,
                                                          const std::vector<Label>& qids,
                                                          const Tensor& g,
                                                          const std::vector<Label>& gids) {
  std::vector<std::vector<bool>> out;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    std::vector<std::pair<double, std::size_t>> items;
    for (std::size_t j = 0; j < g.rows(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += q(i, c) * g(j, c);
      items.emplace_back(1.0 - s, j);
    }
    std::sort(items.begin(), items.end());
    std::vector<bool> m;
    for (const auto& [d, j] : items) m.push_back(gids[j] == qids[i]);
    out.push_back(m);
  }
  return out;
}

// AP as the mean of precision@r over relevant ranks, computed by counting
// hits in each prefix.
inline double brute_force_ap(const std::vector<bool>& m) {
  double sum = 0.0;
  int relevant = 0;
  for (std::size_t r = 0; r < m.size(); ++r) {
    if (!m[r]) continue;
    ++relevant;
    int hits = 0;
    for (std::size_t s = 0; s <= r; ++s) hits += m[s] ? 1 : 0;
    sum += static_cast<double>(hits) / static_cast<double>(r + 1);
  }
  return sum / relevant;
}

// Small, fast experiment used by the integration tests.
inline ExperimentConfig small_config(std::uint64_t seed = 3) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.rounds = 3;
  cfg.data.identities = 8;
  cfg.data.holdout_identities = 4;
  cfg.data.samples_per_identity = 6;
  cfg.data.input_dim = 8;
  cfg.encoder.hidden_dim = 12;
  cfg.encoder.output_dim = 6;
  cfg.batch.p = 4;
  cfg.batch.k = 3;
  return cfg;
}

}  // namespace fedstyle::testing
