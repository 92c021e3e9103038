#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedstyle/errors.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

using Label = std::size_t;

struct LossConfig {
  double temperature = 0.05;
  double triplet_margin = 0.3;
  double label_smoothing = 0.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("loss.temperature must be > 0");
    if (!(triplet_margin >= 0.0)) throw ConfigError("loss.triplet_margin must be >= 0");
    if (!(label_smoothing >= 0.0 && label_smoothing < 0.5)) {
      throw ConfigError("loss.label_smoothing must be in [0, 0.5)");
    }
  }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

// Scalar loss with its gradient w.r.t. the first input.
struct LossResult {
  double loss = 0.0;
  Tensor grad;
};

namespace detail {

inline void require_labels(std::span<const Label> labels, std::size_t rows, const char* what) {
  if (labels.size() != rows) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  }
}

// Numerically stable softmax of a row, written into out.
inline void softmax_row(std::span<const double> z, std::span<double> out) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
}

inline double log_sum_exp(std::span<const double> z) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

}  // namespace detail

// Mean softmax cross entropy. With smoothing eps the target is
// (1 - eps) * onehot + eps / P.
inline LossResult cross_entropy_loss(const Tensor& logits, std::span<const Label> labels,
                                     double label_smoothing = 0.0) {
  const std::size_t n = logits.rows(), p = logits.cols();
  detail::require_labels(labels, n, "cross_entropy_loss");
  if (n == 0) throw ShapeError("cross_entropy_loss: empty batch");
  LossResult out{0.0, Tensor::matrix(n, p)};
  const double off = label_smoothing / static_cast<double>(p);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= p) {
      throw IndexError("cross_entropy_loss: label " + std::to_string(labels[r]) +
                       " outside [0, " + std::to_string(p) + ")");
    }
    auto z = logits.row(r);
    const double lse = detail::log_sum_exp(z);
    auto g = out.grad.row(r);
    detail::softmax_row(z, g);
    for (std::size_t c = 0; c < p; ++c) {
      const double target = (c == labels[r] ? 1.0 - label_smoothing : 0.0) + off;
      if (target > 0.0) out.loss += target * (lse - z[c]);
      g[c] = (g[c] - target) / static_cast<double>(n);
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

// Throws unless every identity present has >= 2 rows and >= 2 identities exist.
inline void require_pk_batch(std::span<const Label> labels) {
  std::map<Label, std::size_t> counts;
  for (Label l : labels) ++counts[l];
  if (counts.size() < 2) throw SamplingError("triplet batch needs at least 2 identities");
  for (const auto& [id, c] : counts) {
    if (c < 2) {
      throw SamplingError("triplet batch: identity " + std::to_string(id) +
                          " has a single instance");
    }
  }
}

// Batch-hard triplet loss on Euclidean distances:
// mean over anchors of max(0, max_pos d - min_neg d + margin).
inline LossResult triplet_loss(const Tensor& features, std::span<const Label> labels,
                               double margin) {
  const std::size_t n = features.rows(), d = features.cols();
  detail::require_labels(labels, n, "triplet_loss");
  require_pk_batch(labels);

  Tensor dist = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double t = features(i, c) - features(j, c);
        s += t * t;
      }
      // Floor keeps the gradient of coincident points finite.
      dist(i, j) = dist(j, i) = std::sqrt(std::max(s, 1e-24));
    }
  }

  LossResult out{0.0, Tensor::matrix(n, d)};
  const double inv_n = 1.0 / static_cast<double>(n);
  auto accumulate_pair = [&](std::size_t a, std::size_t b, double sign) {
    const double dab = dist(a, b);
    for (std::size_t c = 0; c < d; ++c) {
      const double g = sign * inv_n * (features(a, c) - features(b, c)) / dab;
      out.grad(a, c) += g;
      out.grad(b, c) -= g;
    }
  };
  for (std::size_t a = 0; a < n; ++a) {
    std::size_t hardest_pos = a, hardest_neg = a;
    double d_ap = -1.0, d_an = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (dist(a, j) > d_ap) d_ap = dist(a, j), hardest_pos = j;
      } else if (dist(a, j) < d_an) {
        d_an = dist(a, j), hardest_neg = j;
      }
    }
    const double hinge = d_ap - d_an + margin;
    if (hinge > 0.0) {
      out.loss += hinge;
      accumulate_pair(a, hardest_pos, +1.0);
      accumulate_pair(a, hardest_neg, -1.0);
    }
  }
  out.loss *= inv_n;
  return out;
}

// Prototype recognition loss: softmax over dot-product similarities to the
// memory rows, scaled by 1/temperature. Prototypes are constants here; the
// gradient is w.r.t. the features only.
inline LossResult recognition_loss(const Tensor& features, std::span<const Label> labels,
                                   const Tensor& prototypes, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("recognition_loss: temperature must be > 0");
  const std::size_t n = features.rows(), d = features.cols(), p = prototypes.rows();
  detail::require_labels(labels, n, "recognition_loss");
  if (prototypes.cols() != d) throw ShapeError("recognition_loss: prototype dim mismatch");
  if (n == 0) throw ShapeError("recognition_loss: empty batch");

  LossResult out{0.0, Tensor::matrix(n, d)};
  std::vector<double> logits(p), probs(p);
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= p) {
      throw IndexError("recognition_loss: no prototype for identity " +
                       std::to_string(labels[r]));
    }
    auto f = features.row(r);
    for (std::size_t k = 0; k < p; ++k) logits[k] = dot(f, prototypes.row(k)) / temperature;
    out.loss += detail::log_sum_exp(logits) - logits[labels[r]];
    detail::softmax_row(logits, probs);
    auto g = out.grad.row(r);
    for (std::size_t k = 0; k < p; ++k) {
      const double w = (probs[k] - (k == labels[r] ? 1.0 : 0.0)) / (temperature * n);
      auto m = prototypes.row(k);
      for (std::size_t c = 0; c < d; ++c) g[c] += w * m[c];
    }
  }
  out.loss /= static_cast<double>(n);
  return out;
}

}  // namespace fedstyle
