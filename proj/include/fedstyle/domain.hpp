#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fedstyle/errors.hpp"
#include "fedstyle/losses.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

// splitmix64 finalizer; used to derive independent seeds from one experiment seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct DomainSpec {
  int domain_id = 0;
  std::size_t num_identities = 20;
  std::size_t samples_per_identity = 10;
  std::vector<double> style_scale;
  std::vector<double> style_shift;
  double noise_sigma = 0.5;
  // Optional zero-mean nuisance factor: rows of nuisance_basis (m x d_in) are
  // directions shared by every sample, weighted by N(0, nuisance_sigma^2).
  Tensor nuisance_basis;
  double nuisance_sigma = 0.0;
  std::uint64_t seed = 0;

  std::size_t feature_dim() const { return style_scale.size(); }

  void validate() const {
    if (num_identities < 2) throw ConfigError("domain needs at least 2 identities");
    if (samples_per_identity < 2) throw ConfigError("domain needs at least 2 samples per identity");
    if (style_scale.empty() || style_scale.size() != style_shift.size()) {
      throw ConfigError("domain style_scale/style_shift must be non-empty and equally sized");
    }
    for (double s : style_scale) {
      if (!(s > 0.0)) throw ConfigError("domain style_scale entries must be > 0");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("domain noise_sigma must be >= 0");
    if (!(nuisance_sigma >= 0.0)) throw ConfigError("domain nuisance_sigma must be >= 0");
    if (!nuisance_basis.empty() && nuisance_basis.cols() != style_scale.size()) {
      throw ConfigError("domain nuisance_basis needs d_in columns");
    }
  }

  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct Sample {
  std::vector<double> features;
  Label identity = 0;
  int domain = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DomainDataset {
  int domain_id = 0;
  std::size_t num_identities = 0;
  std::size_t feature_dim = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }

  // Sample indices grouped by identity, in dataset order.
  std::vector<std::vector<std::size_t>> by_identity() const {
    std::vector<std::vector<std::size_t>> groups(num_identities);
    for (std::size_t i = 0; i < samples.size(); ++i) groups.at(samples[i].identity).push_back(i);
    return groups;
  }

  Tensor features(std::span<const std::size_t> indices) const {
    Tensor out = Tensor::matrix(indices.size(), feature_dim);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const auto& f = samples.at(indices[r]).features;
      std::copy(f.begin(), f.end(), out.row(r).begin());
    }
    return out;
  }

  Tensor all_features() const {
    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return features(idx);
  }

  std::vector<Label> labels(std::span<const std::size_t> indices) const {
    std::vector<Label> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(samples.at(i).identity);
    return out;
  }

  friend bool operator==(const DomainDataset&, const DomainDataset&) = default;
};

// num_identities x dim matrix of standard-normal identity latents.
inline Tensor draw_identity_latents(std::size_t num_identities, std::size_t dim,
                                    std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed ^ 0x6c6174656e74ULL));
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t = Tensor::matrix(num_identities, dim);
  for (double& v : t.values()) v = n(rng);
  return t;
}

// x = scale * (latent + eps + B^T a) + shift, eps ~ N(0, noise_sigma^2),
// a ~ N(0, nuisance_sigma^2) per nuisance direction. Without a nuisance basis
// this is x = scale * (latent + eps) + shift.
inline DomainDataset generate_domain(const DomainSpec& spec, const Tensor& identity_latents) {
  spec.validate();
  const std::size_t d = spec.feature_dim();
  if (identity_latents.cols() != d) throw ShapeError("generate_domain: latent dim != d_in");
  if (identity_latents.rows() < spec.num_identities) {
    throw ShapeError("generate_domain: fewer latents than identities");
  }
  std::mt19937_64 rng(mix_seed(spec.seed ^ 0x6e6f697365ULL));
  std::normal_distribution<double> noise(0.0, 1.0);
  const bool has_nuisance = !spec.nuisance_basis.empty() && spec.nuisance_sigma > 0.0;
  DomainDataset ds{spec.domain_id, spec.num_identities, d, {}};
  ds.samples.reserve(spec.num_identities * spec.samples_per_identity);
  std::vector<double> nuisance(d);
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    auto latent = identity_latents.row(id);
    for (std::size_t s = 0; s < spec.samples_per_identity; ++s) {
      Sample smp{std::vector<double>(d), id, spec.domain_id};
      std::fill(nuisance.begin(), nuisance.end(), 0.0);
      if (has_nuisance) {
        for (std::size_t j = 0; j < spec.nuisance_basis.rows(); ++j) {
          const double a = spec.nuisance_sigma * noise(rng);
          auto dir = spec.nuisance_basis.row(j);
          for (std::size_t c = 0; c < d; ++c) nuisance[c] += a * dir[c];
        }
      }
      for (std::size_t c = 0; c < d; ++c) {
        const double eps = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
        smp.features[c] =
            spec.style_scale[c] * (latent[c] + eps + nuisance[c]) + spec.style_shift[c];
      }
      ds.samples.push_back(std::move(smp));
    }
  }
  return ds;
}

// Independent per-domain latents drawn from the spec's own seed.
inline DomainDataset generate_domain(const DomainSpec& spec) {
  spec.validate();
  return generate_domain(spec,
                         draw_identity_latents(spec.num_identities, spec.feature_dim(), spec.seed));
}

// Keeps identities [first, first + count) and relabels them from 0.
inline DomainDataset select_identities(const DomainDataset& ds, std::size_t first,
                                       std::size_t count) {
  if (first + count > ds.num_identities) throw IndexError("select_identities: range too large");
  DomainDataset out{ds.domain_id, count, ds.feature_dim, {}};
  for (const auto& s : ds.samples) {
    if (s.identity >= first && s.identity < first + count) {
      Sample c = s;
      c.identity -= first;
      out.samples.push_back(std::move(c));
    }
  }
  return out;
}

// Stand-in for a learned per-client style generator: batch feature statistics
// are re-mixed toward a random style, and a "negative style" event adds noise
// that destroys identity detail.
struct StyleTransformConfig {
  double mix_alpha = 0.5;
  double degrade_prob = 0.0;
  double degrade_sigma = 0.0;
  // Spread of the random target style, in units of the batch statistics.
  double style_jitter = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(mix_alpha >= 0.0 && mix_alpha <= 1.0)) throw ConfigError("transform.mix_alpha must be in [0,1]");
    if (!(degrade_prob >= 0.0 && degrade_prob <= 1.0)) {
      throw ConfigError("transform.degrade_prob must be in [0,1]");
    }
    if (!(degrade_sigma >= 0.0)) throw ConfigError("transform.degrade_sigma must be >= 0");
    if (!(style_jitter >= 0.0)) throw ConfigError("transform.style_jitter must be >= 0");
  }

  friend bool operator==(const StyleTransformConfig&, const StyleTransformConfig&) = default;
};

struct StyleTransformOutcome {
  Tensor batch;
  bool degraded = false;
};

inline StyleTransformOutcome style_transform_detailed(const Tensor& batch,
                                                      const StyleTransformConfig& cfg,
                                                      std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t b = batch.rows(), d = batch.cols();
  StyleTransformOutcome out{batch, false};
  std::normal_distribution<double> normal(0.0, 1.0);
  if (cfg.mix_alpha > 0.0) {
    if (b < 2) throw ShapeError("style_transform: batch statistics need at least 2 rows");
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < b; ++r) mean += batch(r, c);
      mean /= static_cast<double>(b);
      double var = 0.0;
      for (std::size_t r = 0; r < b; ++r) var += (batch(r, c) - mean) * (batch(r, c) - mean);
      const double sd = std::sqrt(var / static_cast<double>(b) + 1e-6);
      const double target_mean = mean + cfg.style_jitter * sd * normal(rng);
      const double target_sd = sd * std::exp(0.5 * cfg.style_jitter * normal(rng));
      const double new_mean = (1.0 - cfg.mix_alpha) * mean + cfg.mix_alpha * target_mean;
      const double new_sd = (1.0 - cfg.mix_alpha) * sd + cfg.mix_alpha * target_sd;
      for (std::size_t r = 0; r < b; ++r) {
        out.batch(r, c) = (batch(r, c) - mean) / sd * new_sd + new_mean;
      }
    }
  }
  if (cfg.degrade_prob > 0.0) {
    std::bernoulli_distribution event(cfg.degrade_prob);
    if (event(rng)) {
      out.degraded = true;
      for (double& v : out.batch.values()) v += cfg.degrade_sigma * normal(rng);
    }
  }
  return out;
}

// Label-preserving: row i of the output corresponds to row i of the input.
inline Tensor style_transform(const Tensor& batch, const StyleTransformConfig& cfg,
                              std::mt19937_64& rng) {
  return style_transform_detailed(batch, cfg, rng).batch;
}

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<Label> labels;
  Tensor features;
};

// P distinct identities x K instances each, uniform without replacement.
inline Batch sample_pk_batch(const DomainDataset& ds, std::size_t p, std::size_t k,
                             std::mt19937_64& rng) {
  if (p == 0 || k == 0) throw SamplingError("sample_pk_batch: P and K must be positive");
  const auto groups = ds.by_identity();
  std::vector<Label> eligible;
  for (Label id = 0; id < groups.size(); ++id) {
    if (groups[id].size() >= k) eligible.push_back(id);
  }
  if (eligible.size() < p) {
    throw SamplingError("sample_pk_batch: need " + std::to_string(p) + " identities with >= " +
                        std::to_string(k) + " samples, have " + std::to_string(eligible.size()));
  }
  std::vector<Label> chosen;
  std::sample(eligible.begin(), eligible.end(), std::back_inserter(chosen), p, rng);
  std::shuffle(chosen.begin(), chosen.end(), rng);
  Batch batch;
  for (Label id : chosen) {
    std::vector<std::size_t> picks;
    std::sample(groups[id].begin(), groups[id].end(), std::back_inserter(picks), k, rng);
    for (std::size_t i : picks) {
      batch.indices.push_back(i);
      batch.labels.push_back(id);
    }
  }
  batch.features = ds.features(batch.indices);
  return batch;
}

struct QueryGallerySplit {
  std::vector<std::size_t> query_indices;
  std::vector<std::size_t> gallery_indices;
  std::vector<Sample> queries;
  std::vector<Sample> gallery;
};

inline QueryGallerySplit make_query_gallery_split(const DomainDataset& ds, double query_fraction,
                                                  std::mt19937_64& rng) {
  if (!(query_fraction >= 0.0 && query_fraction < 1.0)) {
    throw SplitError("query_fraction must be in [0, 1)");
  }
  QueryGallerySplit split;
  auto groups = ds.by_identity();
  for (Label id = 0; id < groups.size(); ++id) {
    auto& g = groups[id];
    if (g.empty()) continue;
    if (g.size() < 2) {
      throw SplitError("identity " + std::to_string(id) + " has a single sample");
    }
    std::shuffle(g.begin(), g.end(), rng);
    std::size_t nq = 0;
    if (query_fraction > 0.0) {
      const auto want = static_cast<std::size_t>(std::llround(query_fraction * g.size()));
      nq = std::clamp<std::size_t>(want, 1, g.size() - 1);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      (i < nq ? split.query_indices : split.gallery_indices).push_back(g[i]);
    }
  }
  std::sort(split.query_indices.begin(), split.query_indices.end());
  std::sort(split.gallery_indices.begin(), split.gallery_indices.end());
  for (std::size_t i : split.query_indices) split.queries.push_back(ds.samples[i]);
  for (std::size_t i : split.gallery_indices) split.gallery.push_back(ds.samples[i]);
  return split;
}

// CSV with header domain,identity,f0..f{d-1}; values at 17 significant digits.
inline void write_dataset_csv(std::ostream& os, const DomainDataset& ds) {
  os << "domain,identity";
  for (std::size_t c = 0; c < ds.feature_dim; ++c) os << ",f" << c;
  os << '\n' << std::setprecision(17);
  for (const auto& s : ds.samples) {
    os << s.domain << ',' << s.identity;
    for (double v : s.features) os << ',' << v;
    os << '\n';
  }
}

inline DomainDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("dataset csv: missing header");
  std::size_t columns = std::count(line.begin(), line.end(), ',') + 1;
  if (columns < 3 || line.rfind("domain,identity,f0", 0) != 0) {
    throw ConfigError("dataset csv: bad header '" + line + "'");
  }
  DomainDataset ds;
  ds.feature_dim = columns - 2;
  std::size_t line_no = 1;
  bool first = true;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns) {
      throw ConfigError("dataset csv line " + std::to_string(line_no) + ": expected " +
                        std::to_string(columns) + " cells");
    }
    Sample s;
    try {
      s.domain = std::stoi(cells[0]);
      s.identity = std::stoull(cells[1]);
      for (std::size_t c = 2; c < cells.size(); ++c) s.features.push_back(std::stod(cells[c]));
    } catch (const std::logic_error&) {
      throw ConfigError("dataset csv line " + std::to_string(line_no) + ": malformed number");
    }
    if (first) ds.domain_id = s.domain, first = false;
    ds.num_identities = std::max(ds.num_identities, s.identity + 1);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace fedstyle
