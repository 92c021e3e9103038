#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fedstyle/domain.hpp"
#include "fedstyle/encoder.hpp"
#include "fedstyle/errors.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

// renormalize: M <- normalize((1-m) M + m * mean(F)), rows stay unit length.
// paper_literal: M <- (1-m) M + m * sum(F), magnitudes unconstrained.
enum class RenormPolicy { renormalize, paper_literal };

// Whether initial prototypes average normalized features (default) or raw features.
enum class InitAverage { normalized, raw };

inline std::string_view to_string(RenormPolicy p) {
  return p == RenormPolicy::renormalize ? "renormalize" : "paper_literal";
}
inline RenormPolicy parse_renorm_policy(std::string_view s) {
  if (s == "renormalize") return RenormPolicy::renormalize;
  if (s == "paper_literal") return RenormPolicy::paper_literal;
  throw ConfigError("unknown memory policy '" + std::string(s) + "'");
}
inline std::string_view to_string(InitAverage a) {
  return a == InitAverage::normalized ? "normalized" : "raw";
}
inline InitAverage parse_init_average(std::string_view s) {
  if (s == "normalized") return InitAverage::normalized;
  if (s == "raw") return InitAverage::raw;
  throw ConfigError("unknown memory init_average '" + std::string(s) + "'");
}

// Per-client bank of identity prototypes.
class StyleMemory {
 public:
  StyleMemory() = default;
  StyleMemory(Tensor prototypes, double momentum, RenormPolicy policy)
      : prototypes_(std::move(prototypes)),
        momentum_(momentum),
        policy_(policy),
        update_count_(prototypes_.rows(), 0),
        initialized_(true) {
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("memory momentum must be in [0,1]");
  }

  bool initialized() const noexcept { return initialized_; }
  std::size_t num_identities() const { return require_init().rows(); }
  std::size_t feature_dim() const { return require_init().cols(); }
  double momentum() const noexcept { return momentum_; }
  RenormPolicy policy() const noexcept { return policy_; }
  const std::vector<std::size_t>& update_count() const noexcept { return update_count_; }

  // Returned by value: a snapshot callers cannot mutate the memory through.
  Tensor prototypes() const { return require_init(); }

  friend bool operator==(const StyleMemory&, const StyleMemory&) = default;

 private:
  friend struct MemoryAccess;

  const Tensor& require_init() const {
    if (!initialized_) throw StateError("style memory is not initialized");
    return prototypes_;
  }

  Tensor prototypes_;
  double momentum_ = 0.2;
  RenormPolicy policy_ = RenormPolicy::renormalize;
  std::vector<std::size_t> update_count_;
  bool initialized_ = false;
};

struct MemoryAccess {
  static Tensor& prototypes(StyleMemory& m) {
    m.require_init();
    return m.prototypes_;
  }
  static std::vector<std::size_t>& update_count(StyleMemory& m) { return m.update_count_; }
};

namespace detail {

inline void normalize_in_place(std::span<double> row, const char* what) {
  const double n = std::sqrt(dot(row, row));
  if (!(n > kMinRowNorm)) throw DegenerateInputError(std::string(what) + ": zero-norm prototype");
  for (double& v : row) v /= n;
}

}  // namespace detail

inline StyleMemory initialize_memory(const DomainDataset& ds, const EncoderParams& encoder,
                                     double momentum = 0.2,
                                     RenormPolicy policy = RenormPolicy::renormalize,
                                     InitAverage average = InitAverage::normalized) {
  const auto groups = ds.by_identity();
  Tensor feats = forward_encoder(encoder, ds.all_features());
  if (average == InitAverage::normalized) feats = l2_normalize(feats);
  const std::size_t d = feats.cols();
  Tensor protos = Tensor::matrix(groups.size(), d);
  for (std::size_t id = 0; id < groups.size(); ++id) {
    if (groups[id].empty()) {
      throw StateError("initialize_memory: identity " + std::to_string(id) + " has no samples");
    }
    auto row = protos.row(id);
    for (std::size_t i : groups[id]) {
      auto f = feats.row(i);
      for (std::size_t c = 0; c < d; ++c) row[c] += f[c];
    }
    for (double& v : row) v /= static_cast<double>(groups[id].size());
    if (policy == RenormPolicy::renormalize) detail::normalize_in_place(row, "initialize_memory");
  }
  return StyleMemory(std::move(protos), momentum, policy);
}

struct MemoryUpdateOutcome {
  bool applied = false;
  std::string warning;
};

// Folds the unit-norm style features of one identity into its prototype.
inline MemoryUpdateOutcome momentum_update(StyleMemory& memory, Label identity,
                                           const Tensor& style_features) {
  Tensor& protos = MemoryAccess::prototypes(memory);
  if (identity >= protos.rows()) {
    throw IndexError("momentum_update: identity " + std::to_string(identity) + " out of range");
  }
  if (style_features.rank() != 2 || style_features.rows() == 0) {
    return {false, "momentum_update: no style features for identity " + std::to_string(identity)};
  }
  if (style_features.cols() != protos.cols()) throw ShapeError("momentum_update: feature dim");
  const std::size_t n = style_features.rows(), d = protos.cols();
  const double m = memory.momentum();
  std::vector<double> agg(d, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto f = style_features.row(r);
    for (std::size_t c = 0; c < d; ++c) agg[c] += f[c];
  }
  auto row = protos.row(identity);
  if (memory.policy() == RenormPolicy::renormalize) {
    for (double& v : agg) v /= static_cast<double>(n);
    for (std::size_t c = 0; c < d; ++c) row[c] = (1.0 - m) * row[c] + m * agg[c];
    detail::normalize_in_place(row, "momentum_update");
  } else {
    for (std::size_t c = 0; c < d; ++c) row[c] = (1.0 - m) * row[c] + m * agg[c];
  }
  ++MemoryAccess::update_count(memory)[identity];
  return {true, {}};
}

inline Tensor prototype_matrix(const StyleMemory& memory) { return memory.prototypes(); }

// Text checkpoint: "P d m policy" then P rows of d values, 17 significant digits.
inline std::string to_checkpoint_text(const StyleMemory& memory) {
  const Tensor& p = memory.prototypes();
  std::ostringstream os;
  os << std::setprecision(17);
  os << p.rows() << ' ' << p.cols() << ' ' << memory.momentum() << ' '
     << to_string(memory.policy()) << '\n';
  for (std::size_t r = 0; r < p.rows(); ++r) {
    for (std::size_t c = 0; c < p.cols(); ++c) os << (c ? " " : "") << p(r, c);
    os << '\n';
  }
  return os.str();
}

inline StyleMemory from_checkpoint_text(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::size_t rows = 0, cols = 0;
  double m = 0.0;
  std::string policy;
  if (!(is >> rows >> cols >> m >> policy)) throw ConfigError("memory checkpoint: bad header");
  Tensor p = Tensor::matrix(rows, cols);
  for (double& v : p.values()) {
    std::string tok;
    if (!(is >> tok)) throw ConfigError("memory checkpoint: truncated values");
    v = std::stod(tok);
  }
  return StyleMemory(std::move(p), m, parse_renorm_policy(policy));
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t checkpoint_hash(const StyleMemory& memory) {
  return fnv1a64(to_checkpoint_text(memory));
}

}  // namespace fedstyle
