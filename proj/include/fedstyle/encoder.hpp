#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedstyle/errors.hpp"
#include "fedstyle/tensor.hpp"

namespace fedstyle {

enum class Activation { identity, tanh, relu };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "identity" || s == "linear") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

// y = x W^T + b, with W of shape d_out x d_in and b of shape d_out.
struct DenseLayer {
  Tensor weight;
  Tensor bias;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Fully connected feature extractor. The activation is applied between
// layers only; the final layer is linear.
struct EncoderParams {
  std::vector<DenseLayer> layers;
  Activation activation = Activation::tanh;

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw ShapeError("encoder has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.out_dim()) {
        throw ShapeError("encoder layer " + std::to_string(i) + " has inconsistent shapes");
      }
      if (i > 0 && layers[i - 1].out_dim() != l.in_dim()) {
        throw ShapeError("encoder layer " + std::to_string(i) + " does not chain");
      }
    }
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  friend bool operator==(const EncoderParams&, const EncoderParams&) = default;
};

// Identity-classifier head cls_k; one row per identity the client owns.
struct ClassifierParams {
  Tensor weight;
  Tensor bias;

  std::size_t num_classes() const { return weight.rows(); }

  std::vector<Tensor*> tensors() { return {&weight, &bias}; }
  std::vector<const Tensor*> tensors() const { return {&weight, &bias}; }

  friend bool operator==(const ClassifierParams&, const ClassifierParams&) = default;
};

namespace detail {

inline Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t n = x.rows(), d_in = w.cols(), d_out = w.rows();
  Tensor y = Tensor::matrix(n, d_out);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    for (std::size_t o = 0; o < d_out; ++o) {
      double s = b[o];
      const double* wr = &w.values()[o * d_in];
      for (std::size_t i = 0; i < d_in; ++i) s += wr[i] * xr[i];
      y(r, o) = s;
    }
  }
  return y;
}

// Accumulates dW = g^T x and db = colsum(g); returns dx = g W.
inline Tensor linear_backward(const Tensor& x, const Tensor& w, const Tensor& g, Tensor& dw,
                              Tensor& db) {
  const std::size_t n = x.rows(), d_in = w.cols(), d_out = w.rows();
  Tensor dx = Tensor::matrix(n, d_in);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    auto gr = g.row(r);
    auto dxr = dx.row(r);
    for (std::size_t o = 0; o < d_out; ++o) {
      const double go = gr[o];
      if (go == 0.0) continue;
      db[o] += go;
      double* dwr = &dw.values()[o * d_in];
      const double* wr = &w.values()[o * d_in];
      for (std::size_t i = 0; i < d_in; ++i) {
        dwr[i] += go * xr[i];
        dxr[i] += go * wr[i];
      }
    }
  }
  return dx;
}

inline double activate(Activation a, double v) {
  switch (a) {
    case Activation::identity: return v;
    case Activation::tanh: return std::tanh(v);
    case Activation::relu: return v > 0.0 ? v : 0.0;
  }
  return v;
}

// Derivative expressed through the pre-activation value.
inline double activate_grad(Activation a, double pre) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::tanh: {
      const double t = std::tanh(pre);
      return 1.0 - t * t;
    }
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
  }
  return 1.0;
}

}  // namespace detail

// Xavier-uniform weights, zero biases. dims = {d_in, hidden..., d_out}.
inline EncoderParams make_encoder(std::span<const std::size_t> dims, Activation activation,
                                  std::mt19937_64& rng) {
  if (dims.size() < 2) throw ConfigError("encoder needs at least input and output dims");
  EncoderParams p;
  p.activation = activation;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t d_in = dims[i], d_out = dims[i + 1];
    if (d_in == 0 || d_out == 0) throw ConfigError("encoder dims must be positive");
    const double bound = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer l{Tensor::matrix(d_out, d_in), Tensor({d_out}, 0.0)};
    for (double& w : l.weight.values()) w = u(rng);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline ClassifierParams make_classifier(std::size_t num_classes, std::size_t feature_dim,
                                        std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.01);
  ClassifierParams c{Tensor::matrix(num_classes, feature_dim), Tensor({num_classes}, 0.0)};
  for (double& w : c.weight.values()) w = n(rng);
  return c;
}

// Same structure, all entries zero. Used as a gradient accumulator.
template <class Params>
Params zeros_like(const Params& p) {
  Params z = p;
  for (Tensor* t : z.tensors()) {
    for (double& v : t->values()) v = 0.0;
  }
  return z;
}

// Intermediate values kept for the backward pass.
struct EncoderTrace {
  std::vector<Tensor> layer_inputs;
  std::vector<Tensor> pre_activations;
  Tensor output;
};

inline EncoderTrace forward_encoder_traced(const EncoderParams& params, const Tensor& batch) {
  params.validate();
  if (batch.rank() != 2 || batch.cols() != params.input_dim()) {
    throw ShapeError("forward_encoder: batch has " +
                     Tensor::shape_string(batch.shape()) + ", encoder expects d_in = " +
                     std::to_string(params.input_dim()));
  }
  EncoderTrace trace;
  Tensor h = batch;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    trace.layer_inputs.push_back(h);
    Tensor z = detail::linear_forward(h, l.weight, l.bias);
    const bool last = i + 1 == params.layers.size();
    trace.pre_activations.push_back(z);
    if (!last) {
      for (double& v : z.values()) v = detail::activate(params.activation, v);
    }
    h = std::move(z);
  }
  require_finite(h, "forward_encoder");
  trace.output = std::move(h);
  return trace;
}

inline Tensor forward_encoder(const EncoderParams& params, const Tensor& batch) {
  return forward_encoder_traced(params, batch).output;
}

// Parameter gradients for dL/d(output) = grad_output.
inline EncoderParams backward_encoder(const EncoderParams& params, const EncoderTrace& trace,
                                      const Tensor& grad_output) {
  require_same_shape(trace.output, grad_output, "backward_encoder");
  EncoderParams grads = zeros_like(params);
  Tensor g = grad_output;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    const bool last = i + 1 == params.layers.size();
    if (!last) {
      const Tensor& pre = trace.pre_activations[i];
      for (std::size_t j = 0; j < g.size(); ++j) {
        g[j] *= detail::activate_grad(params.activation, pre[j]);
      }
    }
    g = detail::linear_backward(trace.layer_inputs[i], params.layers[i].weight, g,
                                grads.layers[i].weight, grads.layers[i].bias);
  }
  return grads;
}

inline Tensor forward_classifier(const ClassifierParams& cls, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != cls.weight.cols()) {
    throw ShapeError("forward_classifier: feature dim mismatch");
  }
  return detail::linear_forward(features, cls.weight, cls.bias);
}

struct ClassifierBackward {
  ClassifierParams grads;
  Tensor grad_features;
};

inline ClassifierBackward backward_classifier(const ClassifierParams& cls, const Tensor& features,
                                              const Tensor& grad_logits) {
  ClassifierBackward out{zeros_like(cls), {}};
  out.grad_features =
      detail::linear_backward(features, cls.weight, grad_logits, out.grads.weight, out.grads.bias);
  return out;
}

inline constexpr double kMinRowNorm = 1e-12;

// Row-wise unit normalization. Zero rows are rejected, not silently passed.
inline Tensor l2_normalize(const Tensor& v) {
  Tensor out = v;
  for (std::size_t r = 0; r < v.rows(); ++r) {
    auto row = out.row(r);
    const double n = std::sqrt(dot(row, row));
    if (!(n > kMinRowNorm)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has norm " +
                                 std::to_string(n));
    }
    for (double& x : row) x /= n;
  }
  return out;
}

// d/dv of normalize(v): (g - u (u.g)) / |v| per row.
inline Tensor l2_normalize_backward(const Tensor& input, const Tensor& grad_output) {
  require_same_shape(input, grad_output, "l2_normalize_backward");
  Tensor out = Tensor::matrix(input.rows(), input.cols());
  for (std::size_t r = 0; r < input.rows(); ++r) {
    auto x = input.row(r);
    auto g = grad_output.row(r);
    const double n = std::sqrt(dot(x, x));
    if (!(n > kMinRowNorm)) throw DegenerateInputError("l2_normalize_backward: zero row");
    const double ug = dot(x, g) / n;
    auto o = out.row(r);
    for (std::size_t c = 0; c < x.size(); ++c) o[c] = (g[c] - (x[c] / n) * ug) / n;
  }
  return out;
}

}  // namespace fedstyle
