/* Copyright 2026 The flatlora Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */
#pragma once

// Feed-forward networks whose linear layers carry a frozen base weight W0 and
// a trainable low-rank update s*B*A. Inputs are stored column-per-sample.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flatlora/linalg.hpp"
#include "flatlora/rng.hpp"

namespace flatlora {

enum class Activation { tanh, relu, identity };
enum class LossKind { mse, softmax_cross_entropy };

/// Linear layer y = (W0 + s*B*A) x with W0 frozen.
class LoRALinear {
 public:
  LoRALinear(Matrix w0, Matrix b, Matrix a, double scale)
      : w0_(std::move(w0)), b_(std::move(b)), a_(std::move(a)), scale_(scale) {
    if (b_.rows() != w0_.rows() || a_.cols() != w0_.cols() ||
        b_.cols() != a_.rows()) {
      throw ShapeError("LoRALinear: W0 " + w0_.shape() + ", B " + b_.shape() +
                       ", A " + a_.shape());
    }
    if (rank() == 0 || rank() > std::min(out_dim(), in_dim())) {
      throw ShapeError("LoRALinear: rank " + std::to_string(rank()) +
                       " must lie in [1, min(" + std::to_string(out_dim()) +
                       ", " + std::to_string(in_dim()) + ")]");
    }
    if (!(scale_ > 0.0)) throw DomainError("LoRALinear: scale must be positive");
  }

  /// Kaiming-style A (std sqrt(2 / fan_in)) and zero B.
  static LoRALinear initialized(Matrix w0, std::size_t rank, double scale,
                                Rng& rng) {
    const std::size_t n = w0.rows(), m = w0.cols();
    Matrix a = rng.normal_matrix(rank, m, std::sqrt(2.0 / static_cast<double>(m)));
    return {std::move(w0), Matrix(n, rank), std::move(a), scale};
  }

  const Matrix& w0() const noexcept { return w0_; }
  const Matrix& b() const noexcept { return b_; }
  const Matrix& a() const noexcept { return a_; }
  Matrix& b() noexcept { return b_; }
  Matrix& a() noexcept { return a_; }
  double scale() const noexcept { return scale_; }
  std::size_t rank() const noexcept { return a_.rows(); }
  std::size_t out_dim() const noexcept { return w0_.rows(); }
  std::size_t in_dim() const noexcept { return w0_.cols(); }

  /// W0 + s*B*A, recomputed on every call.
  Matrix merged_weight() const {
    Matrix w = matmul(b_, a_);
    w *= scale_;
    w += w0_;
    return w;
  }

 private:
  Matrix w0_;
  Matrix b_;
  Matrix a_;
  double scale_;
};

struct Network {
  std::vector<LoRALinear> layers;
  Activation activation = Activation::tanh;
  LossKind loss = LossKind::mse;

  std::size_t input_dim() const { return layers.front().in_dim(); }
  std::size_t output_dim() const { return layers.back().out_dim(); }

  void validate() const {
    if (layers.empty()) throw ShapeError("network has no layers");
    for (std::size_t i = 1; i < layers.size(); ++i) {
      if (layers[i].in_dim() != layers[i - 1].out_dim()) {
        throw ShapeError("layer " + std::to_string(i) + " expects input dim " +
                         std::to_string(layers[i].in_dim()) + " but layer " +
                         std::to_string(i - 1) + " produces " +
                         std::to_string(layers[i - 1].out_dim()));
      }
    }
  }
};

/// Builds a network from explicit frozen base weights, one per layer.
inline Network make_network(std::vector<Matrix> base_weights, std::size_t rank,
                            double scale, Activation act, LossKind loss,
                            Rng& rng) {
  Network net;
  net.activation = act;
  net.loss = loss;
  for (Matrix& w0 : base_weights) {
    net.layers.push_back(LoRALinear::initialized(std::move(w0), rank, scale, rng));
  }
  net.validate();
  return net;
}

/// Columns are samples.
struct Batch {
  Matrix inputs;   // features x batch
  Matrix targets;  // outputs x batch

  std::size_t size() const noexcept { return inputs.cols(); }
};

struct LayerGradients {
  Matrix grad_b;
  Matrix grad_a;
  std::optional<Matrix> grad_w;  // gradient w.r.t. the merged weight
};

struct GradientSet {
  std::vector<LayerGradients> layers;
  double loss = 0.0;  // batch loss at the evaluation point
};

struct ForwardResult {
  Matrix predictions;
  double loss = 0.0;
};

namespace detail {

inline void check_batch(const Network& net, const Batch& batch) {
  net.validate();
  if (batch.inputs.cols() != batch.targets.cols()) {
    throw ShapeError("batch inputs " + batch.inputs.shape() + " vs targets " +
                     batch.targets.shape());
  }
  if (batch.inputs.rows() != net.input_dim() ||
      batch.targets.rows() != net.output_dim()) {
    throw ShapeError("batch inputs " + batch.inputs.shape() + " / targets " +
                     batch.targets.shape() + " do not fit network " +
                     std::to_string(net.input_dim()) + " -> " +
                     std::to_string(net.output_dim()));
  }
  if (batch.size() == 0) throw ShapeError("empty batch");
}

inline void activate(Activation act, Matrix& z) {
  switch (act) {
    case Activation::tanh:
      for (double& v : z.data()) v = std::tanh(v);
      break;
    case Activation::relu:
      for (double& v : z.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::identity:
      break;
  }
}

// delta *= act'(.) expressed through the activation output h.
inline void activation_backward(Activation act, const Matrix& h, Matrix& delta) {
  switch (act) {
    case Activation::tanh:
      for (std::size_t i = 0; i < h.size(); ++i)
        delta.data()[i] *= 1.0 - h.data()[i] * h.data()[i];
      break;
    case Activation::relu:
      for (std::size_t i = 0; i < h.size(); ++i)
        if (!(h.data()[i] > 0.0)) delta.data()[i] = 0.0;
      break;
    case Activation::identity:
      break;
  }
}

// Mean-reduced loss and, when `delta` is non-null, dL/d(logits).
inline double loss_and_delta(LossKind kind, const Matrix& out, const Matrix& t,
                             Matrix* delta) {
  const std::size_t n = out.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (delta) *delta = Matrix(out.rows(), n);
  double total = 0.0;
  if (kind == LossKind::mse) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out.data()[i] - t.data()[i];
      total += 0.5 * r * r;
      if (delta) delta->data()[i] = r * inv_n;
    }
    return total * inv_n;
  }
  for (std::size_t j = 0; j < n; ++j) {
    double mx = out(0, j);
    for (std::size_t i = 1; i < out.rows(); ++i) mx = std::max(mx, out(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < out.rows(); ++i) z += std::exp(out(i, j) - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t i = 0; i < out.rows(); ++i) {
      total -= t(i, j) * (out(i, j) - log_z);
      if (delta) {
        (*delta)(i, j) = (std::exp(out(i, j) - log_z) - t(i, j)) * inv_n;
      }
    }
  }
  return total * inv_n;
}

struct Activations {
  std::vector<Matrix> h;  // h[0] = inputs, h[l+1] = output of layer l
};

inline Activations run_forward(std::span<const Matrix> weights, Activation act,
                               const Matrix& inputs) {
  Activations cache;
  cache.h.reserve(weights.size() + 1);
  cache.h.push_back(inputs);
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Matrix z = matmul(weights[l], cache.h.back());
    if (l + 1 < weights.size()) activate(act, z);
    cache.h.push_back(std::move(z));
  }
  return cache;
}

inline std::vector<Matrix> merged_weights(const Network& net,
                                          std::span<const Matrix> offsets = {}) {
  if (!offsets.empty() && offsets.size() != net.layers.size()) {
    throw ShapeError("weight offsets: " + std::to_string(offsets.size()) +
                     " matrices for " + std::to_string(net.layers.size()) +
                     " layers");
  }
  std::vector<Matrix> w;
  w.reserve(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    w.push_back(net.layers[l].merged_weight());
    if (!offsets.empty() && !offsets[l].empty()) w.back() += offsets[l];
  }
  return w;
}

// Loss and per-layer dL/dW for an unfactored network with the given weights.
inline std::pair<double, std::vector<Matrix>> weight_space_backward(
    std::span<const Matrix> weights, Activation act, LossKind kind,
    const Batch& batch) {
  const Activations cache = run_forward(weights, act, batch.inputs);
  Matrix delta;
  const double loss = loss_and_delta(kind, cache.h.back(), batch.targets, &delta);
  std::vector<Matrix> grad_w(weights.size());
  for (std::size_t l = weights.size(); l-- > 0;) {
    grad_w[l] = matmul_nt(delta, cache.h[l]);
    if (l > 0) {
      Matrix prev = matmul_tn(weights[l], delta);
      activation_backward(act, cache.h[l], prev);
      delta = std::move(prev);
    }
  }
  return {loss, std::move(grad_w)};
}

}  // namespace detail

/// Predictions and mean batch loss.
inline ForwardResult forward(const Network& net, const Batch& batch) {
  detail::check_batch(net, batch);
  const std::vector<Matrix> w = detail::merged_weights(net);
  detail::Activations cache = detail::run_forward(w, net.activation, batch.inputs);
  const double loss =
      detail::loss_and_delta(net.loss, cache.h.back(), batch.targets, nullptr);
  return {std::move(cache.h.back()), loss};
}

inline double loss(const Network& net, const Batch& batch) {
  return forward(net, batch).loss;
}

/// Loss with full-space offsets added to each merged weight:
/// L(W0 + sBA + E). An empty offset matrix leaves that layer unchanged.
inline double loss_with_weight_offsets(const Network& net, const Batch& batch,
                                       std::span<const Matrix> offsets) {
  detail::check_batch(net, batch);
  const std::vector<Matrix> w = detail::merged_weights(net, offsets);
  const detail::Activations cache =
      detail::run_forward(w, net.activation, batch.inputs);
  return detail::loss_and_delta(net.loss, cache.h.back(), batch.targets, nullptr);
}

/// dL/dW for every merged weight, evaluated at W0 + sBA + offsets.
inline std::pair<double, std::vector<Matrix>> merged_weight_gradients(
    const Network& net, const Batch& batch, std::span<const Matrix> offsets = {}) {
  detail::check_batch(net, batch);
  const std::vector<Matrix> w = detail::merged_weights(net, offsets);
  return detail::weight_space_backward(w, net.activation, net.loss, batch);
}

/// Exact gradients of the mean batch loss w.r.t. every B and A:
///   grad_b = s * grad_w * A^T,  grad_a = s * B^T * grad_w.
inline GradientSet backward(const Network& net, const Batch& batch,
                            bool want_grad_w = false) {
  auto [loss_value, grad_w] = merged_weight_gradients(net, batch);
  GradientSet out;
  out.loss = loss_value;
  out.layers.reserve(net.layers.size());
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LoRALinear& layer = net.layers[l];
    LayerGradients g;
    g.grad_b = matmul_nt(grad_w[l], layer.a());
    g.grad_b *= layer.scale();
    g.grad_a = matmul_tn(layer.b(), grad_w[l]);
    g.grad_a *= layer.scale();
    if (want_grad_w) g.grad_w = std::move(grad_w[l]);
    out.layers.push_back(std::move(g));
  }
  return out;
}

/// s * E^B * A: the full-space weight shift produced by perturbing B.
inline Matrix effective_full_perturbation(const Matrix& e_b, const Matrix& a,
                                          double scale) {
  Matrix out = matmul(e_b, a);
  out *= scale;
  return out;
}

/// Adds per-layer perturbations to every B and restores the originals exactly
/// on revert() or destruction.
class BPerturbation {
 public:
  BPerturbation(Network& net, std::span<const Matrix> e_b) : net_(&net) {
    if (e_b.size() != net.layers.size()) {
      throw ShapeError("B perturbation: " + std::to_string(e_b.size()) +
                       " matrices for " + std::to_string(net.layers.size()) +
                       " layers");
    }
    for (std::size_t l = 0; l < e_b.size(); ++l) {
      if (!e_b[l].same_shape(net.layers[l].b())) {
        throw ShapeError("B perturbation for layer " + std::to_string(l) + ": " +
                         e_b[l].shape() + " vs B " + net.layers[l].b().shape());
      }
    }
    saved_.reserve(e_b.size());
    for (std::size_t l = 0; l < e_b.size(); ++l) {
      saved_.push_back(net.layers[l].b());
      net.layers[l].b() += e_b[l];
    }
  }
  BPerturbation(const BPerturbation&) = delete;
  BPerturbation& operator=(const BPerturbation&) = delete;
  ~BPerturbation() { revert(); }

  void revert() {
    if (!net_) return;
    for (std::size_t l = 0; l < saved_.size(); ++l) {
      net_->layers[l].b() = saved_[l];
    }
    net_ = nullptr;
  }

  /// Keeps the perturbed parameters in place; the originals are discarded.
  void release() noexcept { net_ = nullptr; }

  bool active() const noexcept { return net_ != nullptr; }

 private:
  Network* net_;
  std::vector<Matrix> saved_;
};

inline BPerturbation apply_b_perturbation(Network& net,
                                          std::span<const Matrix> e_b) {
  return {net, e_b};
}

}  // namespace flatlora
