// Reference computations for the test suite. Everything here is written
// with plain loops over std::vector so it shares no code path with the
// library's forward, backward, or linear algebra.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flatlora/linalg.hpp"
#include "flatlora/model.hpp"
#include "flatlora/rng.hpp"

namespace oracle {

using flatlora::Matrix;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0.0L;
      for (std::size_t k = 0; k < a.cols(); ++k)
        s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double frob(const Matrix& a) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s += static_cast<long double>(a(i, j)) * a(i, j);
  return std::sqrt(static_cast<double>(s));
}

inline double max_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - b(i, j)));
  return d;
}

// Materializes W0 + s*B*A and runs a plain affine network.
inline double merged_loss(const flatlora::Network& net, const flatlora::Batch& batch,
                          Matrix* out = nullptr) {
  Matrix h = batch.inputs;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& L = net.layers[l];
    Matrix w = L.w0();
    const Matrix ba = oracle::matmul(L.b(), L.a());
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) w(i, j) += L.scale() * ba(i, j);
    h = oracle::matmul(w, h);
    if (l + 1 == net.layers.size()) break;
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < h.cols(); ++j) {
        double& v = h(i, j);
        switch (net.activation) {
          case flatlora::Activation::tanh: v = std::tanh(v); break;
          case flatlora::Activation::relu: v = v > 0 ? v : 0; break;
          case flatlora::Activation::identity: break;
        }
      }
  }
  if (out) *out = h;
  const double n = static_cast<double>(h.cols());
  double total = 0.0;
  for (std::size_t j = 0; j < h.cols(); ++j) {
    if (net.loss == flatlora::LossKind::mse) {
      for (std::size_t i = 0; i < h.rows(); ++i) {
        const double d = h(i, j) - batch.targets(i, j);
        total += 0.5 * d * d;
      }
    } else {
      double mx = h(0, j);
      for (std::size_t i = 1; i < h.rows(); ++i) mx = std::max(mx, h(i, j));
      double z = 0.0;
      for (std::size_t i = 0; i < h.rows(); ++i) z += std::exp(h(i, j) - mx);
      for (std::size_t i = 0; i < h.rows(); ++i)
        total -= batch.targets(i, j) * (h(i, j) - mx - std::log(z));
    }
  }
  return total / n;
}

// Central difference of f with respect to every entry of p.
inline Matrix finite_difference(Matrix& p, const std::function<double()>& f,
                                double h = 1e-5) {
  Matrix g(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j) {
      const double orig = p(i, j);
      p(i, j) = orig + h;
      const double up = f();
      p(i, j) = orig - h;
      const double dn = f();
      p(i, j) = orig;
      g(i, j) = (up - dn) / (2 * h);
    }
  return g;
}

struct NetShape {
  std::vector<std::size_t> dims;
  std::vector<std::size_t> ranks;
};

inline NetShape random_shape(flatlora::Rng& rng, std::size_t max_dim, std::size_t max_layers) {
  NetShape s;
  const std::size_t depth = 1 + rng.below(max_layers);
  for (std::size_t i = 0; i <= depth; ++i) s.dims.push_back(1 + rng.below(max_dim));
  for (std::size_t l = 0; l < depth; ++l)
    s.ranks.push_back(1 + rng.below(std::min(s.dims[l], s.dims[l + 1])));
  return s;
}

// Random net with nonzero B so both factor gradients are informative.
inline flatlora::Network random_net(flatlora::Rng& rng, const NetShape& s,
                                    flatlora::Activation act = flatlora::Activation::tanh,
                                    flatlora::LossKind loss = flatlora::LossKind::mse) {
  flatlora::Network net;
  net.activation = act;
  net.loss = loss;
  for (std::size_t l = 0; l + 1 < s.dims.size(); ++l) {
    const std::size_t n = s.dims[l + 1], m = s.dims[l], r = s.ranks[l];
    net.layers.emplace_back(rng.normal_matrix(n, m, 0.6), rng.normal_matrix(n, r, 0.5),
                            rng.normal_matrix(r, m, 0.5), 0.5 + rng.uniform());
  }
  return net;
}

inline flatlora::Batch random_batch(flatlora::Rng& rng, const flatlora::Network& net,
                                    std::size_t size) {
  flatlora::Batch b{rng.normal_matrix(net.input_dim(), size),
                    Matrix(net.output_dim(), size)};
  if (net.loss == flatlora::LossKind::mse) {
    b.targets = rng.normal_matrix(net.output_dim(), size);
  } else {
    for (std::size_t j = 0; j < size; ++j) b.targets(rng.below(net.output_dim()), j) = 1.0;
  }
  return b;
}

}  // namespace oracle
