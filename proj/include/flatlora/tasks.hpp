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

// Synthetic fine-tuning tasks. Each task supplies the frozen base weights for
// the student network along with train and eval data.
//
//   teacher-student       targets from a random tanh teacher plus Gaussian
//                         noise; the student's base weights are the teacher's
//                         shifted by a random rank-r matrix
//   two-cluster           two Gaussian blobs, softmax cross-entropy, random
//                         frozen base weights
//   matrix-factorization  single linear layer with zero base weight; inputs
//                         sqrt(m) * I so the loss is ||W - x* y*^T||_F^2 / 2

#include <cmath>
#include <cstdint>
#include <vector>

#include "flatlora/config.hpp"
#include "flatlora/linalg.hpp"
#include "flatlora/model.hpp"
#include "flatlora/rng.hpp"

namespace flatlora {

struct Task {
  TaskKind kind = TaskKind::teacher_student;
  Batch train;
  Batch eval;
  std::vector<Matrix> base_weights;     // frozen W0 for the student
  std::vector<Matrix> teacher_weights;  // teacher-student only
  Matrix factor_target;                 // matrix-factorization only: M*
  Activation activation = Activation::tanh;
  LossKind loss = LossKind::mse;
};

namespace detail {

inline Matrix plain_forward(std::span<const Matrix> weights, Activation act,
                            const Matrix& inputs) {
  return std::move(run_forward(weights, act, inputs).h.back());
}

inline Matrix select_columns(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(m.rows(), idx.size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = m(i, idx[j]);
  return out;
}

inline Task teacher_student(const ExperimentConfig& c, Rng& rng) {
  Task t;
  t.kind = TaskKind::teacher_student;
  t.activation = c.activation;
  t.loss = LossKind::mse;
  const auto& d = c.layer_dims;
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    t.teacher_weights.push_back(
        rng.normal_matrix(d[l + 1], d[l], 1.0 / std::sqrt(static_cast<double>(d[l]))));
  }
  for (const Matrix& w : t.teacher_weights) {
    Matrix shift = matmul(rng.normal_matrix(w.rows(), c.rank),
                          rng.normal_matrix(c.rank, w.cols()));
    const double n = frobenius_norm(shift);
    if (n > 0.0) shift *= c.base_shift * frobenius_norm(w) / n;
    t.base_weights.push_back(w + shift);
  }
  auto make = [&](std::size_t count) {
    Batch b;
    b.inputs = rng.normal_matrix(d.front(), count);
    b.targets = plain_forward(t.teacher_weights, c.activation, b.inputs);
    if (c.noise_std > 0.0) b.targets += rng.normal_matrix(d.back(), count, c.noise_std);
    return b;
  };
  t.train = make(c.train_size);
  t.eval = make(c.eval_size);
  return t;
}

inline Task two_cluster(const ExperimentConfig& c, Rng& rng) {
  Task t;
  t.kind = TaskKind::two_cluster;
  t.activation = c.activation;
  t.loss = LossKind::softmax_cross_entropy;
  const auto& d = c.layer_dims;
  std::vector<double> u = rng.normal_vector(d.front());
  const double un = norm2(u);
  for (double& v : u) v /= un;
  for (std::size_t l = 0; l + 1 < d.size(); ++l) {
    t.base_weights.push_back(
        rng.normal_matrix(d[l + 1], d[l], std::sqrt(2.0 / static_cast<double>(d[l]))));
  }
  auto make = [&](std::size_t count) {
    Batch b;
    b.inputs = rng.normal_matrix(d.front(), count);
    b.targets = Matrix(2, count);
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t label = j % 2;
      const double sign = label == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < d.front(); ++i) {
        b.inputs(i, j) += sign * 0.5 * c.cluster_separation * u[i];
      }
      b.targets(label, j) = 1.0;
    }
    return b;
  };
  t.train = make(c.train_size);
  t.eval = make(c.eval_size);
  return t;
}

inline Task matrix_factorization(const ExperimentConfig& c, Rng& rng) {
  Task t;
  t.kind = TaskKind::matrix_factorization;
  t.activation = Activation::identity;
  t.loss = LossKind::mse;
  const std::size_t m = c.layer_dims[0], n = c.layer_dims[1];
  const std::vector<double> x = rng.normal_vector(n);
  const std::vector<double> y = rng.normal_vector(m);
  t.factor_target = Matrix(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t.factor_target(i, j) = x[i] * y[j];
  t.base_weights.emplace_back(n, m);
  const double k = std::sqrt(static_cast<double>(m));
  t.train.inputs = Matrix::identity(m) * k;
  t.train.targets = t.factor_target * k;
  t.eval = t.train;
  return t;
}

}  // namespace detail

/// Deterministic per (config, seed).
inline Task generate_task(const ExperimentConfig& c) {
  validate(c);
  Rng rng = Rng(c.seed).split(1);
  switch (c.task) {
    case TaskKind::teacher_student: return detail::teacher_student(c, rng);
    case TaskKind::two_cluster: return detail::two_cluster(c, rng);
    case TaskKind::matrix_factorization: return detail::matrix_factorization(c, rng);
  }
  throw ConfigError("task: unhandled kind");
}

/// Student network over the task's frozen base weights.
inline Network build_network(const ExperimentConfig& c, const Task& task) {
  Rng rng = Rng(c.seed).split(2);
  return make_network(task.base_weights, c.rank, c.scale, task.activation,
                      task.loss, rng);
}

/// Cycles through the training set in seeded random order, one epoch at a
/// time. A batch never straddles two epochs.
class BatchSampler {
 public:
  BatchSampler(const Batch& data, std::size_t batch_size, std::uint64_t seed)
      : data_(data), batch_size_(std::min(batch_size, data.size())), rng_(seed) {
    reshuffle();
  }

  Batch next() {
    if (batch_size_ == data_.size()) return data_;
    if (cursor_ + batch_size_ > order_.size()) reshuffle();
    std::span<const std::size_t> idx(order_.data() + cursor_, batch_size_);
    cursor_ += batch_size_;
    return {detail::select_columns(data_.inputs, idx),
            detail::select_columns(data_.targets, idx)};
  }

  /// One epoch of disjoint minibatches in a fixed order, without advancing
  /// the sampler.
  std::vector<Batch> epoch_batches() const {
    std::vector<Batch> out;
    std::vector<std::size_t> idx(data_.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t s = 0; s + batch_size_ <= idx.size(); s += batch_size_) {
      std::span<const std::size_t> w(idx.data() + s, batch_size_);
      out.push_back({detail::select_columns(data_.inputs, w),
                     detail::select_columns(data_.targets, w)});
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = rng_.permutation(data_.size());
    cursor_ = 0;
  }

  const Batch& data_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

/// Fraction of columns whose arg-max prediction matches the one-hot target.
inline double accuracy(const Network& net, const Batch& batch) {
  const Matrix pred = forward(net, batch).predictions;
  std::size_t hits = 0;
  for (std::size_t j = 0; j < pred.cols(); ++j) {
    std::size_t best = 0, label = 0;
    for (std::size_t i = 1; i < pred.rows(); ++i) {
      if (pred(i, j) > pred(best, j)) best = i;
      if (batch.targets(i, j) > batch.targets(label, j)) label = i;
    }
    hits += best == label;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.cols());
}

}  // namespace flatlora
