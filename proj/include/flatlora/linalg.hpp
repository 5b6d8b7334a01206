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

// Dense row-major matrices and the handful of factorizations the optimizers
// need: thin SVD (one-sided Jacobi), Moore-Penrose pseudo-inverse, and the
// orthogonal projectors built from it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flatlora/errors.hpp"

namespace flatlora {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows_, cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix zeros(std::size_t rows, std::size_t cols) { return {rows, cols}; }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  std::string shape() const { return shape_string(rows_, cols_); }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double k) noexcept {
    for (double& v : data_) v *= k;
    return *this;
  }
  // this += k * o
  Matrix& add_scaled(const Matrix& o, double k) {
    require_same_shape(o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += k * o.data_[i];
    return *this;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw ShapeError(std::string("operator ") + op + ": " + shape() + " vs " +
                       o.shape());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double k) { return a *= k; }
inline Matrix operator*(double k, Matrix a) { return a *= k; }

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape() + " * " + b.shape());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* crow = c.data().data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data().data() + k * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape() + " * (" + b.shape() + ")^T");
  }
  Matrix c(a.rows(), b.rows());
  const std::size_t k = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.data().data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) = s;
    }
  }
  return c;
}

/// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: (" + a.shape() + ")^T * " + b.shape());
  }
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* brow = b.data().data() + k * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* crow = c.data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline double dot(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("dot: length mismatch");
  return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
}

inline double norm2(std::span<const double> x) { return std::sqrt(dot(x, x)); }

/// Row-major flattening.
inline std::vector<double> vectorize(const Matrix& m) {
  return {m.data().begin(), m.data().end()};
}

inline Matrix matrixize(std::span<const double> v, std::size_t rows,
                        std::size_t cols) {
  if (v.size() != rows * cols) {
    throw ShapeError("matrixize: length " + std::to_string(v.size()) +
                     " cannot fill " + Matrix::shape_string(rows, cols));
  }
  return {rows, cols, std::vector<double>(v.begin(), v.end())};
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + a.shape() + " vs " + b.shape());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

struct SvdResult {
  Matrix u;                             // rows x k
  std::vector<double> singular_values;  // k, non-increasing
  Matrix v_t;                           // k x cols
  std::size_t numerical_rank = 0;
};

inline constexpr double kDefaultRankTol = 1e-12;

namespace detail {

// One-sided Jacobi on the columns of `work` (tall or square). On return the
// columns of `work` are mutually orthogonal and equal U * diag(sigma); `v`
// accumulates the right rotations.
inline void jacobi_orthogonalize(Matrix& work, Matrix& v) {
  constexpr int kMaxSweeps = 80;
  const std::size_t m = work.rows();
  const std::size_t n = work.cols();
  const double orth_tol =
      std::numeric_limits<double>::epsilon() * static_cast<double>(std::max<std::size_t>(m, 1));
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          alpha += wp * wp;
          beta += wq * wq;
          gamma += wp * wq;
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= orth_tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double wp = work(i, p), wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) return;
  }
  throw NumericalError("one-sided Jacobi SVD did not converge", kMaxSweeps);
}

// Thin SVD of a matrix with rows >= cols.
inline SvdResult svd_tall(const Matrix& m, double tol) {
  const std::size_t k = m.cols();
  Matrix work = m;
  Matrix v = Matrix::identity(k);
  jacobi_orthogonalize(work, v);

  std::vector<double> sigma(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += work(i, j) * work(i, j);
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  SvdResult out;
  out.u = Matrix(m.rows(), k);
  out.v_t = Matrix(k, k);
  out.singular_values.resize(k);
  for (std::size_t jj = 0; jj < k; ++jj) {
    const std::size_t j = order[jj];
    const double s = sigma[j];
    out.singular_values[jj] = s;
    if (s > 0.0) {
      for (std::size_t i = 0; i < m.rows(); ++i) out.u(i, jj) = work(i, j) / s;
    }
    for (std::size_t i = 0; i < k; ++i) out.v_t(jj, i) = v(i, j);
  }
  const double smax = k ? out.singular_values.front() : 0.0;
  out.numerical_rank = static_cast<std::size_t>(
      std::count_if(out.singular_values.begin(), out.singular_values.end(),
                    [&](double s) { return s > tol * smax; }));
  return out;
}

}  // namespace detail

/// Thin singular value decomposition m = u * diag(sigma) * v_t with
/// k = min(rows, cols) singular values in non-increasing order.
inline SvdResult svd(const Matrix& m, double tol = kDefaultRankTol) {
  if (m.empty()) throw ShapeError("svd of an empty matrix");
  if (m.rows() >= m.cols()) return detail::svd_tall(m, tol);
  SvdResult t = detail::svd_tall(transpose(m), tol);
  return {transpose(t.v_t), std::move(t.singular_values), transpose(t.u),
          t.numerical_rank};
}

/// Moore-Penrose pseudo-inverse; singular values at or below tol * sigma_max
/// are treated as zero.
inline Matrix pseudo_inverse(const Matrix& m, double tol = kDefaultRankTol) {
  if (!(tol > 0.0 && tol < 1.0)) {
    throw DomainError("pseudo_inverse: tol must lie in (0, 1)");
  }
  const SvdResult s = svd(m, tol);
  // pinv = V * diag(1/sigma) * U^T over the retained singular values.
  Matrix out(m.cols(), m.rows());
  for (std::size_t k = 0; k < s.numerical_rank; ++k) {
    const double inv = 1.0 / s.singular_values[k];
    for (std::size_t i = 0; i < m.cols(); ++i) {
      const double vik = s.v_t(k, i) * inv;
      if (vik == 0.0) continue;
      for (std::size_t j = 0; j < m.rows(); ++j) out(i, j) += vik * s.u(j, k);
    }
  }
  return out;
}

namespace detail {

// In-place inverse of a small symmetric positive definite matrix through its
// Cholesky factor. Fails (returns false) once a pivot drops below
// min_ratio * the largest diagonal entry.
inline bool spd_inverse(Matrix& g, double min_ratio) {
  const std::size_t k = g.rows();
  double dmax = 0.0;
  for (std::size_t i = 0; i < k; ++i) dmax = std::max(dmax, g(i, i));
  if (!(dmax > 0.0)) return false;
  Matrix l(k, k);
  for (std::size_t j = 0; j < k; ++j) {
    double d = g(j, j);
    for (std::size_t p = 0; p < j; ++p) d -= l(j, p) * l(j, p);
    if (!(d > min_ratio * dmax)) return false;
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < k; ++i) {
      double v = g(i, j);
      for (std::size_t p = 0; p < j; ++p) v -= l(i, p) * l(j, p);
      l(i, j) = v / l(j, j);
    }
  }
  // L^-1 by forward substitution, then G^-1 = L^-T L^-1.
  Matrix li(k, k);
  for (std::size_t c = 0; c < k; ++c) {
    li(c, c) = 1.0 / l(c, c);
    for (std::size_t i = c + 1; i < k; ++i) {
      double v = 0.0;
      for (std::size_t p = c; p < i; ++p) v -= l(i, p) * li(p, c);
      li(i, c) = v / l(i, i);
    }
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double v = 0.0;
      for (std::size_t p = i; p < k; ++p) v += li(p, i) * li(p, j);
      g(i, j) = g(j, i) = v;
    }
  return true;
}

}  // namespace detail

/// Same result as pseudo_inverse, but a full-rank, well-conditioned `m` goes
/// through the normal equations (M^T (M M^T)^-1 or (M^T M)^-1 M^T), which is
/// far cheaper than Jacobi for the skinny factors of a LoRA layer. The
/// shortcut is accepted only if M P (or P M) is the identity to 1e-11;
/// anything else takes the SVD route.
inline Matrix pseudo_inverse_fast(const Matrix& m, double tol = kDefaultRankTol) {
  if (!(tol > 0.0 && tol < 1.0)) {
    throw DomainError("pseudo_inverse: tol must lie in (0, 1)");
  }
  constexpr double kPivotRatio = 1e-6;
  constexpr double kIdentityTol = 1e-11;
  if (tol <= 1e-8 && !m.empty() && m.all_finite()) {
    const bool wide = m.rows() <= m.cols();
    Matrix g = wide ? matmul_nt(m, m) : matmul_tn(m, m);
    if (detail::spd_inverse(g, kPivotRatio)) {
      Matrix p = wide ? matmul_tn(m, g) : matmul_nt(g, m);
      const Matrix check = wide ? matmul(m, p) : matmul(p, m);
      double worst = 0.0;
      for (std::size_t i = 0; i < check.rows(); ++i)
        for (std::size_t j = 0; j < check.cols(); ++j)
          worst = std::max(worst, std::abs(check(i, j) - (i == j ? 1.0 : 0.0)));
      if (worst <= kIdentityTol) return p;
    }
  }
  return pseudo_inverse(m, tol);
}

/// P = A^+ A, the orthogonal projector onto the row space of `a`.
inline Matrix row_space_projector(const Matrix& a, double tol = kDefaultRankTol) {
  return matmul(pseudo_inverse(a, tol), a);
}

/// P = B B^+, the orthogonal projector onto the column space of `b`.
inline Matrix col_space_projector(const Matrix& b, double tol = kDefaultRankTol) {
  return matmul(b, pseudo_inverse(b, tol));
}

}  // namespace flatlora
