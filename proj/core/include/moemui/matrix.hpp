#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace moemui {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const noexcept {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  void fill(double v) noexcept {
    for (auto& x : data_) x = v;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// y = x * M  (x has M.rows() entries, y has M.cols() entries)
inline void vec_mat(std::span<const double> x, const Matrix& m, std::span<double> y) noexcept {
  assert(x.size() == m.rows() && y.size() == m.cols());
  for (auto& v : y) v = 0.0;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    const auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] += xr * row[c];
  }
}

inline std::vector<double> vec_mat(std::span<const double> x, const Matrix& m) {
  std::vector<double> y(m.cols());
  vec_mat(x, m, y);
  return y;
}

// y += M * g  (g has M.cols() entries, y has M.rows() entries); the backward of vec_mat.
inline void mat_vec_acc(const Matrix& m, std::span<const double> g, std::span<double> y) noexcept {
  assert(g.size() == m.cols() && y.size() == m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols(); ++c) acc += row[c] * g[c];
    y[r] += acc;
  }
}

// M += x^T g  (outer product accumulate)
inline void outer_acc(std::span<const double> x, std::span<const double> g, Matrix& m) noexcept {
  assert(x.size() == m.rows() && g.size() == m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += xr * g[c];
  }
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace moemui
