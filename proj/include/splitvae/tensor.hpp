#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace splitvae {

// Error hierarchy. Every failure raised by the library derives from Error so
// callers (the CLI in particular) can map categories onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error { using Error::Error; };
struct ProtocolError : Error { using Error::Error; };
struct TimeoutError : ProtocolError { using ProtocolError::ProtocolError; };
struct StateError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ParseError : DataError { using DataError::DataError; };

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Dense row-major float64 array with an explicit shape.
///
/// Most of the library works with rank-2 tensors (batch x features); rank-1
/// tensors appear for per-feature statistics. A 0 x n matrix is a valid empty
/// batch.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError(detail::concat("tensor shape ", shape_string(shape_),
                                          " does not match ", data_.size(),
                                          " elements"));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor vector(std::size_t n, double fill = 0.0) {
    return Tensor({n}, fill);
  }

  /// Row-major literal, e.g. Tensor::from_rows({{1, 2}, {3, 4}}).
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t = matrix(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged row literal");
      std::copy(row.begin(), row.end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const {
    require_matrix();
    return shape_[0];
  }
  std::size_t cols() const {
    require_matrix();
    return shape_[1];
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  /// Rows [first, first + count) as a new matrix.
  Tensor row_block(std::size_t first, std::size_t count) const {
    require_matrix();
    if (first + count > shape_[0]) {
      throw DimensionError(detail::concat("row block [", first, ", ", first + count,
                                          ") exceeds ", shape_[0], " rows"));
    }
    const std::size_t c = shape_[1];
    return Tensor({count, c},
                  std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(first * c),
                                      data_.begin() + static_cast<std::ptrdiff_t>((first + count) * c)));
  }

  /// Columns [first, first + count) as a new matrix.
  Tensor col_block(std::size_t first, std::size_t count) const {
    require_matrix();
    if (first + count > shape_[1]) {
      throw DimensionError(detail::concat("column block [", first, ", ", first + count,
                                          ") exceeds ", shape_[1], " columns"));
    }
    Tensor out = matrix(shape_[0], count);
    for (std::size_t r = 0; r < shape_[0]; ++r) {
      for (std::size_t j = 0; j < count; ++j) out(r, j) = (*this)(r, first + j);
    }
    return out;
  }

  std::vector<double> column(std::size_t c) const {
    require_matrix();
    std::vector<double> out(shape_[0]);
    for (std::size_t r = 0; r < shape_[0]; ++r) out[r] = (*this)(r, c);
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void require_matrix() const {
    if (shape_.size() != 2) {
      throw DimensionError(detail::concat("expected a matrix, got shape ",
                                          shape_string(shape_)));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(detail::concat(what, ": shape ", shape_string(a.shape()),
                                        " vs ", shape_string(b.shape())));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(detail::concat(what, ": non-finite value"));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace splitvae
