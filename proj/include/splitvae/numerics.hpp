#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <utility>

#include "splitvae/tensor.hpp"

namespace splitvae {

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError(detail::concat("matmul: ", shape_string(a.shape()), " x ",
                                        shape_string(b.shape())));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      const double* brow = &b(p, 0);
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a^T * b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows()) {
    throw DimensionError(detail::concat("matmul_tn: ", shape_string(a.shape()), "^T x ",
                                        shape_string(b.shape())));
  }
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = &b(p, 0);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      if (av == 0.0) continue;
      double* orow = &out(i, 0);
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError(detail::concat("matmul_nt: ", shape_string(a.shape()), " x ",
                                        shape_string(b.shape()), "^T"));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::matrix(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = &a(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = &b(j, 0);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out(i, j) = s;
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor out = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

inline double trace(const Tensor& a) {
  if (a.rows() != a.cols()) throw DimensionError("trace of non-square matrix");
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a(i, i);
  return t;
}

namespace detail {

using EigenMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline EigenMat to_eigen(const Tensor& t) {
  return Eigen::Map<const EigenMat>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                                    static_cast<Eigen::Index>(t.cols()));
}

inline Tensor from_eigen(const EigenMat& m) {
  Tensor t = Tensor::matrix(static_cast<std::size_t>(m.rows()),
                            static_cast<std::size_t>(m.cols()));
  Eigen::Map<EigenMat>(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

}  // namespace detail

struct SymmetricEigen {
  std::vector<double> values;  // ascending
  Tensor vectors;              // columns are eigenvectors
};

/// Eigendecomposition of the symmetric part (a + a^T) / 2.
inline SymmetricEigen symmetric_eigen(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw DimensionError(detail::concat("symmetric_eigen: ", shape_string(a.shape())));
  }
  detail::EigenMat m = detail::to_eigen(a);
  detail::EigenMat sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<detail::EigenMat> solver(sym);
  if (solver.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  SymmetricEigen out;
  out.values.assign(solver.eigenvalues().data(),
                    solver.eigenvalues().data() + solver.eigenvalues().size());
  out.vectors = detail::from_eigen(solver.eigenvectors());
  return out;
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
inline Tensor cholesky(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw DimensionError(detail::concat("cholesky: ", shape_string(a.shape())));
  }
  Eigen::LLT<detail::EigenMat> llt(detail::to_eigen(a));
  if (llt.info() != Eigen::Success) throw NumericError("cholesky: matrix is not positive definite");
  return detail::from_eigen(llt.matrixL());
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// [-1e-6, 0) are clamped to zero; anything more negative is rejected.
inline Tensor psd_matrix_sqrt(const Tensor& a) {
  if (a.rank() != 2 || a.rows() != a.cols()) {
    throw DimensionError(detail::concat("psd_matrix_sqrt: ", shape_string(a.shape())));
  }
  require_finite(a, "psd_matrix_sqrt");
  const std::size_t n = a.rows();
  if (n == 0) return a;
  const SymmetricEigen eig = symmetric_eigen(a);
  const double scale = std::max(1.0, std::abs(eig.values.back()));
  std::vector<double> roots(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lambda = eig.values[i];
    if (lambda < -1e-6 * scale) {
      throw NumericError(detail::concat("psd_matrix_sqrt: eigenvalue ", lambda,
                                        " is not positive semidefinite"));
    }
    roots[i] = std::sqrt(std::max(lambda, 0.0));
  }
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        s += eig.vectors(i, k) * roots[k] * eig.vectors(j, k);
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  return out;
}

/// Column means and unbiased (m - 1) covariance of the rows of x.
inline std::pair<Tensor, Tensor> mean_and_cov(const Tensor& x) {
  const std::size_t m = x.rows(), d = x.cols();
  if (m < 2) {
    throw DataError(detail::concat("mean_and_cov: need at least 2 samples, got ", m));
  }
  Tensor mean = Tensor::vector(d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(m);

  Tensor centered = x;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= mean[j];
  Tensor cov = matmul_tn(centered, centered);
  const double denom = static_cast<double>(m - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      const double v = cov(i, j) / denom;
      cov(i, j) = v;
      cov(j, i) = v;
    }
  }
  return {std::move(mean), std::move(cov)};
}

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Reproducible random stream keyed by (seed, stream id). Streams with
/// different ids are seeded independently, so ranks never coordinate draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32), 0x5eedu};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }

  double normal() { return normal_(engine_); }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline Tensor sample_standard_normal(RngStream& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t) v = rng.normal();
  return t;
}

// ---------------------------------------------------------------------------
// Standard normal distribution functions
// ---------------------------------------------------------------------------

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Inverse standard normal CDF. Acklam's rational approximation followed by
/// one Halley step against erfc, which brings the error to ~1e-15.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw DataError(detail::concat("normal_quantile: p=", p, " outside [0, 1]"));
  }
  static constexpr std::array<double, 6> a{-3.969683028665376e+01, 2.209460984245205e+02,
                                           -2.759285104469687e+02, 1.383577518672690e+02,
                                           -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr std::array<double, 5> b{-5.447609879822406e+01, 1.615858368580409e+02,
                                           -1.556989798598866e+02, 6.680131188771972e+01,
                                           -1.328068155288572e+01};
  static constexpr std::array<double, 6> c{-7.784894002430293e-03, -3.223964580411365e-01,
                                           -2.400758277161838e+00, -2.549732539343734e+00,
                                           4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr std::array<double, 4> d{7.784695709041462e-03, 3.224671290700398e-01,
                                           2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;

  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  // Halley refinement.
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  x = x - u / (1.0 + 0.5 * x * u);
  return x;
}

}  // namespace splitvae
