#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "splitvae/tensor.hpp"

namespace splitvae::testing {

// Test-side randomness is deliberately separate from RngStream.
inline Tensor random_tensor(std::mt19937_64& gen, std::size_t rows, std::size_t cols,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t) v = u(gen);
  return t;
}

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

/// Central difference of f with respect to every entry of x.
inline Tensor numeric_gradient(const std::function<double()>& f, Tensor& x, double h = 1e-5) {
  Tensor g = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_error(a[i], b[i]));
  return worst;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double norm_rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace splitvae::testing
