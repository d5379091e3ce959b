#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "splitvae/numerics.hpp"
#include "splitvae/tensor.hpp"

namespace splitvae {

namespace detail {

inline void require_same_width(const Tensor& x, const Tensor& y, const char* what) {
  if (x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols()) {
    throw DimensionError(detail::concat(what, ": feature widths differ (",
                                        shape_string(x.shape()), " vs ", shape_string(y.shape()),
                                        ")"));
  }
}

inline double row_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double diff = a(i, c) - b(j, c);
    s += diff * diff;
  }
  return std::sqrt(s);
}

}  // namespace detail

enum class FidForm {
  standard,  // ||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx Sy)^1/2)
  paper      // same with the trace term subtracted, as printed
};

/// Frechet distance between Gaussian fits of the rows of x and y.
///
/// The cross term uses Tr(sqrt(Sx^1/2 Sy Sx^1/2)), which equals
/// Tr((Sx Sy)^1/2) but keeps the square-root input symmetric PSD.
inline double fid(const Tensor& x, const Tensor& y, FidForm form = FidForm::standard) {
  detail::require_same_width(x, y, "fid");
  const auto [mx, sx] = mean_and_cov(x);
  const auto [my, sy] = mean_and_cov(y);
  if (!sx.all_finite() || !sy.all_finite()) throw DataError("fid: non-finite covariance");
  double mean_term = 0.0;
  for (std::size_t j = 0; j < mx.size(); ++j) mean_term += (mx[j] - my[j]) * (mx[j] - my[j]);
  const Tensor sx_half = psd_matrix_sqrt(sx);
  const Tensor inner = matmul(matmul(sx_half, sy), sx_half);
  const double cross = trace(psd_matrix_sqrt(inner));
  const double trace_term = trace(sx) + trace(sy) - 2.0 * cross;
  if (form == FidForm::paper) return mean_term - trace_term;
  return std::max(0.0, mean_term + trace_term);
}

/// Two-term energy-score estimator with x the observed rows and y the
/// generated rows: mean ||x_i - y_j|| - (1 / (2 m1^2)) sum ||x_i - x_j||.
inline double energy_score(const Tensor& x, const Tensor& y) {
  detail::require_same_width(x, y, "energy_score");
  const std::size_t m1 = x.rows(), m2 = y.rows();
  if (m1 == 0 || m2 == 0) throw DataError("energy_score: empty sample");
  double cross = 0.0;
  for (std::size_t i = 0; i < m1; ++i)
    for (std::size_t j = 0; j < m2; ++j) cross += detail::row_distance(x, i, y, j);
  double self = 0.0;
  for (std::size_t i = 0; i < m1; ++i)
    for (std::size_t j = i + 1; j < m1; ++j) self += detail::row_distance(x, i, x, j);
  self *= 2.0;  // both orderings of each pair
  const double dm1 = static_cast<double>(m1);
  return cross / (dm1 * static_cast<double>(m2)) - self / (2.0 * dm1 * dm1);
}

/// Rows ordered by their mean, ties broken lexicographically.
inline std::vector<std::size_t> rows_by_mean(const Tensor& t) {
  std::vector<double> means(t.rows(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) means[r] += t(r, c);
    means[r] /= static_cast<double>(t.cols());
  }
  std::vector<std::size_t> order(t.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (means[a] != means[b]) return means[a] < means[b];
    for (std::size_t c = 0; c < t.cols(); ++c)
      if (t(a, c) != t(b, c)) return t(a, c) < t(b, c);
    return false;
  });
  return order;
}

/// RMSE over k = min(m1, m2) row pairs. Both sets are sorted by row mean
/// before pairing, so the value does not depend on row order.
inline double rmse(const Tensor& x, const Tensor& y) {
  detail::require_same_width(x, y, "rmse");
  const std::size_t k = std::min(x.rows(), y.rows());
  if (k == 0 || x.cols() == 0) throw DataError("rmse: empty sample");
  const auto ox = rows_by_mean(x);
  const auto oy = rows_by_mean(y);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double diff = x(ox[i], c) - y(oy[i], c);
      s += diff * diff;
    }
  }
  return std::sqrt(s / static_cast<double>(k * x.cols()));
}

/// Sample CRPS of an ensemble against one observation, using the energy
/// form mean|g - y| - 1/(2 m^2) sum |g_k - g_l|. `sorted` must be ascending
/// and `prefix[k]` the sum of its first k entries; `spread` the double sum.
inline double crps_sorted(const std::vector<double>& sorted, const std::vector<double>& prefix,
                          double spread, double y) {
  const std::size_t m = sorted.size();
  const auto it = std::lower_bound(sorted.begin(), sorted.end(), y);
  const auto below = static_cast<std::size_t>(it - sorted.begin());
  const double sum_below = prefix[below];
  const double sum_above = prefix[m] - sum_below;
  const double abs_sum = (static_cast<double>(below) * y - sum_below) +
                         (sum_above - static_cast<double>(m - below) * y);
  const double dm = static_cast<double>(m);
  return abs_sum / dm - spread / (2.0 * dm * dm);
}

/// Per-dimension CRPS of the generated ensemble, averaged over every
/// observation and dimension.
inline double crps(const Tensor& generated, const Tensor& observed) {
  detail::require_same_width(generated, observed, "crps");
  const std::size_t m2 = generated.rows();
  if (m2 == 0) throw DataError("crps: empty ensemble");
  if (observed.rows() == 0) throw DataError("crps: no observations");
  double total = 0.0;
  for (std::size_t j = 0; j < generated.cols(); ++j) {
    std::vector<double> g = generated.column(j);
    std::sort(g.begin(), g.end());
    std::vector<double> prefix(m2 + 1, 0.0);
    for (std::size_t k = 0; k < m2; ++k) prefix[k + 1] = prefix[k] + g[k];
    // sum_{k,l} |g_k - g_l| = 2 sum_k (2k - m + 1) g_(k)
    double spread = 0.0;
    for (std::size_t k = 0; k < m2; ++k)
      spread += (2.0 * static_cast<double>(k) - static_cast<double>(m2) + 1.0) * g[k];
    spread *= 2.0;
    for (std::size_t i = 0; i < observed.rows(); ++i)
      total += crps_sorted(g, prefix, spread, observed(i, j));
  }
  return std::max(0.0, total / static_cast<double>(observed.rows() * generated.cols()));
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Column means of a (nodes x T) matrix.
inline Tensor centroid_series(const Tensor& data) {
  if (data.rank() != 2 || data.cols() == 0) throw DimensionError("centroid_series needs T >= 1");
  if (data.rows() == 0) throw DataError("centroid_series: no nodes");
  Tensor out = Tensor::vector(data.cols());
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) out[c] += data(r, c);
  for (double& v : out) v /= static_cast<double>(data.rows());
  return out;
}

struct Autocorrelation {
  Tensor values;  // lags 0 .. max_lag - 1
  bool degenerate = false;
};

inline Autocorrelation autocorrelation(const Tensor& series, std::size_t max_lag) {
  const std::size_t n = series.size();
  if (max_lag > n || max_lag == 0) {
    throw DimensionError(detail::concat("autocorrelation: max_lag ", max_lag, " for series of ", n));
  }
  Autocorrelation out{Tensor::vector(max_lag), false};
  const double mean = std::accumulate(series.begin(), series.end(), 0.0) / static_cast<double>(n);
  double denom = 0.0;
  for (double v : series) denom += (v - mean) * (v - mean);
  if (denom <= 0.0) {
    out.degenerate = true;
    return out;
  }
  for (std::size_t lag = 0; lag < max_lag; ++lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < n; ++t) s += (series[t] - mean) * (series[t + lag] - mean);
    out.values[lag] = s / denom;
  }
  return out;
}

/// Mean day of a scenario set laid out as node-major (node, hour) columns,
/// reshaped to (nodes x hours).
inline Tensor mean_day(const Tensor& scenarios, std::size_t hours) {
  if (hours == 0 || scenarios.cols() % hours != 0) {
    throw DimensionError(detail::concat("mean_day: ", scenarios.cols(),
                                        " features are not a multiple of ", hours, " hours"));
  }
  if (scenarios.rows() == 0) throw DataError("mean_day: no scenarios");
  const std::size_t nodes = scenarios.cols() / hours;
  Tensor out = Tensor::matrix(nodes, hours);
  for (std::size_t r = 0; r < scenarios.rows(); ++r)
    for (std::size_t f = 0; f < scenarios.cols(); ++f) out[f] += scenarios(r, f);
  for (double& v : out) v /= static_cast<double>(scenarios.rows());
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run
};

inline MetricSummary summarize(const std::vector<double>& values) {
  if (values.empty()) throw DataError("summarize: no values");
  MetricSummary s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

struct MetricReport {
  MetricSummary fid, es, rmse, crps;
  std::size_t runs = 0;

  static constexpr std::array<std::string_view, 4> kNames{"fid", "es", "rmse", "crps"};

  const MetricSummary& get(std::string_view name) const {
    if (name == "fid") return fid;
    if (name == "es") return es;
    if (name == "rmse") return rmse;
    if (name == "crps") return crps;
    throw ConfigError(detail::concat("unknown metric ", name));
  }
};

/// Scores `runs` generated sets (produced by `generate(run_index)`) against
/// the observed rows.
inline MetricReport evaluate_runs(const Tensor& observed,
                                  const std::function<Tensor(std::size_t)>& generate,
                                  std::size_t runs) {
  if (runs == 0) throw ConfigError("evaluation needs at least one run");
  std::vector<double> f, e, r, c;
  for (std::size_t i = 0; i < runs; ++i) {
    const Tensor g = generate(i);
    f.push_back(fid(observed, g));
    e.push_back(energy_score(observed, g));
    r.push_back(rmse(observed, g));
    c.push_back(crps(g, observed));
  }
  return {summarize(f), summarize(e), summarize(r), summarize(c), runs};
}

inline void write_metric_csv_header(std::ostream& os) { os << "method,metric,mean,std,runs\n"; }

inline void write_metric_rows(std::ostream& os, std::string_view method, const MetricReport& rep) {
  const auto old_prec = os.precision(17);
  for (auto name : MetricReport::kNames) {
    const auto& s = rep.get(name);
    os << method << ',' << name << ',' << s.mean << ',' << s.std << ',' << rep.runs << '\n';
  }
  os.precision(old_prec);
}

}  // namespace splitvae
