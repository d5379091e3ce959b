#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "splitvae/numerics.hpp"
#include "splitvae/tensor.hpp"

namespace splitvae {

// ---------------------------------------------------------------------------
// Synthetic spatiotemporal data
// ---------------------------------------------------------------------------

struct SynthParams {
  std::size_t nodes = 8;
  std::size_t hours = 24;  // time points per day
  std::size_t samples = 2000;
  std::uint64_t seed = 7;
  double spatial_corr = 0.6;   // correlation between adjacent nodes
  double temporal_corr = 0.7;  // correlation between adjacent hours
  double amplitude = 1.0;
  double noise_sd = 0.2;
};

/// Exact first and second moments the generator draws from.
struct SynthDescriptor {
  SynthParams params;
  Tensor mean;  // [nodes * hours]
  Tensor cov;   // [nodes * hours, nodes * hours]
};

struct SynthData {
  Tensor data;  // [samples, nodes * hours], node-major columns
  std::vector<std::string> names;
  SynthDescriptor descriptor;
};

namespace detail {

inline Tensor ar1_correlation(std::size_t n, double rho) {
  Tensor c = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      c(i, j) = std::pow(rho, static_cast<double>(i > j ? i - j : j - i));
  return c;
}

}  // namespace detail

/// Each sample is one day. Node i's series is a diurnal sinusoid with a
/// node-specific phase offset and level, plus Gaussian noise whose
/// covariance is noise_sd^2 * (spatial AR(1) kron temporal AR(1)), so the
/// correlation decays geometrically with node distance.
inline SynthData synth_generate(const SynthParams& p) {
  if (p.nodes == 0 || p.hours == 0) throw ConfigError("synthetic data needs nodes, hours >= 1");
  if (p.spatial_corr < 0.0 || p.spatial_corr >= 1.0 || p.temporal_corr < 0.0 ||
      p.temporal_corr >= 1.0) {
    throw ConfigError("synthetic correlations must lie in [0, 1)");
  }
  const std::size_t d = p.nodes * p.hours;
  SynthData out;
  out.descriptor.params = p;
  out.descriptor.mean = Tensor::vector(d);
  for (std::size_t i = 0; i < p.nodes; ++i) {
    const double phase = 0.35 * static_cast<double>(i);
    const double level = 2.0 + 0.1 * static_cast<double>(i);
    for (std::size_t t = 0; t < p.hours; ++t) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(t) /
                               static_cast<double>(p.hours) + phase;
      out.descriptor.mean[i * p.hours + t] = level + p.amplitude * std::sin(angle);
    }
  }

  const Tensor cs = detail::ar1_correlation(p.nodes, p.spatial_corr);
  const Tensor ct = detail::ar1_correlation(p.hours, p.temporal_corr);
  const double var = p.noise_sd * p.noise_sd;
  out.descriptor.cov = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < p.nodes; ++i)
    for (std::size_t t = 0; t < p.hours; ++t)
      for (std::size_t j = 0; j < p.nodes; ++j)
        for (std::size_t u = 0; u < p.hours; ++u)
          out.descriptor.cov(i * p.hours + t, j * p.hours + u) = var * cs(i, j) * ct(t, u);

  const Tensor ls = cholesky(cs);
  const Tensor lt = cholesky(ct);
  RngStream rng(p.seed, 0xda7a);
  out.data = Tensor::matrix(p.samples, d);
  Tensor z = Tensor::matrix(p.nodes, p.hours);
  for (std::size_t s = 0; s < p.samples; ++s) {
    for (double& v : z) v = rng.normal();
    // E = Ls Z Lt^T
    const Tensor e = matmul_nt(matmul(ls, z), lt);
    for (std::size_t f = 0; f < d; ++f)
      out.data(s, f) = out.descriptor.mean[f] + p.noise_sd * e[f];
  }

  out.names.reserve(d);
  for (std::size_t i = 0; i < p.nodes; ++i)
    for (std::size_t t = 0; t < p.hours; ++t)
      out.names.push_back("n" + std::to_string(i) + "_h" + std::to_string(t));
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> names;
  Tensor data;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                        : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Rectangular numeric CSV with a header row. Rows are observations.
inline CsvTable read_csv(std::istream& in, const std::string& source = "<stream>") {
  CsvTable table;
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) {
    throw ParseError(source + ": empty file (missing header row)");
  }
  for (auto cell : detail::split_csv_line(line)) table.names.emplace_back(detail::trim(cell));
  const std::size_t width = table.names.size();

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != width) {
      throw ParseError(detail::concat(source, ": row ", line_no, " has ", cells.size(),
                                      " cells, header has ", width));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = detail::trim(cells[c]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() ||
          !std::isfinite(v)) {
        throw ParseError(detail::concat(source, ": row ", line_no, ", column ", c + 1, " ('",
                                        table.names[c], "'): cannot parse '", cell, "'"));
      }
      values.push_back(v);
    }
    ++rows;
  }
  table.data = Tensor({rows, width}, std::move(values));
  return table;
}

inline CsvTable load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return read_csv(in, path.string());
}

/// Writes values with 17 significant digits so they parse back exactly.
inline void write_csv(std::ostream& os, const std::vector<std::string>& names, const Tensor& data) {
  if (data.rank() == 2 && data.cols() != names.size()) {
    throw DimensionError(detail::concat("write_csv: ", names.size(), " names for ", data.cols(),
                                        " columns"));
  }
  for (std::size_t c = 0; c < names.size(); ++c) os << (c ? "," : "") << names[c];
  os << '\n';
  if (data.empty()) return;
  const auto old_prec = os.precision(17);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    for (std::size_t c = 0; c < data.cols(); ++c) os << (c ? "," : "") << data(r, c);
    os << '\n';
  }
  os.precision(old_prec);
}

inline void save_csv(const std::filesystem::path& path, const std::vector<std::string>& names,
                     const Tensor& data) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  write_csv(out, names, data);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

struct NormStats {
  std::vector<double> min;
  std::vector<double> max;

  bool is_constant(std::size_t j) const { return max[j] == min[j]; }
  std::size_t size() const noexcept { return min.size(); }
};

inline NormStats compute_norm_stats(const Tensor& data) {
  NormStats s;
  const std::size_t d = data.cols();
  s.min.assign(d, std::numeric_limits<double>::infinity());
  s.max.assign(d, -std::numeric_limits<double>::infinity());
  if (data.rows() == 0) throw DataError("cannot compute normalization statistics of no rows");
  for (std::size_t r = 0; r < data.rows(); ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      s.min[c] = std::min(s.min[c], data(r, c));
      s.max[c] = std::max(s.max[c], data(r, c));
    }
  }
  return s;
}

/// Per-feature min-max scaling. Constant features map to 0.5.
inline std::pair<Tensor, NormStats> normalize(const Tensor& data,
                                              std::optional<NormStats> stats = std::nullopt) {
  require_finite(data, "normalize");
  NormStats s = stats ? *stats : compute_norm_stats(data);
  if (s.size() != data.cols()) {
    throw DimensionError(detail::concat("normalize: stats for ", s.size(), " features, data has ",
                                        data.cols()));
  }
  Tensor out = data;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    for (std::size_t c = 0; c < data.cols(); ++c) {
      out(r, c) = s.is_constant(c) ? 0.5 : (data(r, c) - s.min[c]) / (s.max[c] - s.min[c]);
    }
  }
  return {std::move(out), std::move(s)};
}

inline Tensor denormalize(const Tensor& data, const NormStats& s) {
  if (s.size() != data.cols()) {
    throw DimensionError(detail::concat("denormalize: stats for ", s.size(), " features, data has ",
                                        data.cols()));
  }
  Tensor out = data;
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c)
      out(r, c) = s.is_constant(c) ? s.min[c] : data(r, c) * (s.max[c] - s.min[c]) + s.min[c];
  return out;
}

// ---------------------------------------------------------------------------
// Silo partitioning
// ---------------------------------------------------------------------------

/// Contiguous feature blocks, one per edge rank (rank n owns block n - 1).
struct SiloMap {
  std::vector<std::size_t> dims;

  std::size_t edges() const noexcept { return dims.size(); }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto d : dims) s += d;
    return s;
  }
  std::size_t offset(std::size_t silo) const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < silo; ++i) s += dims[i];
    return s;
  }
  /// 1-based edge rank owning `feature`.
  std::size_t rank_of(std::size_t feature) const {
    std::size_t acc = 0;
    for (std::size_t i = 0; i < dims.size(); ++i) {
      acc += dims[i];
      if (feature < acc) return i + 1;
    }
    throw DimensionError(detail::concat("feature ", feature, " outside ", acc, " features"));
  }
};

/// Accepts "uniform:N" or an explicit comma list such as "4,7,9". Uneven
/// uniform splits give the remainder to the lowest ranks.
inline SiloMap partition_silos(std::size_t features, std::string_view spec) {
  SiloMap map;
  constexpr std::string_view prefix = "uniform:";
  auto parse_count = [&](std::string_view s) {
    std::size_t v = 0;
    s = detail::trim(s);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size()) {
      throw ConfigError(detail::concat("invalid silo spec '", spec, "'"));
    }
    return v;
  };
  if (spec.starts_with(prefix)) {
    const std::size_t n = parse_count(spec.substr(prefix.size()));
    if (n == 0 || n > features) {
      throw ConfigError(detail::concat("cannot split ", features, " features into ", n, " silos"));
    }
    for (std::size_t i = 0; i < n; ++i) map.dims.push_back(features / n + (i < features % n ? 1 : 0));
  } else {
    for (auto cell : detail::split_csv_line(spec)) {
      const std::size_t v = parse_count(cell);
      if (v == 0) throw ConfigError("silo dimensions must be >= 1");
      map.dims.push_back(v);
    }
  }
  if (map.total() != features) {
    throw ConfigError(detail::concat("silo dims sum to ", map.total(), " but data has ", features,
                                     " features"));
  }
  return map;
}

inline SiloMap partition_silos(std::size_t features, const std::vector<std::size_t>& dims) {
  SiloMap map{dims};
  if (map.total() != features) {
    throw ConfigError(detail::concat("silo dims sum to ", map.total(), " but data has ", features,
                                     " features"));
  }
  return map;
}

inline std::vector<Tensor> slice_silos(const Tensor& data, const SiloMap& map) {
  if (map.total() != data.cols()) {
    throw DimensionError(detail::concat("silo map covers ", map.total(), " features, data has ",
                                        data.cols()));
  }
  std::vector<Tensor> out;
  std::size_t offset = 0;
  for (auto d : map.dims) {
    out.push_back(data.col_block(offset, d));
    offset += d;
  }
  return out;
}

/// Row permutation shared by every rank (derived from the seed only).
inline Tensor shuffle_rows(const Tensor& data, std::uint64_t seed) {
  std::vector<std::size_t> order(data.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng(seed, 0x5417);
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }
  Tensor out = Tensor::matrix(data.rows(), data.cols());
  for (std::size_t r = 0; r < order.size(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) out(r, c) = data(order[r], c);
  return out;
}

/// First floor(frac * m) rows for training, the rest held out.
inline std::pair<Tensor, Tensor> train_test_split(const Tensor& data, double train_frac) {
  if (!(train_frac > 0.0 && train_frac <= 1.0)) {
    throw ConfigError(detail::concat("train fraction must be in (0, 1], got ", train_frac));
  }
  const std::size_t m = data.rows();
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(m)));
  return {data.row_block(0, n_train), data.row_block(n_train, m - n_train)};
}

}  // namespace splitvae
