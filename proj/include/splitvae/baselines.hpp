#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "splitvae/nn.hpp"
#include "splitvae/numerics.hpp"
#include "splitvae/protocol.hpp"
#include "splitvae/vae.hpp"

namespace splitvae {

// ---------------------------------------------------------------------------
// Central-VAE
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kCentralStream = 0x20000;
inline constexpr std::uint64_t kCentralNoiseStream = 0x20001;

/// A plain VAE over the full concatenated feature vector. It needs every
/// silo in one place, which is what the split protocol avoids.
struct CentralVae {
  VaeCore vae;

  bool ready() const { return !vae.encoder().empty() && !vae.decoder().empty(); }
};

inline CentralVae make_central_vae(std::size_t features, const TrainConfig& cfg) {
  RngStream init(cfg.seed, kCentralStream);
  return CentralVae{VaeCore({features, cfg.server_hidden, cfg.latent_dim, features}, init,
                            cfg.kl_form)};
}

struct CentralTrainResult {
  CentralVae model;
  std::vector<LossReport> epochs;
};

/// One SGD step on a batch; returns (BC, KL) before the update.
inline LossReport central_vae_step(CentralVae& model, const Tensor& batch, Tensor epsilon,
                                   const TrainConfig& cfg) {
  const Tensor recon = model.vae.forward(batch, std::move(epsilon));
  const double bc = bc_loss(recon, batch);
  const double kl = model.vae.kl();
  const VaeCore::Gradients g = model.vae.backward(bc_loss_grad(recon, batch));
  model.vae.apply(g, cfg.lr.server_encoder, cfg.lr.server_decoder);
  return make_loss_report(bc, kl);
}

/// Same batching, optimizer and loss conventions as the split protocol.
inline CentralTrainResult central_vae_train(const Tensor& data, const TrainConfig& cfg) {
  if (cfg.batch_size == 0 || cfg.latent_dim == 0) throw ConfigError("invalid central VAE config");
  if (cfg.batch_size > data.rows()) {
    throw ConfigError(detail::concat("batch size ", cfg.batch_size, " exceeds ", data.rows(),
                                     " rows"));
  }
  CentralTrainResult result{make_central_vae(data.cols(), cfg), {}};
  RngStream noise(cfg.seed, kCentralNoiseStream);
  const std::size_t batches = batch_count(data.rows(), cfg.batch_size);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double bc = 0.0, kl = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const BatchRange r = batch_range(data.rows(), cfg.batch_size, b);
      const Tensor batch = data.row_block(r.first, r.count);
      const LossReport rep = central_vae_step(
          result.model, batch, sample_standard_normal(noise, {r.count, cfg.latent_dim}), cfg);
      bc += rep.bc_loss;
      kl += rep.kl_loss;
    }
    result.epochs.push_back(make_loss_report(bc / static_cast<double>(batches),
                                             kl / static_cast<double>(batches)));
  }
  return result;
}

inline Tensor central_vae_generate(CentralVae& model, std::size_t count, RngStream& rng) {
  if (!model.ready()) throw StateError("central VAE has no parameters");
  Tensor out = model.vae.decode(sample_standard_normal(rng, {count, model.vae.latent_dim()}));
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian copula with empirical marginals
// ---------------------------------------------------------------------------

struct CopulaModel {
  std::vector<std::vector<double>> marginals;  // sorted training values per feature
  std::vector<bool> degenerate;                // constant features
  Tensor correlation;                          // normal-score correlation, unit diagonal
  Tensor factor;                               // factor * factor^T == correlation

  bool fitted() const { return !marginals.empty(); }
  std::size_t dim() const { return marginals.size(); }
};

namespace detail {

/// 1-based ranks, ties receive their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

/// Clamp eigenvalues at `floor`, rebuild, and rescale to unit diagonal.
inline Tensor repair_correlation(const Tensor& r, double floor = 1e-10) {
  const SymmetricEigen eig = symmetric_eigen(r);
  const std::size_t d = r.rows();
  Tensor out = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k)
        s += eig.vectors(i, k) * std::max(eig.values[k], floor) * eig.vectors(j, k);
      out(i, j) = s;
    }
  }
  std::vector<double> scale(d);
  for (std::size_t i = 0; i < d; ++i) scale[i] = 1.0 / std::sqrt(out(i, i));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = i == j ? 1.0 : out(i, j) * scale[i] * scale[j];
  return out;
}

/// Symmetric factor V sqrt(max(L, 0)) with factor * factor^T == a.
inline Tensor psd_factor(const Tensor& a) {
  const SymmetricEigen eig = symmetric_eigen(a);
  const std::size_t d = a.rows();
  Tensor f = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k)
      f(i, k) = eig.vectors(i, k) * std::sqrt(std::max(eig.values[k], 0.0));
  return f;
}

}  // namespace detail

/// Normal scores Phi^-1((rank - 0.5) / m) per feature, their correlation
/// repaired to a valid correlation matrix, plus sorted marginals.
inline CopulaModel copula_fit(const Tensor& data) {
  const std::size_t m = data.rows(), d = data.cols();
  if (m < 10) throw DataError(detail::concat("copula_fit needs at least 10 rows, got ", m));
  require_finite(data, "copula_fit");
  CopulaModel model;
  model.marginals.resize(d);
  model.degenerate.assign(d, false);
  Tensor scores = Tensor::matrix(m, d);
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> col = data.column(j);
    const std::vector<double> ranks = detail::average_ranks(col);
    std::sort(col.begin(), col.end());
    model.degenerate[j] = col.front() == col.back();
    model.marginals[j] = std::move(col);
    for (std::size_t i = 0; i < m; ++i)
      scores(i, j) = normal_quantile((ranks[i] - 0.5) / static_cast<double>(m));
  }

  const auto [mean, cov] = mean_and_cov(scores);
  Tensor corr = Tensor::matrix(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j) {
        corr(i, j) = 1.0;
      } else if (model.degenerate[i] || model.degenerate[j]) {
        corr(i, j) = 0.0;
      } else {
        corr(i, j) = cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
      }
    }
  }
  model.correlation = detail::repair_correlation(corr);
  model.factor = detail::psd_factor(model.correlation);
  return model;
}

/// Inverse empirical CDF: linear interpolation between order statistics,
/// with order statistic k (0-based) sitting at u = (k + 0.5) / m.
inline double empirical_quantile(const std::vector<double>& sorted, double u) {
  const std::size_t m = sorted.size();
  if (m == 1) return sorted.front();
  const double pos = std::clamp(u * static_cast<double>(m) - 0.5, 0.0, static_cast<double>(m - 1));
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, m - 1);
  const double w = pos - static_cast<double>(lo);
  return sorted[lo] + w * (sorted[hi] - sorted[lo]);
}

inline Tensor copula_sample(const CopulaModel& model, std::size_t count, RngStream& rng) {
  if (!model.fitted()) throw StateError("copula_sample on an unfitted model");
  const std::size_t d = model.dim();
  Tensor out = Tensor::matrix(count, d);
  std::vector<double> n(d);
  for (std::size_t r = 0; r < count; ++r) {
    for (double& v : n) v = rng.normal();
    for (std::size_t j = 0; j < d; ++j) {
      double g = 0.0;
      for (std::size_t k = 0; k < d; ++k) g += model.factor(j, k) * n[k];
      out(r, j) = empirical_quantile(model.marginals[j], normal_cdf(g));
    }
  }
  return out;
}

}  // namespace splitvae
