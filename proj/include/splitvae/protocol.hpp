#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "splitvae/nn.hpp"
#include "splitvae/transport.hpp"
#include "splitvae/vae.hpp"

namespace splitvae {

struct LearningRates {
  double edge_encoder = 1e-2;
  double edge_decoder = 1e-2;
  double server_encoder = 1e-2;
  double server_decoder = 1e-2;
};

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::size_t latent_dim = 4;
  std::vector<std::size_t> embed_dims;  // one per edge
  std::size_t edge_hidden = 64;
  std::size_t server_hidden = 128;
  LearningRates lr;
  KlForm kl_form = KlForm::standard;
  std::chrono::milliseconds timeout = std::chrono::seconds(30);

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (latent_dim == 0) throw ConfigError("latent_dim must be >= 1");
    if (edge_hidden == 0 || server_hidden == 0) throw ConfigError("hidden widths must be >= 1");
    if (embed_dims.empty()) throw ConfigError("embed_dims must list one width per edge");
    for (auto d : embed_dims)
      if (d == 0) throw ConfigError("embed dims must be >= 1");
    for (double r : {lr.edge_encoder, lr.edge_decoder, lr.server_encoder, lr.server_decoder})
      if (!(r > 0.0)) throw ConfigError("learning rates must be positive");
  }
};

/// Rows [first, first + count) of the epoch's b-th batch. Every rank slices
/// the same rows without exchanging indices.
struct BatchRange {
  std::size_t first = 0;
  std::size_t count = 0;
};

inline std::size_t batch_count(std::size_t rows, std::size_t batch_size) {
  return (rows + batch_size - 1) / batch_size;
}

inline BatchRange batch_range(std::size_t rows, std::size_t batch_size, std::size_t b) {
  const std::size_t first = b * batch_size;
  if (first >= rows) throw ConfigError(detail::concat("batch ", b, " beyond ", rows, " rows"));
  return {first, std::min(batch_size, rows - first)};
}

// Stream ids for per-agent randomness. Edge n uses stream n.
inline constexpr std::uint64_t kServerStream = 0;
inline constexpr std::uint64_t kServerNoiseStream = 0x10000;

/// One stakeholder: local silo plus an autoencoder split into encoder F and
/// decoder G. Only embeddings and their errors leave the agent.
class EdgeAgent {
 public:
  EdgeAgent(RankId rank, Tensor silo, std::size_t embed_dim, std::size_t hidden,
            const LearningRates& lr, RngStream& rng)
      : rank_(rank), silo_(std::move(silo)), lr_enc_(lr.edge_encoder), lr_dec_(lr.edge_decoder) {
    const std::size_t d = silo_.cols();
    encoder_ = MlpStack::build({d, hidden, embed_dim}, Activation::relu, Activation::sigmoid, rng);
    decoder_ = MlpStack::build({embed_dim, hidden, d}, Activation::relu, Activation::sigmoid, rng);
  }

  EdgeAgent(RankId rank, Tensor silo, MlpStack encoder, MlpStack decoder, const LearningRates& lr)
      : rank_(rank),
        silo_(std::move(silo)),
        encoder_(std::move(encoder)),
        decoder_(std::move(decoder)),
        lr_enc_(lr.edge_encoder),
        lr_dec_(lr.edge_decoder) {
    if (encoder_.out_dim() != decoder_.in_dim()) {
      throw DimensionError("edge encoder output must match decoder input");
    }
    if (silo_.cols() != encoder_.in_dim() || decoder_.out_dim() != encoder_.in_dim()) {
      throw DimensionError(detail::concat("edge ", rank_.value, ": silo width ", silo_.cols(),
                                          " does not match the autoencoder"));
    }
  }

  RankId rank() const noexcept { return rank_; }
  std::size_t data_dim() const { return encoder_.in_dim(); }
  std::size_t embed_dim() const { return encoder_.out_dim(); }
  std::size_t rows() const { return silo_.rows(); }
  const Tensor& silo() const noexcept { return silo_; }
  MlpStack& encoder() noexcept { return encoder_; }
  MlpStack& decoder() noexcept { return decoder_; }
  const MlpStack& encoder() const noexcept { return encoder_; }
  const MlpStack& decoder() const noexcept { return decoder_; }

  /// Encode the batch and contribute the embedding to the root.
  void enc_fp(InProcessBus& bus, BatchRange batch) {
    expect(Stage::idle, "enc_fp");
    target_ = silo_.row_block(batch.first, batch.count);
    Tensor embedding = encoder_.forward(target_);
    bus.send_to_root(rank_, Phase::enc_fp_gather, std::move(embedding));
    stage_ = Stage::encoded;
  }

  /// Decode the server's reconstructed embedding; returns the local
  /// reconstruction loss.
  double dec_fp(InProcessBus& bus) {
    expect(Stage::encoded, "dec_fp");
    const Tensor x_tilde = bus.receive_from_root(rank_, Phase::dec_fp_scatter);
    reconstruction_ = decoder_.forward(x_tilde);
    last_loss_ = bc_loss(reconstruction_, target_);
    stage_ = Stage::decoded;
    return last_loss_;
  }

  /// Backprop the reconstruction loss through the decoder, step it, and
  /// send the error at the decoder input to the root.
  void dec_bp(InProcessBus& bus) {
    expect(Stage::decoded, "dec_bp");
    BackwardResult res = decoder_.backward(bc_loss_grad(reconstruction_, target_));
    sgd_step(decoder_, res.param_grads, lr_dec_);
    bus.send_to_root(rank_, Phase::dec_bp_gather, std::move(res.input_grad));
    stage_ = Stage::decoder_updated;
  }

  /// Receive the combined error at the embedding and step the encoder.
  void enc_bp(InProcessBus& bus) {
    expect(Stage::decoder_updated, "enc_bp");
    const Tensor delta = bus.receive_from_root(rank_, Phase::enc_bp_scatter);
    BackwardResult res = encoder_.backward(delta);
    sgd_step(encoder_, res.param_grads, lr_enc_);
    stage_ = Stage::idle;
  }

  double last_loss() const noexcept { return last_loss_; }

 private:
  enum class Stage { idle, encoded, decoded, decoder_updated };

  void expect(Stage s, const char* op) const {
    if (stage_ != s) {
      throw ProtocolError(detail::concat("edge ", rank_.value, ": ", op,
                                         " called out of order"));
    }
  }

  RankId rank_;
  Tensor silo_;
  MlpStack encoder_;
  MlpStack decoder_;
  double lr_enc_;
  double lr_dec_;
  Stage stage_ = Stage::idle;
  Tensor target_;
  Tensor reconstruction_;
  double last_loss_ = 0.0;
};

/// Rank 0: VAE over the concatenated edge embeddings.
class ServerAgent {
 public:
  ServerAgent() = default;

  ServerAgent(std::vector<std::size_t> embed_dims, std::size_t latent_dim, std::size_t hidden,
              const LearningRates& lr, KlForm kl_form, RngStream& init_rng, RngStream noise_rng)
      : dims_(std::move(embed_dims)),
        lr_enc_(lr.server_encoder),
        lr_dec_(lr.server_decoder),
        noise_(std::move(noise_rng)) {
    std::size_t total = 0;
    for (auto d : dims_) total += d;
    vae_ = VaeCore({total, hidden, latent_dim, total}, init_rng, kl_form);
  }

  ServerAgent(std::vector<std::size_t> embed_dims, VaeCore vae, const LearningRates& lr,
              RngStream noise_rng)
      : dims_(std::move(embed_dims)),
        vae_(std::move(vae)),
        lr_enc_(lr.server_encoder),
        lr_dec_(lr.server_decoder),
        noise_(std::move(noise_rng)) {
    std::size_t total = 0;
    for (auto d : dims_) total += d;
    if (vae_.input_dim() != total || vae_.output_dim() != total) {
      throw DimensionError(detail::concat("server VAE widths (", vae_.input_dim(), ", ",
                                          vae_.output_dim(), ") do not match sum of embed dims ",
                                          total));
    }
  }

  bool ready() const { return !vae_.encoder().empty() && !vae_.decoder().empty(); }
  const std::vector<std::size_t>& embed_dims() const noexcept { return dims_; }
  std::size_t latent_dim() const { return vae_.latent_dim(); }
  VaeCore& vae() noexcept { return vae_; }
  const VaeCore& vae() const noexcept { return vae_; }
  const LatentStats& stats() const noexcept { return vae_.stats(); }

  /// Test hook: use this noise instead of drawing from the stream.
  void freeze_noise(Tensor epsilon) { frozen_ = std::move(epsilon); }
  void unfreeze_noise() { frozen_.reset(); }

  /// Gather embeddings, run the VAE, scatter reconstructed embeddings.
  /// Returns the batch KL loss.
  double fp(InProcessBus& bus) {
    if (!ready()) throw StateError("server forward without parameters");
    if (awaiting_bp_) throw ProtocolError("server fp called twice without bp");
    std::vector<Tensor> parts = bus.gather_at_root(Phase::enc_fp_gather);
    check_widths(parts, "embedding");
    const Tensor x = tensor_concat(parts);
    Tensor eps = frozen_ ? *frozen_ : sample_standard_normal(noise_, {x.rows(), latent_dim()});
    const Tensor x_tilde = vae_.forward(x, std::move(eps));
    bus.scatter_from_root(Phase::dec_fp_scatter, tensor_split(x_tilde, dims_));
    awaiting_bp_ = true;
    last_kl_ = vae_.kl();
    return last_kl_;
  }

  /// Gather decoder-input errors, run the two-pronged backward, update
  /// both halves of the VAE, and scatter the accumulated leaf errors.
  void bp(InProcessBus& bus) {
    if (!awaiting_bp_) throw ProtocolError("server bp called before fp");
    std::vector<Tensor> errs = bus.gather_at_root(Phase::dec_bp_gather);
    check_widths(errs, "error");
    const VaeCore::Gradients g = vae_.backward(tensor_concat(errs));
    vae_.apply(g, lr_enc_, lr_dec_);
    bus.scatter_from_root(Phase::enc_bp_scatter, tensor_split(g.input_grad, dims_));
    awaiting_bp_ = false;
  }

  double last_kl() const noexcept { return last_kl_; }

  /// Decode prior samples into per-edge embeddings.
  std::vector<Tensor> sample_embeddings(std::size_t count, RngStream& rng) {
    if (!ready()) throw StateError("server has no parameters loaded");
    const Tensor z = sample_standard_normal(rng, {count, latent_dim()});
    return tensor_split(vae_.decode(z), dims_);
  }

 private:
  void check_widths(const std::vector<Tensor>& parts, const char* what) const {
    if (parts.size() != dims_.size()) {
      throw ProtocolError(detail::concat("server expected ", dims_.size(), " ", what,
                                         " parts, got ", parts.size()));
    }
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (parts[i].cols() != dims_[i]) {
        throw ProtocolError(detail::concat("rank ", i + 1, " sent ", what, " width ",
                                           parts[i].cols(), ", dims map says ", dims_[i]));
      }
    }
  }

  std::vector<std::size_t> dims_;
  VaeCore vae_;
  double lr_enc_ = 1e-2;
  double lr_dec_ = 1e-2;
  RngStream noise_{0, kServerNoiseStream};
  std::optional<Tensor> frozen_;
  bool awaiting_bp_ = false;
  double last_kl_ = 0.0;
};

/// Builds freshly initialized agents for the given silos.
struct SplitModel {
  std::vector<EdgeAgent> edges;
  ServerAgent server;
};

inline SplitModel make_split_model(const std::vector<Tensor>& silos, const TrainConfig& cfg) {
  cfg.validate();
  if (silos.size() != cfg.embed_dims.size()) {
    throw ConfigError(detail::concat(silos.size(), " silos but ", cfg.embed_dims.size(),
                                     " embed dims"));
  }
  SplitModel model;
  for (std::size_t i = 0; i < silos.size(); ++i) {
    RngStream rng(cfg.seed, i + 1);
    model.edges.emplace_back(RankId{static_cast<int>(i + 1)}, silos[i], cfg.embed_dims[i],
                             cfg.edge_hidden, cfg.lr, rng);
  }
  RngStream init(cfg.seed, kServerStream);
  model.server = ServerAgent(cfg.embed_dims, cfg.latent_dim, cfg.server_hidden, cfg.lr, cfg.kl_form,
                             init, RngStream(cfg.seed, kServerNoiseStream));
  return model;
}

struct TrainResult {
  std::vector<LossReport> epochs;  // batch-averaged losses per epoch
};

/// One batch of the protocol executed sequentially from the calling thread
/// (all six steps in order). Returns (sum of edge BC losses, KL).
inline LossReport run_batch_sequential(std::vector<EdgeAgent>& edges, ServerAgent& server,
                                       InProcessBus& bus, BatchRange batch) {
  for (auto& e : edges) e.enc_fp(bus, batch);
  const double kl = server.fp(bus);
  double bc = 0.0;
  for (auto& e : edges) bc += e.dec_fp(bus);
  for (auto& e : edges) e.dec_bp(bus);
  server.bp(bus);
  for (auto& e : edges) e.enc_bp(bus);
  return make_loss_report(bc, kl);
}

/// Epochs outer, batches inner. Each edge runs on its own worker thread
/// and the server on the calling thread; they interact only through `bus`.
/// Per-edge reconstruction losses are reported out of band for logging.
inline TrainResult train(std::vector<EdgeAgent>& edges, ServerAgent& server,
                         const TrainConfig& cfg, InProcessBus& bus) {
  cfg.validate();
  if (edges.size() != bus.num_edges() || edges.size() != server.embed_dims().size()) {
    throw ConfigError(detail::concat("edge count mismatch: ", edges.size(), " agents, ",
                                     bus.num_edges(), " bus ranks, ", server.embed_dims().size(),
                                     " dims"));
  }
  const std::size_t rows = edges.front().rows();
  for (const auto& e : edges) {
    if (e.rows() != rows) throw ConfigError("all silos must hold the same number of rows");
  }
  if (cfg.batch_size > rows) {
    throw ConfigError(detail::concat("batch size ", cfg.batch_size, " exceeds ", rows, " rows"));
  }
  const std::size_t batches = batch_count(rows, cfg.batch_size);
  std::size_t raw_width = 0;
  for (const auto& e : edges) raw_width += e.data_dim();
  bus.ledger().set_raw_baseline(rows * raw_width * sizeof(double));

  TrainResult result;
  if (cfg.epochs == 0) return result;

  // bc[edge][epoch * batches + b]; written only by that edge's worker.
  std::vector<std::vector<double>> bc(edges.size(),
                                      std::vector<double>(cfg.epochs * batches, 0.0));
  std::vector<double> kl(cfg.epochs * batches, 0.0);

  std::mutex err_mu;
  std::exception_ptr first_error;
  std::string first_context;
  auto record = [&](std::exception_ptr ep, std::string context) {
    std::lock_guard lock(err_mu);
    if (!first_error) {
      first_error = ep;
      first_context = std::move(context);
    }
  };

  std::vector<std::thread> workers;
  workers.reserve(edges.size());
  for (std::size_t n = 0; n < edges.size(); ++n) {
    workers.emplace_back([&, n] {
      std::size_t e = 0, b = 0;
      try {
        for (e = 0; e < cfg.epochs; ++e) {
          for (b = 0; b < batches; ++b) {
            edges[n].enc_fp(bus, batch_range(rows, cfg.batch_size, b));
            bc[n][e * batches + b] = edges[n].dec_fp(bus);
            edges[n].dec_bp(bus);
            edges[n].enc_bp(bus);
          }
        }
      } catch (const std::exception& ex) {
        record(std::current_exception(), detail::concat("rank ", n + 1, " epoch ", e, " batch ", b));
        bus.abort(ex.what());
      }
    });
  }

  {
    std::size_t e = 0, b = 0;
    try {
      for (e = 0; e < cfg.epochs; ++e) {
        bus.set_epoch(e);
        for (b = 0; b < batches; ++b) {
          kl[e * batches + b] = server.fp(bus);
          server.bp(bus);
        }
      }
    } catch (const std::exception& ex) {
      record(std::current_exception(), detail::concat("server epoch ", e, " batch ", b));
      bus.abort(ex.what());
    }
  }
  for (auto& w : workers) w.join();

  if (first_error) {
    try {
      std::rethrow_exception(first_error);
    } catch (const TimeoutError& ex) {
      throw TimeoutError(first_context + ": " + ex.what());
    } catch (const ProtocolError& ex) {
      throw ProtocolError(first_context + ": " + ex.what());
    } catch (const DimensionError& ex) {
      throw DimensionError(first_context + ": " + ex.what());
    } catch (const StateError& ex) {
      throw StateError(first_context + ": " + ex.what());
    } catch (const std::exception& ex) {
      throw NumericError(first_context + ": " + ex.what());
    }
  }

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double bc_sum = 0.0, kl_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      double batch_bc = 0.0;
      for (std::size_t n = 0; n < edges.size(); ++n) batch_bc += bc[n][e * batches + b];
      bc_sum += batch_bc;
      kl_sum += kl[e * batches + b];
    }
    result.epochs.push_back(make_loss_report(bc_sum / static_cast<double>(batches),
                                             kl_sum / static_cast<double>(batches)));
  }
  return result;
}

inline TrainResult train(SplitModel& model, const TrainConfig& cfg, InProcessBus& bus) {
  return train(model.edges, model.server, cfg, bus);
}

/// Server samples z ~ N(0, I), decodes embeddings, and each edge decodes its
/// own scenarios. Outputs are in normalized units, clamped to [0, 1].
inline std::vector<Tensor> generate_scenarios(std::vector<EdgeAgent>& edges, ServerAgent& server,
                                              std::size_t count, RngStream& rng) {
  if (!server.ready()) throw StateError("generate_scenarios: server parameters not loaded");
  if (edges.size() != server.embed_dims().size()) {
    throw StateError("generate_scenarios: edge count does not match the server dims map");
  }
  std::vector<Tensor> embeddings = server.sample_embeddings(count, rng);
  std::vector<Tensor> out;
  out.reserve(edges.size());
  for (std::size_t n = 0; n < edges.size(); ++n) {
    if (edges[n].decoder().empty()) throw StateError("generate_scenarios: edge decoder missing");
    Tensor y = edges[n].decoder().forward(embeddings[n]);
    for (double& v : y) v = std::clamp(v, 0.0, 1.0);
    out.push_back(std::move(y));
  }
  return out;
}

}  // namespace splitvae
