#pragma once

#include <utility>

#include "splitvae/nn.hpp"

namespace splitvae {

/// Probabilistic encoder/decoder pair with the reparametrized latent node.
///
/// Used as the server half of the split model (input = concatenated edge
/// embeddings) and as the Central-VAE baseline (input = raw features).
/// The encoder ends in a linear head of width 2s holding (mu, log sigma).
class VaeCore {
 public:
  struct Dims {
    std::size_t input = 0;
    std::size_t hidden = 128;
    std::size_t latent = 4;
    std::size_t output = 0;  // 0 means same as input
  };

  struct Gradients {
    Tensor input_grad;            // error at the encoder's input leaves
    Tensor input_grad_recon;      // reconstruction-path share of input_grad
    Tensor input_grad_kl;         // KL-path share of input_grad
    StackGrads encoder;           // recon + KL contributions
    StackGrads decoder;
  };

  VaeCore() = default;

  VaeCore(Dims dims, RngStream& rng, KlForm kl_form = KlForm::standard) : kl_form_(kl_form) {
    if (dims.input == 0 || dims.hidden == 0 || dims.latent == 0) {
      throw ConfigError("VAE dimensions must be >= 1");
    }
    const std::size_t out = dims.output ? dims.output : dims.input;
    encoder_ = MlpStack::build({dims.input, dims.hidden, 2 * dims.latent}, Activation::relu,
                               Activation::identity, rng);
    decoder_ = MlpStack::build({dims.latent, dims.hidden, out}, Activation::relu,
                               Activation::sigmoid, rng);
  }

  VaeCore(MlpStack encoder, MlpStack decoder, KlForm kl_form = KlForm::standard)
      : encoder_(std::move(encoder)), decoder_(std::move(decoder)), kl_form_(kl_form) {
    if (encoder_.out_dim() != 2 * decoder_.in_dim()) {
      throw DimensionError(detail::concat("encoder head width ", encoder_.out_dim(),
                                          " must be twice the decoder input ", decoder_.in_dim()));
    }
  }

  std::size_t input_dim() const { return encoder_.in_dim(); }
  std::size_t output_dim() const { return decoder_.out_dim(); }
  std::size_t latent_dim() const { return decoder_.in_dim(); }
  KlForm kl_form() const noexcept { return kl_form_; }

  MlpStack& encoder() noexcept { return encoder_; }
  MlpStack& decoder() noexcept { return decoder_; }
  const MlpStack& encoder() const noexcept { return encoder_; }
  const MlpStack& decoder() const noexcept { return decoder_; }
  const LatentStats& stats() const noexcept { return stats_; }

  /// Encoder -> reparametrize with `epsilon` -> decoder.
  Tensor forward(const Tensor& x, Tensor epsilon) {
    stats_ = split_latent_head(encoder_.forward(x));
    Tensor z = reparametrize(stats_, std::move(epsilon));
    return decoder_.forward(z);
  }

  double kl() const { return kl_loss(stats_, kl_form_); }

  /// Two-pronged backward: the reconstruction error travels decoder ->
  /// reparametrization -> encoder, the KL error enters directly at the
  /// encoder head. Encoder gradients and input-leaf errors are summed.
  Gradients backward(const Tensor& recon_grad) {
    Gradients g;
    BackwardResult dec = decoder_.backward(recon_grad);
    g.decoder = std::move(dec.param_grads);

    auto [dmu_bc, dls_bc] = reparametrize_backward(stats_, dec.input_grad);
    BackwardResult enc_bc =
        encoder_.backward(join_latent_grads(stats_, dmu_bc, dls_bc), /*retain_cache=*/true);

    auto [dmu_kl, dls_kl] = kl_loss_grad(stats_, kl_form_);
    BackwardResult enc_kl = encoder_.backward(join_latent_grads(stats_, dmu_kl, dls_kl));

    g.encoder = std::move(enc_bc.param_grads);
    g.encoder += enc_kl.param_grads;
    g.input_grad = add(enc_bc.input_grad, enc_kl.input_grad);
    g.input_grad_recon = std::move(enc_bc.input_grad);
    g.input_grad_kl = std::move(enc_kl.input_grad);
    return g;
  }

  void apply(const Gradients& g, double lr_encoder, double lr_decoder) {
    sgd_step(decoder_, g.decoder, lr_decoder);
    sgd_step(encoder_, g.encoder, lr_encoder);
  }

  /// Decoder only, for generation from prior samples.
  Tensor decode(const Tensor& z) {
    Tensor out = decoder_.forward(z);
    return out;
  }

 private:
  MlpStack encoder_;
  MlpStack decoder_;
  KlForm kl_form_ = KlForm::standard;
  LatentStats stats_;
};

}  // namespace splitvae
