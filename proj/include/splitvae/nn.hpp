#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "splitvae/numerics.hpp"
#include "splitvae/tensor.hpp"

namespace splitvae {

enum class Activation { identity, relu, sigmoid };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ConfigError(detail::concat("unknown activation '", s, "'"));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct LayerGrads {
  Tensor weights;
  Tensor biases;
};
using StackGrads = std::vector<LayerGrads>;

inline StackGrads& operator+=(StackGrads& acc, const StackGrads& other) {
  if (acc.size() != other.size()) throw DimensionError("gradient stacks differ in depth");
  for (std::size_t l = 0; l < acc.size(); ++l) {
    require_same_shape(acc[l].weights, other[l].weights, "gradient accumulate");
    for (std::size_t i = 0; i < acc[l].weights.size(); ++i) acc[l].weights[i] += other[l].weights[i];
    for (std::size_t i = 0; i < acc[l].biases.size(); ++i) acc[l].biases[i] += other[l].biases[i];
  }
  return acc;
}

/// Fully connected layer y = act(x W + b) with x of shape (batch, in).
///
/// forward() caches its input and output; backward() consumes them unless
/// asked to retain, which the server needs when it pushes two gradient
/// signals through the same encoder pass.
class DenseLayer {
 public:
  DenseLayer(Tensor weights, Tensor biases, Activation act)
      : weights_(std::move(weights)), biases_(std::move(biases)), act_(act) {
    if (weights_.rank() != 2 || biases_.rank() != 1 || biases_.size() != weights_.cols()) {
      throw DimensionError(detail::concat("dense layer weights ", shape_string(weights_.shape()),
                                          " incompatible with biases ",
                                          shape_string(biases_.shape())));
    }
  }

  /// Uniform(-a, a) weights with a = sqrt(6 / (in + out)); zero biases.
  DenseLayer(std::size_t in, std::size_t out, Activation act, RngStream& rng)
      : weights_(Tensor::matrix(in, out)), biases_(Tensor::vector(out)), act_(act) {
    if (in == 0 || out == 0) throw ConfigError("dense layer dimensions must be >= 1");
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& w : weights_) w = rng.uniform(-a, a);
  }

  std::size_t in_dim() const { return weights_.rows(); }
  std::size_t out_dim() const { return weights_.cols(); }
  Activation activation() const noexcept { return act_; }
  const Tensor& weights() const noexcept { return weights_; }
  const Tensor& biases() const noexcept { return biases_; }

  /// Overwrites parameters in place; shapes must match.
  void set_parameters(const Tensor& w, const Tensor& b) {
    require_same_shape(weights_, w, "set_parameters weights");
    require_same_shape(biases_, b, "set_parameters biases");
    weights_ = w;
    biases_ = b;
  }

  Tensor forward(const Tensor& x) {
    if (x.rank() != 2 || x.cols() != in_dim()) {
      throw DimensionError(detail::concat("dense forward: input ", shape_string(x.shape()),
                                          " but layer expects width ", in_dim()));
    }
    Tensor y = matmul(x, weights_);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      for (std::size_t c = 0; c < y.cols(); ++c) {
        double& v = y(r, c);
        v += biases_[c];
        switch (act_) {
          case Activation::identity: break;
          case Activation::relu: v = v > 0.0 ? v : 0.0; break;
          case Activation::sigmoid: v = sigmoid(v); break;
        }
      }
    }
    input_ = x;
    output_ = y;
    return y;
  }

  Tensor backward(const Tensor& grad_out, LayerGrads& grads, bool retain_cache = false) {
    if (!input_) throw ProtocolError("dense backward called before forward");
    if (grad_out.rank() != 2 || grad_out.rows() != input_->rows() ||
        grad_out.cols() != out_dim()) {
      throw DimensionError(detail::concat("dense backward: gradient ",
                                          shape_string(grad_out.shape()), " vs cached output ",
                                          shape_string(output_->shape())));
    }
    Tensor dpre = grad_out;
    for (std::size_t i = 0; i < dpre.size(); ++i) {
      const double y = (*output_)[i];
      switch (act_) {
        case Activation::identity: break;
        case Activation::relu: dpre[i] = y > 0.0 ? dpre[i] : 0.0; break;
        case Activation::sigmoid: dpre[i] *= y * (1.0 - y); break;
      }
    }
    grads.weights = matmul_tn(*input_, dpre);
    grads.biases = Tensor::vector(out_dim());
    for (std::size_t r = 0; r < dpre.rows(); ++r)
      for (std::size_t c = 0; c < dpre.cols(); ++c) grads.biases[c] += dpre(r, c);
    Tensor dx = matmul_nt(dpre, weights_);
    if (!retain_cache) {
      input_.reset();
      output_.reset();
    }
    return dx;
  }

  void apply_gradient(const LayerGrads& g, double lr) {
    require_same_shape(weights_, g.weights, "sgd weights");
    require_same_shape(biases_, g.biases, "sgd biases");
    for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] -= lr * g.weights[i];
    for (std::size_t i = 0; i < biases_.size(); ++i) biases_[i] -= lr * g.biases[i];
  }

  bool has_cache() const noexcept { return input_.has_value(); }

 private:
  Tensor weights_;
  Tensor biases_;
  Activation act_;
  std::optional<Tensor> input_;
  std::optional<Tensor> output_;
};

struct BackwardResult {
  Tensor input_grad;
  StackGrads param_grads;
};

/// Ordered chain of dense layers.
class MlpStack {
 public:
  MlpStack() = default;

  explicit MlpStack(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      if (layers_[i - 1].out_dim() != layers_[i].in_dim()) {
        throw DimensionError(detail::concat("layer ", i - 1, " outputs ", layers_[i - 1].out_dim(),
                                            " but layer ", i, " expects ", layers_[i].in_dim()));
      }
    }
  }

  /// widths = {in, hidden..., out}; hidden layers use `hidden`, the last
  /// layer uses `output`.
  static MlpStack build(const std::vector<std::size_t>& widths, Activation hidden,
                        Activation output, RngStream& rng) {
    if (widths.size() < 2) throw ConfigError("an MLP needs at least input and output widths");
    std::vector<DenseLayer> layers;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      layers.emplace_back(widths[i], widths[i + 1], last ? output : hidden, rng);
    }
    return MlpStack(std::move(layers));
  }

  std::size_t in_dim() const { return layers_.front().in_dim(); }
  std::size_t out_dim() const { return layers_.back().out_dim(); }
  std::size_t depth() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }

  std::vector<DenseLayer>& layers() noexcept { return layers_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }

  Tensor forward(const Tensor& input) {
    if (layers_.empty()) throw StateError("forward through an empty stack");
    Tensor h = input;
    for (auto& layer : layers_) h = layer.forward(h);
    return h;
  }

  BackwardResult backward(const Tensor& output_grad, bool retain_cache = false) {
    if (layers_.empty()) throw StateError("backward through an empty stack");
    BackwardResult result;
    result.param_grads.resize(layers_.size());
    Tensor g = output_grad;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      g = layers_[i].backward(g, result.param_grads[i], retain_cache);
    }
    result.input_grad = std::move(g);
    return result;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights().size() + l.biases().size();
    return n;
  }

  /// All weights then biases, layer by layer.
  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      out.insert(out.end(), l.weights().begin(), l.weights().end());
      out.insert(out.end(), l.biases().begin(), l.biases().end());
    }
    return out;
  }

  friend bool operator==(const MlpStack& a, const MlpStack& b) {
    if (a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      if (a.layers_[i].activation() != b.layers_[i].activation() ||
          !(a.layers_[i].weights() == b.layers_[i].weights()) ||
          !(a.layers_[i].biases() == b.layers_[i].biases()))
        return false;
    }
    return true;
  }

 private:
  std::vector<DenseLayer> layers_;
};

inline Tensor stack_forward(MlpStack& stack, const Tensor& input) { return stack.forward(input); }

inline BackwardResult stack_backward(MlpStack& stack, const Tensor& output_grad) {
  return stack.backward(output_grad);
}

inline void sgd_step(Tensor& param, const Tensor& grad, double lr) {
  if (!(lr > 0.0)) throw ConfigError(detail::concat("learning rate must be positive, got ", lr));
  require_same_shape(param, grad, "sgd_step");
  for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lr * grad[i];
}

inline void sgd_step(MlpStack& stack, const StackGrads& grads, double lr) {
  if (!(lr > 0.0)) throw ConfigError(detail::concat("learning rate must be positive, got ", lr));
  if (grads.size() != stack.depth()) throw DimensionError("gradient depth does not match stack");
  for (std::size_t i = 0; i < grads.size(); ++i) stack.layers()[i].apply_gradient(grads[i], lr);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

/// Binary cross-entropy averaged over batch and features.
inline double bc_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bc_loss");
  if (pred.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred[i]);
    const double t = target[i];
    s += t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
  }
  return -s / static_cast<double>(pred.size());
}

inline Tensor bc_loss_grad(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bc_loss_grad");
  Tensor g(pred.shape());
  const double n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred[i]);
    g[i] = (p - target[i]) / (p * (1.0 - p)) / n;
  }
  return g;
}

enum class KlForm {
  standard,  // -1/2 (1 + 2 log s - m^2 - s^2)
  paper      // -1/2 (1 + 2 log s - m^2 - s), the printed variant
};

inline KlForm kl_form_from_string(std::string_view s) {
  if (s == "standard") return KlForm::standard;
  if (s == "paper") return KlForm::paper;
  throw ConfigError(detail::concat("unknown kl form '", s, "' (expected standard|paper)"));
}

inline std::string_view to_string(KlForm f) {
  return f == KlForm::standard ? "standard" : "paper";
}

inline constexpr double kLogSigmaBound = 20.0;

/// Latent distribution parameters for one batch plus the noise that
/// produced z from them.
struct LatentStats {
  Tensor mu_hat;
  Tensor log_sigma_hat;
  Tensor epsilon;

  std::size_t batch() const { return mu_hat.rows(); }
  std::size_t latent_dim() const { return mu_hat.cols(); }

  Tensor sigma_hat() const {
    Tensor s = log_sigma_hat;
    for (double& v : s) v = std::exp(v);
    return s;
  }
};

/// Splits an encoder head of width 2s into (mu, log sigma), clamping log
/// sigma to [-20, 20].
inline LatentStats split_latent_head(const Tensor& head) {
  if (head.rank() != 2 || head.cols() % 2 != 0) {
    throw DimensionError(detail::concat("latent head must have even width, got ",
                                        shape_string(head.shape())));
  }
  const std::size_t s = head.cols() / 2;
  LatentStats stats;
  stats.mu_hat = head.col_block(0, s);
  stats.log_sigma_hat = head.col_block(s, s);
  for (double& v : stats.log_sigma_hat) v = std::clamp(v, -kLogSigmaBound, kLogSigmaBound);
  return stats;
}

/// Inverse of split_latent_head for gradients. Clamped entries pass no
/// gradient.
inline Tensor join_latent_grads(const LatentStats& stats, const Tensor& dmu,
                                const Tensor& dlogsigma) {
  require_same_shape(stats.mu_hat, dmu, "join_latent_grads mu");
  require_same_shape(stats.log_sigma_hat, dlogsigma, "join_latent_grads log sigma");
  const std::size_t b = dmu.rows(), s = dmu.cols();
  Tensor head = Tensor::matrix(b, 2 * s);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t c = 0; c < s; ++c) {
      head(r, c) = dmu(r, c);
      const bool clamped = std::abs(stats.log_sigma_hat(r, c)) >= kLogSigmaBound;
      head(r, s + c) = clamped ? 0.0 : dlogsigma(r, c);
    }
  }
  return head;
}

inline double kl_loss(const LatentStats& stats, KlForm form = KlForm::standard) {
  require_same_shape(stats.mu_hat, stats.log_sigma_hat, "kl_loss");
  const std::size_t b = stats.batch();
  if (b == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < stats.mu_hat.size(); ++i) {
    const double mu = stats.mu_hat[i];
    const double ls = stats.log_sigma_hat[i];
    const double sigma = std::exp(ls);
    const double last = form == KlForm::standard ? sigma * sigma : sigma;
    s += 1.0 + 2.0 * ls - mu * mu - last;
  }
  return -0.5 * s / static_cast<double>(b);
}

/// Gradients of kl_loss with respect to (mu, log sigma).
inline std::pair<Tensor, Tensor> kl_loss_grad(const LatentStats& stats,
                                              KlForm form = KlForm::standard) {
  require_same_shape(stats.mu_hat, stats.log_sigma_hat, "kl_loss_grad");
  const double b = static_cast<double>(stats.batch());
  Tensor dmu = stats.mu_hat;
  Tensor dls = stats.log_sigma_hat;
  for (std::size_t i = 0; i < dmu.size(); ++i) {
    dmu[i] = stats.mu_hat[i] / b;
    const double sigma = std::exp(stats.log_sigma_hat[i]);
    dls[i] = form == KlForm::standard ? (sigma * sigma - 1.0) / b : (0.5 * sigma - 1.0) / b;
  }
  return {std::move(dmu), std::move(dls)};
}

/// z = mu + sigma * eps with a caller-provided eps (cached in stats).
inline Tensor reparametrize(LatentStats& stats, Tensor epsilon) {
  require_same_shape(stats.mu_hat, epsilon, "reparametrize noise");
  stats.epsilon = std::move(epsilon);
  Tensor z = stats.mu_hat;
  for (std::size_t i = 0; i < z.size(); ++i)
    z[i] += std::exp(stats.log_sigma_hat[i]) * stats.epsilon[i];
  return z;
}

inline Tensor reparametrize(LatentStats& stats, RngStream& rng) {
  return reparametrize(stats, sample_standard_normal(rng, stats.mu_hat.shape()));
}

inline std::pair<Tensor, Tensor> reparametrize_backward(const LatentStats& stats, const Tensor& dz) {
  if (stats.epsilon.empty() && !stats.mu_hat.empty()) {
    throw ProtocolError("reparametrize_backward without cached noise from a forward pass");
  }
  require_same_shape(stats.epsilon, dz, "reparametrize_backward");
  Tensor dmu = dz;
  Tensor dls = dz;
  for (std::size_t i = 0; i < dz.size(); ++i)
    dls[i] = dz[i] * stats.epsilon[i] * std::exp(stats.log_sigma_hat[i]);
  return {std::move(dmu), std::move(dls)};
}

struct LossReport {
  double bc_loss = 0.0;
  double kl_loss = 0.0;
  double total = 0.0;
};

inline LossReport make_loss_report(double bc, double kl) { return {bc, kl, bc + kl}; }

}  // namespace splitvae
