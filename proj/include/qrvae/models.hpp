#pragma once

// Gaussian VAE and quantile-regression VAE.
//
// Both share one encoder design (trunk + mean / log-variance heads) and one
// decoder trunk; they differ only in the decoder's last layer pair and in the
// reconstruction term of the loss:
//
//   VAE    heads (mean, log sigma^2), loss = Gaussian NLL + KL
//   QR-VAE heads (Q_low, Q_high),     loss = pinball(alpha_low) + pinball(alpha_high) + KL
//
// Both quantile heads hang off the same trunk, so the two quantiles are fit
// jointly; crossing is measured downstream, not prevented by construction.
//
// Minimizing the pinball loss is the same as maximizing an asymmetric
// Laplace likelihood with unit scale, which is why the QR-VAE objective is
// still an ELBO of sorts; only the pinball form is optimized here.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qrvae/io.hpp"
#include "qrvae/layers.hpp"

namespace qrvae {

enum class ModelKind { Vae, QrVae };
enum class Architecture { Mlp, Conv };
enum class OutputActivation { Identity, Sigmoid };

std::string to_string(ModelKind k);
ModelKind parse_model_kind(const std::string& s);

struct ModelConfig {
    ModelKind kind = ModelKind::QrVae;
    Architecture arch = Architecture::Mlp;
    Shape input_shape{4};                    // per sample: {D} or {C, H, W}
    std::vector<std::size_t> hidden{64, 64}; // MLP trunk widths (encoder; decoder mirrors)
    std::vector<std::size_t> channels{16, 32, 64};
    std::size_t kernel = 4, stride = 2, padding = 1;
    std::size_t latent = 2;
    double alpha_low = 0.15, alpha_high = 0.5;
    double logvar_min = -7.0, logvar_max = 7.0;
    OutputActivation output = OutputActivation::Identity;
    std::uint64_t init_seed = 1;

    static ModelConfig from(const KeyValues& kv);
    void write_to(KeyValues& kv) const;
    void validate() const;
};

// ---- loss terms ------------------------------------------------------------------------

/// z = mu + exp(logvar / 2) * eps
Var reparameterize(const Var& mu, const Var& logvar, const Var& eps);

/// KL(N(mu, sigma^2) || N(0, I)) = 0.5 sum_dims (mu^2 + sigma^2 - 1 - log sigma^2), averaged over the batch.
Var kl_term(const Var& mu, const Var& logvar);

/// Batch mean of sum_pixels [0.5 logvar + (x - mean)^2 / (2 sigma^2)]; the
/// 0.5 log(2 pi) constant is dropped.
Var gaussian_nll(const Var& x, const Var& mean, const Var& logvar);

/// Mean over elements of rho_alpha(y - yhat), rho_alpha(u) = max(alpha u, (alpha - 1) u).
/// The kink at u = 0 takes subgradient 0. Throws for alpha outside (0, 1).
Var pinball_loss(const Var& y, const Var& yhat, double alpha);

/// Pinball at both levels, summed over the pixels of each sample and averaged
/// over the batch (the same scale as gaussian_nll).
Var qrvae_reconstruction_loss(const Var& x, const Var& q_low, const Var& q_high, double alpha_low, double alpha_high);

// ---- the model ---------------------------------------------------------------------------

struct ForwardResult {
    Var head_a;  // mean (VAE) or Q_low (QR-VAE)
    Var head_b;  // clamped log sigma^2 (VAE) or Q_high (QR-VAE)
    Var mu;
    Var logvar;
    Var z;
};

struct LossParts {
    Var total;
    Var reconstruction;
    Var kl;
};

/// Plain-tensor outputs of an inference pass.
struct Reconstruction {
    Tensor head_a, head_b, mu, logvar;
};

enum class LatentMode { Sample, Mean };

class Autoencoder {
public:
    explicit Autoencoder(ModelConfig config);

    Autoencoder(const Autoencoder&) = delete;
    Autoencoder& operator=(const Autoencoder&) = delete;
    Autoencoder(Autoencoder&&) = default;
    Autoencoder& operator=(Autoencoder&&) = default;

    const ModelConfig& config() const { return config_; }
    ModelKind kind() const { return config_.kind; }

    /// Encoder -> reparameterize(eps) -> decoder on the tape of `x`.
    ForwardResult forward(const Var& x, const Tensor& eps, Mode mode);
    LossParts loss(const Var& x, const ForwardResult& out) const;

    /// Decoder heads for latent codes [n, latent].
    ForwardResult decode(const Var& z, Mode mode);

    /// Tape-free evaluation; LatentMode::Mean reconstructs with eps = 0,
    /// Sample draws eps from `rng`.
    Reconstruction reconstruct(const Tensor& x, LatentMode latent, std::mt19937_64& rng, std::size_t chunk = 256);
    /// Decoder heads for latent codes, in eval mode.
    Reconstruction decode_latents(const Tensor& z, std::size_t chunk = 256);

    std::vector<std::pair<std::string, Parameter*>> named_parameters();
    std::vector<std::pair<std::string, Tensor*>> named_buffers();
    std::vector<Parameter*> parameters();
    std::vector<std::string> describe() const;

private:
    ModelConfig config_;
    Sequential encoder_;
    Sequential decoder_;
};

/// Batch of standard-normal draws [batch, latent].
Tensor standard_normal(const Shape& shape, std::mt19937_64& rng);

}  // namespace qrvae
