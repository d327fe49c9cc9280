#pragma once

#include <vector>

#include "hvae/hmc.hpp"
#include "hvae/nn.hpp"
#include "hvae/phantom.hpp"
#include "hvae/rng.hpp"

namespace hvae {

// Per-batch means of the loss terms, signed so they sum to the total.
// The vanilla model reports its closed-form KL under initial_logq.
struct ElboBreakdown {
  double recon_image = 0.0;
  double recon_mask = 0.0;
  double kinetic = 0.0;
  double initial_logq = 0.0;
  double prior_logp = 0.0;
  double total = 0.0;
};

// Which density the - log q term evaluates, and where.
enum class LogqPoint { InitialZ0, FinalZK };
enum class LogqDensity { Encoder, StandardNormal };

struct ElboConfig {
  double sigma_x = 1.0;
  double lambda_mask = 1.0;
  LogqPoint logq_point = LogqPoint::InitialZ0;
  LogqDensity logq_density = LogqDensity::Encoder;
};

// sum over pixels of -log(2 pi sigma^2)/2 - (x - x_mean)^2 / (2 sigma^2)
Tensor gaussian_recon_loglik(const Tensor& x, const Tensor& x_mean, double sigma_x);

// Stable logit-form Bernoulli log-likelihood, summed over pixels.
Tensor bernoulli_mask_loglik(const Tensor& m, const Tensor& mask_logits);

// KL(N(mu, diag exp(logvar)) || N(0, I)), closed form.
Tensor kl_diag_gaussian(const Tensor& mu, const Tensor& logvar);

// log N(z; mu, diag exp(logvar)), summed over coordinates.
Tensor gaussian_logdensity(const Tensor& z, const Tensor& mu, const Tensor& logvar);

struct LossResult {
  Tensor total;  // scalar, minimization objective (negated bound)
  ElboBreakdown breakdown;
};

// Vanilla VAE objective with the joint image+mask reconstruction.
LossResult vae_loss(const ModelConfig& model, const ParamStore& params,
                    const std::vector<SamplePair>& batch, const ElboConfig& config, Rng& rng);

// Hamiltonian-flow objective: encode, refine z0 -> zK by leapfrog under
// U(z) = -[log p(x|z) + lambda log p(m|z) + log p(z)], then score the
// flowed sample. Differentiable end to end.
LossResult hvae_loss_joint(const ModelConfig& model, const ParamStore& params,
                           const std::vector<SamplePair>& batch, const ElboConfig& config,
                           const HmcConfig& hmc, Rng& rng);

}  // namespace hvae
