#include "hvae/elbo.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hvae/errors.hpp"

namespace hvae {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void require_same_shape(const Tensor& a, const Tensor& b, const char* name) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

void require_binary(const Tensor& m, const char* name) {
  if (!strict_finite_enabled()) return;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    const double v = m.at(i);
    if (v != 0.0 && v != 1.0) {
      throw DataError(std::string(name) + ": mask contains non-binary value " + std::to_string(v));
    }
  }
}

}  // namespace

Tensor gaussian_recon_loglik(const Tensor& x, const Tensor& x_mean, double sigma_x) {
  require_same_shape(x, x_mean, "gaussian_recon_loglik");
  if (!(sigma_x > 0.0)) throw std::invalid_argument("gaussian_recon_loglik: sigma must be positive");
  const double d = static_cast<double>(x.numel());
  const double var2 = 2.0 * sigma_x * sigma_x;
  Tensor resid = sub(x, x_mean);
  Tensor sse = reduce_sum(mul(resid, resid));
  return add(mul(sse, -1.0 / var2), -0.5 * d * std::log(3.14159265358979323846 * var2));
}

Tensor bernoulli_mask_loglik(const Tensor& m, const Tensor& mask_logits) {
  require_same_shape(m, mask_logits, "bernoulli_mask_loglik");
  require_binary(m, "bernoulli_mask_loglik");
  // m log sigma(l) + (1-m) log(1-sigma(l)) = -[m sp(-l) + (1-m) sp(l)]
  Tensor on = mul(m, softplus(neg(mask_logits)));
  Tensor off = mul(sub(1.0, m), softplus(mask_logits));
  return neg(reduce_sum(add(on, off)));
}

Tensor kl_diag_gaussian(const Tensor& mu, const Tensor& logvar) {
  require_same_shape(mu, logvar, "kl_diag_gaussian");
  Tensor terms = sub(sub(add(mul(mu, mu), exp(logvar)), 1.0), logvar);
  return mul(reduce_sum(terms), 0.5);
}

Tensor gaussian_logdensity(const Tensor& z, const Tensor& mu, const Tensor& logvar) {
  require_same_shape(z, mu, "gaussian_logdensity");
  require_same_shape(z, logvar, "gaussian_logdensity");
  const double d = static_cast<double>(z.numel());
  Tensor diff = sub(z, mu);
  Tensor quad = div(mul(diff, diff), mul(exp(logvar), 2.0));
  Tensor per = sub(mul(logvar, -0.5), quad);
  return add(reduce_sum(per), -0.5 * kLog2Pi * d);
}

namespace {

struct TermAccumulator {
  Tensor recon_image, recon_mask, kinetic, initial_logq, prior_logp;

  static Tensor acc(const Tensor& sum, const Tensor& term) {
    return sum.defined() ? add(sum, term) : term;
  }

  LossResult finalize(std::size_t batch_size, const char* context) {
    const double inv = 1.0 / static_cast<double>(batch_size);
    LossResult result;
    Tensor total;
    auto fold = [&](Tensor& term, double& slot) {
      if (!term.defined()) term = Tensor::scalar(0.0);
      Tensor mean = mul(term, inv);
      slot = mean.value();
      total = total.defined() ? add(total, mean) : mean;
    };
    fold(recon_image, result.breakdown.recon_image);
    fold(recon_mask, result.breakdown.recon_mask);
    fold(kinetic, result.breakdown.kinetic);
    fold(initial_logq, result.breakdown.initial_logq);
    fold(prior_logp, result.breakdown.prior_logp);
    result.total = total;
    result.breakdown.total = total.value();
    if (!std::isfinite(result.breakdown.total)) {
      std::ostringstream msg;
      msg << context << ": non-finite loss; terms: recon_image=" << result.breakdown.recon_image
          << " recon_mask=" << result.breakdown.recon_mask
          << " kinetic=" << result.breakdown.kinetic
          << " initial_logq=" << result.breakdown.initial_logq
          << " prior_logp=" << result.breakdown.prior_logp;
      throw NumericError(msg.str());
    }
    return result;
  }
};

Tensor normal_noise(int dim, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (auto& x : v) x = rng.normal();
  return Tensor({dim}, std::move(v));
}

}  // namespace

LossResult vae_loss(const ModelConfig& model, const ParamStore& params,
                    const std::vector<SamplePair>& batch, const ElboConfig& config, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("vae_loss: batch must be non-empty");
  TermAccumulator terms;
  for (const SamplePair& sample : batch) {
    Tensor xm = concat_channels(sample.image, sample.mask);
    EncoderOutput enc = encoder_forward(model, params, xm);
    Tensor z0 = reparameterize(enc.mu, enc.logvar, normal_noise(model.latent_dim, rng));
    DecoderOutput dec = decoder_forward(model, params, z0);
    terms.recon_image = TermAccumulator::acc(
        terms.recon_image, neg(gaussian_recon_loglik(sample.image, dec.image_mean, config.sigma_x)));
    terms.recon_mask = TermAccumulator::acc(
        terms.recon_mask,
        mul(bernoulli_mask_loglik(sample.mask, dec.mask_logits), -config.lambda_mask));
    terms.initial_logq =
        TermAccumulator::acc(terms.initial_logq, kl_diag_gaussian(enc.mu, enc.logvar));
  }
  return terms.finalize(batch.size(), "vae_loss");
}

LossResult hvae_loss_joint(const ModelConfig& model, const ParamStore& params,
                           const std::vector<SamplePair>& batch, const ElboConfig& config,
                           const HmcConfig& hmc, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("hvae_loss_joint: batch must be non-empty");
  hmc.validate(model.latent_dim);
  const Tensor mass = hmc.mass_for(model.latent_dim);

  TermAccumulator terms;
  for (const SamplePair& sample : batch) {
    Tensor xm = concat_channels(sample.image, sample.mask);
    EncoderOutput enc = encoder_forward(model, params, xm);
    Tensor z0 = reparameterize(enc.mu, enc.logvar, normal_noise(model.latent_dim, rng));
    Tensor rho0 = sample_momentum(mass, rng);

    Potential potential = [&](const Tensor& z) {
      DecoderOutput dec = decoder_forward(model, params, z);
      Tensor joint = add(gaussian_recon_loglik(sample.image, dec.image_mean, config.sigma_x),
                         mul(bernoulli_mask_loglik(sample.mask, dec.mask_logits),
                             config.lambda_mask));
      Tensor zeros = Tensor::zeros({model.latent_dim});
      return neg(add(joint, gaussian_logdensity(z, zeros, zeros)));
    };

    EvolveResult flow = evolve(z0, rho0, potential, hmc);
    Tensor zk = flow.state.z;
    Tensor rhok = flow.state.rho;
    if (hmc.mh_enabled) {
      // Straight-through accept/reject: values switch, gradients follow
      // the surviving branch.
      const double h_old = hamiltonian({z0, rho0}, potential, mass);
      const double h_new = hamiltonian({zk, rhok}, potential, mass);
      if (!metropolis_accept(h_old, h_new, rng.uniform01())) {
        zk = z0;
        rhok = rho0;
      }
    }

    DecoderOutput dec = decoder_forward(model, params, zk);
    Tensor zeros = Tensor::zeros({model.latent_dim});

    terms.recon_image = TermAccumulator::acc(
        terms.recon_image, neg(gaussian_recon_loglik(sample.image, dec.image_mean, config.sigma_x)));
    terms.recon_mask = TermAccumulator::acc(
        terms.recon_mask,
        mul(bernoulli_mask_loglik(sample.mask, dec.mask_logits), -config.lambda_mask));
    terms.prior_logp =
        TermAccumulator::acc(terms.prior_logp, neg(gaussian_logdensity(zk, zeros, zeros)));

    Tensor kin_k = mul(reduce_sum(div(mul(rhok, rhok), mass)), 0.5);
    Tensor kinetic = kin_k;
    if (hmc.include_initial_kinetic) {
      Tensor kin_0 = mul(reduce_sum(div(mul(rho0, rho0), mass)), 0.5);
      kinetic = sub(kin_k, kin_0);
    }
    terms.kinetic = TermAccumulator::acc(terms.kinetic, kinetic);

    const Tensor& q_point = config.logq_point == LogqPoint::InitialZ0 ? z0 : zk;
    Tensor logq = config.logq_density == LogqDensity::Encoder
                      ? gaussian_logdensity(q_point, enc.mu, enc.logvar)
                      : gaussian_logdensity(q_point, zeros, zeros);
    terms.initial_logq = TermAccumulator::acc(terms.initial_logq, logq);
  }
  return terms.finalize(batch.size(), "hvae_loss_joint");
}

}  // namespace hvae
