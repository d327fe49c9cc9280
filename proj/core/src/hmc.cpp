#include "hvae/hmc.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "hvae/errors.hpp"

namespace hvae {

void HmcConfig::validate(int dim) const {
  if (steps < 0) throw ConfigError("hmc config: step count must be non-negative");
  if (!(eps > 0.0)) throw ConfigError("hmc config: eps must be positive");
  if (mass_diag.defined()) {
    if (mass_diag.shape() != Shape{dim}) {
      throw ConfigError("hmc config: mass_diag shape " + shape_str(mass_diag.shape()) +
                        " does not match dim " + std::to_string(dim));
    }
    for (std::size_t i = 0; i < mass_diag.numel(); ++i) {
      if (!(mass_diag.at(i) > 0.0)) {
        throw ConfigError("hmc config: mass_diag entries must be strictly positive");
      }
    }
  }
}

Tensor HmcConfig::mass_for(int dim) const {
  if (mass_diag.defined()) return mass_diag;
  return Tensor::full({dim}, 1.0);
}

double hamiltonian(const PhaseState& state, const Potential& potential, const Tensor& mass_diag) {
  if (!state.z.same_shape(state.rho)) {
    throw std::invalid_argument("hamiltonian: z and rho shapes differ");
  }
  double u;
  {
    NoGradGuard value_only;
    u = potential(state.z).value();
  }
  if (!std::isfinite(u)) throw NumericError("hamiltonian: non-finite potential energy");
  double kinetic = 0.0;
  for (std::size_t i = 0; i < state.rho.numel(); ++i) {
    kinetic += state.rho.at(i) * state.rho.at(i) / mass_diag.at(i);
  }
  return u + 0.5 * kinetic;
}

Tensor sample_momentum(const Tensor& mass_diag, Rng& rng) {
  std::vector<double> v(mass_diag.numel());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::sqrt(mass_diag.at(i)) * rng.normal();
  }
  return Tensor(mass_diag.shape(), std::move(v));
}

Tensor potential_grad(const Potential& potential, const Tensor& z) {
  Tape* ambient = Tape::active();
  if (ambient != nullptr && recording_enabled()) {
    // Stay on the ambient tape even when z itself is a constant: the
    // potential may close over recorded parameters, and their influence
    // on the flow must survive into the outer backward pass.
    const bool on_tape = z.node() >= 0 && z.tape_id() == ambient->id();
    Tensor zz = on_tape ? z : ambient->watch(z);
    Tensor u = potential(zz);
    return ambient->grad(u, zz);
  }
  EnableRecordingGuard enable;
  Tape tape;
  TapeScope scope(tape);
  Tensor wz = tape.watch(z);
  Tensor u = potential(wz);
  Tensor g = tape.backward(u).at(wz);
  check_finite(g, "potential gradient");
  return g;
}

PhaseState leapfrog_step(const PhaseState& state, const Potential& potential, double eps,
                         const Tensor& mass_diag) {
  const double half = 0.5 * eps;
  Tensor rho_half = sub(state.rho, mul(potential_grad(potential, state.z), half));
  Tensor z_new = add(state.z, mul(div(rho_half, mass_diag), eps));
  Tensor rho_new = sub(rho_half, mul(potential_grad(potential, z_new), half));
  return {z_new, rho_new};
}

namespace {

void record_point(std::vector<TrajectoryPoint>& trajectory, int step, const PhaseState& s,
                  const Potential& potential, const Tensor& mass) {
  TrajectoryPoint p;
  p.step = step;
  p.z = s.z.values();
  p.rho = s.rho.values();
  p.energy = hamiltonian(s, potential, mass);
  trajectory.push_back(std::move(p));
}

}  // namespace

EvolveResult evolve(const Tensor& z0, const Tensor& rho0, const Potential& potential,
                    const HmcConfig& config, bool keep_trajectory) {
  if (!z0.same_shape(rho0)) throw std::invalid_argument("evolve: z and rho shapes differ");
  const int dim = static_cast<int>(z0.numel());
  config.validate(dim);
  const Tensor mass = config.mass_for(dim);
  const double half = 0.5 * config.eps;

  EvolveResult result;
  result.state = {z0, rho0};
  if (keep_trajectory) record_point(result.trajectory, 0, result.state, potential, mass);
  if (config.steps == 0) return result;

  Tensor grad = potential_grad(potential, result.state.z);
  for (int k = 1; k <= config.steps; ++k) {
    Tensor rho_half = sub(result.state.rho, mul(grad, half));
    Tensor z_new = add(result.state.z, mul(div(rho_half, mass), config.eps));
    grad = potential_grad(potential, z_new);
    Tensor rho_new = sub(rho_half, mul(grad, half));
    if (!z_new.all_finite() || !rho_new.all_finite()) {
      throw NumericError("evolve: non-finite state at leapfrog step " + std::to_string(k));
    }
    result.state = {z_new, rho_new};
    if (keep_trajectory) record_point(result.trajectory, k, result.state, potential, mass);
  }
  return result;
}

bool metropolis_accept(double h_old, double h_new, double u) {
  if (!std::isfinite(h_old) || !std::isfinite(h_new)) {
    throw NumericError("metropolis_accept: non-finite energies");
  }
  if (h_new <= h_old) return true;
  return u < std::exp(h_old - h_new);
}

ChainResult hmc_chain(const Potential& potential, const Tensor& z_init, const HmcConfig& config,
                      int n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("hmc_chain: n_samples must be at least 1");
  const int dim = static_cast<int>(z_init.numel());
  config.validate(dim);
  const Tensor mass = config.mass_for(dim);

  ChainResult result;
  result.samples.reserve(static_cast<std::size_t>(n_samples));
  Tensor z = z_init;
  std::size_t accepted = 0;
  for (int i = 0; i < n_samples; ++i) {
    Tensor rho = sample_momentum(mass, rng);
    const double h_old = hamiltonian({z, rho}, potential, mass);
    EvolveResult ev = evolve(z, rho, potential, config);
    const double h_new = hamiltonian(ev.state, potential, mass);
    if (metropolis_accept(h_old, h_new, rng.uniform01())) {
      z = ev.state.z;
      ++accepted;
    }
    result.samples.push_back(z);
  }
  result.acceptance_rate = static_cast<double>(accepted) / static_cast<double>(n_samples);
  return result;
}

void write_trajectory_csv(const std::filesystem::path& path,
                          const std::vector<TrajectoryPoint>& trajectory) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open trajectory file " + path.string());
  out << "step,coordinate_index,z,rho,H\n";
  out.precision(17);
  for (const auto& p : trajectory) {
    for (std::size_t i = 0; i < p.z.size(); ++i) {
      out << p.step << "," << i << "," << p.z[i] << "," << p.rho[i] << "," << p.energy << "\n";
    }
  }
  if (!out) throw IoError("failed writing trajectory file " + path.string());
}

}  // namespace hvae
