#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "hvae/autodiff.hpp"
#include "hvae/rng.hpp"

namespace hvae {

// Scalar potential U(z), built from the recorded ops so its gradient
// is available both value-only and as part of a larger graph.
using Potential = std::function<Tensor(const Tensor&)>;

struct HmcConfig {
  int steps = 5;      // leapfrog step count K
  double eps = 0.05;  // step size
  Tensor mass_diag;   // diagonal of M; identity when left undefined
  bool mh_enabled = false;
  bool include_initial_kinetic = true;

  void validate(int dim) const;
  Tensor mass_for(int dim) const;
};

struct PhaseState {
  Tensor z;
  Tensor rho;
};

// U(z) + rho' M^-1 rho / 2, evaluated value-only.
double hamiltonian(const PhaseState& state, const Potential& potential, const Tensor& mass_diag);

// rho_i = sqrt(m_i) * n_i, n ~ N(0, I).
Tensor sample_momentum(const Tensor& mass_diag, Rng& rng);

// Gradient of the potential at z. Recorded as part of the ambient tape
// when z lives on it; otherwise evaluated on a private tape.
Tensor potential_grad(const Potential& potential, const Tensor& z);

// One Stormer-Verlet step. Differentiable w.r.t. z, rho and anything
// the potential closes over, when evaluated under a recording tape.
PhaseState leapfrog_step(const PhaseState& state, const Potential& potential, double eps,
                         const Tensor& mass_diag);

struct TrajectoryPoint {
  int step = 0;
  std::vector<double> z;
  std::vector<double> rho;
  double energy = 0.0;
};

struct EvolveResult {
  PhaseState state;
  std::vector<TrajectoryPoint> trajectory;
};

// K composed leapfrog steps. The composition reuses the boundary
// gradient between steps, which is bit-identical to chaining
// leapfrog_step. Aborts with the step index when state goes non-finite.
EvolveResult evolve(const Tensor& z0, const Tensor& rho0, const Potential& potential,
                    const HmcConfig& config, bool keep_trajectory = false);

// Accept iff u < min(1, exp(h_old - h_new)).
bool metropolis_accept(double h_old, double h_new, double u);

struct ChainResult {
  std::vector<Tensor> samples;
  double acceptance_rate = 0.0;
};

// Momentum refresh -> evolve -> Metropolis accept/reject, repeated.
// Value-level; for diagnostics and inference, not the training loss.
ChainResult hmc_chain(const Potential& potential, const Tensor& z_init, const HmcConfig& config,
                      int n_samples, Rng& rng);

// CSV columns: step,coordinate_index,z,rho,H
void write_trajectory_csv(const std::filesystem::path& path,
                          const std::vector<TrajectoryPoint>& trajectory);

}  // namespace hvae
