#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hvae/errors.hpp"
#include "hvae/hmc.hpp"
#include "hvae/rng.hpp"

using namespace hvae;

namespace {

const Potential quadratic = [](const Tensor& z) { return mul(reduce_sum(mul(z, z)), 0.5); };

Tensor vec(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  return worst;
}

// Gaussian elimination with partial pivoting; fine for the tiny
// Jacobians used here.
double determinant(std::vector<std::vector<double>> m) {
  const std::size_t n = m.size();
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    }
    if (m[pivot][col] == 0.0) return 0.0;
    if (pivot != col) {
      std::swap(m[pivot], m[col]);
      det = -det;
    }
    det *= m[col][col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (std::size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  return det;
}

}  // namespace

TEST_CASE("hamiltonian hand cases") {
  Tensor mass1 = Tensor::full({1}, 1.0);
  CHECK(hamiltonian({vec({0.0}), vec({0.0})}, quadratic, mass1) == 0.0);
  CHECK(hamiltonian({vec({1.0}), vec({2.0})}, quadratic, mass1) == doctest::Approx(2.5).epsilon(1e-15));
  CHECK(hamiltonian({vec({1.0}), vec({2.0})}, quadratic, Tensor::full({1}, 4.0)) ==
        doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("momentum sampling is deterministic and matches the mass") {
  Tensor mass = Tensor::full({2}, 1.0);
  Rng a(42), b(42);
  Tensor ra = sample_momentum(mass, a);
  Tensor rb = sample_momentum(mass, b);
  CHECK(max_abs_diff(ra, rb) == 0.0);

  Rng rng(7);
  double sum = 0.0, sum2 = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double v = sample_momentum(Tensor::full({1}, 1.0), rng).at(0);
    sum += v;
    sum2 += v * v;
  }
  const double var = sum2 / n - (sum / n) * (sum / n);
  CHECK(var > 0.9);
  CHECK(var < 1.1);

  sum = sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = sample_momentum(Tensor::full({1}, 4.0), rng).at(0);
    sum += v;
    sum2 += v * v;
  }
  const double sd = std::sqrt(sum2 / n - (sum / n) * (sum / n));
  CHECK(sd > 1.9);
  CHECK(sd < 2.1);
}

TEST_CASE("leapfrog hand case on the quadratic potential") {
  Tensor mass = Tensor::full({1}, 1.0);
  PhaseState s{vec({1.0}), vec({0.0})};
  PhaseState out = leapfrog_step(s, quadratic, 0.1, mass);
  CHECK(out.z.at(0) == doctest::Approx(0.995).epsilon(1e-15));
  CHECK(out.rho.at(0) == doctest::Approx(-0.09975).epsilon(1e-15));
}

TEST_CASE("free particle and zero step") {
  const Potential constant = [](const Tensor& z) { return mul(reduce_sum(z), 0.0); };
  Tensor mass = Tensor::full({2}, 2.0);
  PhaseState s{vec({1.0, -1.0}), vec({0.5, 1.5})};
  PhaseState out = leapfrog_step(s, constant, 0.2, mass);
  CHECK(out.z.at(0) == doctest::Approx(1.0 + 0.2 * 0.5 / 2.0).epsilon(1e-15));
  CHECK(out.z.at(1) == doctest::Approx(-1.0 + 0.2 * 1.5 / 2.0).epsilon(1e-15));
  CHECK(max_abs_diff(out.rho, s.rho) == 0.0);

  PhaseState frozen = leapfrog_step(s, quadratic, 0.0, mass);
  CHECK(max_abs_diff(frozen.z, s.z) == 0.0);
  CHECK(max_abs_diff(frozen.rho, s.rho) == 0.0);
}

TEST_CASE("evolve composition and K=0") {
  HmcConfig cfg;
  cfg.steps = 0;
  cfg.eps = 0.1;
  Tensor z0 = vec({0.3, -0.7});
  Tensor r0 = vec({0.2, 0.9});
  EvolveResult idle = evolve(z0, r0, quadratic, cfg);
  CHECK(max_abs_diff(idle.state.z, z0) == 0.0);
  CHECK(max_abs_diff(idle.state.rho, r0) == 0.0);

  cfg.steps = 2;
  EvolveResult two = evolve(z0, r0, quadratic, cfg);
  Tensor mass = cfg.mass_for(2);
  PhaseState manual = leapfrog_step(leapfrog_step({z0, r0}, quadratic, cfg.eps, mass), quadratic,
                                    cfg.eps, mass);
  CHECK(max_abs_diff(two.state.z, manual.z) < 1e-14);
  CHECK(max_abs_diff(two.state.rho, manual.rho) < 1e-14);
}

TEST_CASE("time reversal returns to the start") {
  HmcConfig cfg;
  cfg.steps = 50;
  cfg.eps = 0.2;
  Rng rng(19);
  std::vector<double> z0v(3), r0v(3);
  for (auto& v : z0v) v = rng.uniform(-1.0, 1.0);
  for (auto& v : r0v) v = rng.uniform(-1.0, 1.0);
  Tensor z0 = vec(z0v), r0 = vec(r0v);

  EvolveResult fwd = evolve(z0, r0, quadratic, cfg);
  EvolveResult back = evolve(fwd.state.z, neg(fwd.state.rho), quadratic, cfg);
  CHECK(max_abs_diff(back.state.z, z0) < 1e-9);
  CHECK(max_abs_diff(neg(back.state.rho), r0) < 1e-9);
}

TEST_CASE("energy drift shrinks like a second-order integrator") {
  // Fixed total time T; halving eps should cut max drift by about 4.
  auto max_drift = [&](double eps, int steps) {
    HmcConfig cfg;
    cfg.steps = steps;
    cfg.eps = eps;
    Tensor z0 = vec({1.0, -0.5});
    Tensor r0 = vec({0.3, 0.8});
    EvolveResult r = evolve(z0, r0, quadratic, cfg, /*keep_trajectory=*/true);
    const double h0 = r.trajectory.front().energy;
    double worst = 0.0;
    for (const auto& p : r.trajectory) worst = std::max(worst, std::abs(p.energy - h0));
    return worst;
  };
  const double coarse = max_drift(0.2, 50);
  const double fine = max_drift(0.1, 100);
  const double ratio = coarse / fine;
  CHECK(ratio > 3.0);
  CHECK(ratio < 6.0);
}

TEST_CASE("single leapfrog step preserves phase-space volume") {
  for (int d = 1; d <= 3; ++d) {
    Rng rng(100 + d);
    std::vector<double> base(2 * static_cast<std::size_t>(d));
    for (auto& v : base) v = rng.uniform(-1.0, 1.0);
    Tensor mass = Tensor::full({d}, 1.0);

    auto step = [&](const std::vector<double>& in) {
      Tensor z({d}, std::vector<double>(in.begin(), in.begin() + d));
      Tensor rho({d}, std::vector<double>(in.begin() + d, in.end()));
      PhaseState out = leapfrog_step({z, rho}, quadratic, 0.15, mass);
      std::vector<double> flat(2 * static_cast<std::size_t>(d));
      for (int i = 0; i < d; ++i) {
        flat[static_cast<std::size_t>(i)] = out.z.at(static_cast<std::size_t>(i));
        flat[static_cast<std::size_t>(d + i)] = out.rho.at(static_cast<std::size_t>(i));
      }
      return flat;
    };

    const double h = 1e-6;
    const std::size_t n = 2 * static_cast<std::size_t>(d);
    std::vector<std::vector<double>> jac(n, std::vector<double>(n));
    for (std::size_t col = 0; col < n; ++col) {
      std::vector<double> plus = base, minus = base;
      plus[col] += h;
      minus[col] -= h;
      const auto fp = step(plus);
      const auto fm = step(minus);
      for (std::size_t row = 0; row < n; ++row) jac[row][col] = (fp[row] - fm[row]) / (2.0 * h);
    }
    INFO("d = " << d);
    CHECK(std::abs(determinant(jac) - 1.0) < 1e-6);
  }
}

TEST_CASE("metropolis acceptance rule") {
  CHECK(metropolis_accept(5.0, 4.0, 0.999999));
  CHECK(metropolis_accept(1.0, 1.0, 0.999));
  const double dh = std::log(2.0);
  CHECK(metropolis_accept(0.0, dh, 0.4));
  CHECK_FALSE(metropolis_accept(0.0, dh, 0.6));
  CHECK_THROWS_AS(metropolis_accept(std::nan(""), 0.0, 0.5), NumericError);
}

TEST_CASE("chain matches the standard normal target") {
  HmcConfig cfg;
  cfg.steps = 10;
  cfg.eps = 0.1;
  const int d = 3;
  Rng rng(2024);
  ChainResult chain = hmc_chain(quadratic, Tensor::zeros({d}), cfg, 10000, rng);
  CHECK(chain.acceptance_rate > 0.9);
  for (int i = 0; i < d; ++i) {
    double sum = 0.0, sum2 = 0.0;
    for (const Tensor& z : chain.samples) {
      const double v = z.at(static_cast<std::size_t>(i));
      sum += v;
      sum2 += v * v;
    }
    const double n = static_cast<double>(chain.samples.size());
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    INFO("coordinate " << i);
    CHECK(std::abs(mean) < 0.05);
    CHECK(var > 0.9);
    CHECK(var < 1.1);
  }
}

TEST_CASE("degenerate chain returns the start") {
  HmcConfig cfg;
  cfg.steps = 0;
  cfg.eps = 0.1;
  Rng rng(5);
  Tensor z0 = vec({0.25, -1.5});
  ChainResult chain = hmc_chain(quadratic, z0, cfg, 1, rng);
  CHECK(chain.samples.size() == 1);
  CHECK(max_abs_diff(chain.samples[0], z0) == 0.0);
  CHECK(chain.acceptance_rate == 1.0);
}

TEST_CASE("flow is differentiable end to end") {
  // Potential with a trainable stiffness: U(z) = 0.5 * theta * |z|^2.
  Rng rng(55);
  Tensor z0v = vec({0.4, -0.2, 0.9});
  Tensor thetav = Tensor::scalar(1.3);

  auto run = [&](const Tensor& z_in, const Tensor& theta_in, bool want_grads) {
    Tape tape;
    TapeScope scope(tape);
    Tensor z = tape.watch(z_in);
    Tensor theta = tape.watch(theta_in);
    Potential pot = [&](const Tensor& zz) {
      return mul(mul(reduce_sum(mul(zz, zz)), 0.5), reshape(theta, {}));
    };
    HmcConfig cfg;
    cfg.steps = 4;
    cfg.eps = 0.1;
    EvolveResult r = evolve(z, vec({0.1, 0.2, -0.3}), pot, cfg);
    Tensor out = reduce_sum(mul(r.state.z, r.state.z));
    if (!want_grads) return std::make_tuple(out.value(), Tensor(), Tensor());
    GradientMap grads = tape.backward(out);
    return std::make_tuple(out.value(), grads.at(z), grads.at(theta));
  };

  auto [value, gz, gtheta] = run(z0v, thetav, true);
  CHECK(std::isfinite(value));

  const double step = 1e-5;
  for (std::size_t i = 0; i < z0v.numel(); ++i) {
    std::vector<double> p = z0v.values(), m = z0v.values();
    p[i] += step;
    m[i] -= step;
    const double fp = std::get<0>(run(Tensor(z0v.shape(), p), thetav, false));
    const double fm = std::get<0>(run(Tensor(z0v.shape(), m), thetav, false));
    const double central = (fp - fm) / (2.0 * step);
    CHECK(std::abs(gz.at(i) - central) / std::max(1.0, std::abs(gz.at(i))) < 1e-4);
  }
  const double fp = std::get<0>(run(z0v, Tensor::scalar(1.3 + step), false));
  const double fm = std::get<0>(run(z0v, Tensor::scalar(1.3 - step), false));
  const double central = (fp - fm) / (2.0 * step);
  CHECK(std::abs(gtheta.value() - central) / std::max(1.0, std::abs(gtheta.value())) < 1e-4);
}

TEST_CASE("trajectory csv dump") {
  HmcConfig cfg;
  cfg.steps = 3;
  cfg.eps = 0.1;
  EvolveResult r = evolve(vec({1.0, 0.0}), vec({0.0, 1.0}), quadratic, cfg, true);
  CHECK(r.trajectory.size() == 4);
  const auto path = std::filesystem::temp_directory_path() / "hvae_traj_test.csv";
  write_trajectory_csv(path, r.trajectory);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,coordinate_index,z,rho,H");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 8);
  std::filesystem::remove(path);
}

TEST_CASE("config validation") {
  HmcConfig cfg;
  cfg.eps = 0.0;
  CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  cfg.eps = 0.1;
  cfg.steps = -1;
  CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  cfg.steps = 1;
  cfg.mass_diag = Tensor({2}, {1.0, 0.0});
  CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  cfg.mass_diag = Tensor();
  Rng rng(1);
  CHECK_THROWS_AS(hmc_chain(quadratic, Tensor::zeros({2}), cfg, 0, rng), std::invalid_argument);
}
