#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "hvae/errors.hpp"
#include "hvae/metrics.hpp"
#include "hvae/nn.hpp"
#include "hvae/phantom.hpp"

using namespace hvae;

namespace {

Tensor mask_of(std::vector<double> v, int h, int w) { return Tensor({1, h, w}, std::move(v)); }

Tensor random_image(int h, int w, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = rng.uniform01();
  return Tensor({1, h, w}, std::move(v));
}

// Independent SSIM: computes each moment in its own full pass.
double ssim_reference(const Tensor& a, const Tensor& b, int window, double max_val) {
  const int h = a.shape()[1], w = a.shape()[2];
  const double c1 = std::pow(0.01 * max_val, 2.0), c2 = std::pow(0.03 * max_val, 2.0);
  double total = 0.0;
  int blocks = 0;
  for (int by = 0; by + window <= h; by += window) {
    for (int bx = 0; bx + window <= w; bx += window) {
      auto moment = [&](const Tensor& t, const Tensor& u) {
        double acc = 0.0;
        for (int y = by; y < by + window; ++y) {
          for (int x = bx; x < bx + window; ++x) {
            acc += t.at(static_cast<std::size_t>(y) * w + x) * u.at(static_cast<std::size_t>(y) * w + x);
          }
        }
        return acc / (static_cast<double>(window) * window);
      };
      auto mean_of = [&](const Tensor& t) {
        double acc = 0.0;
        for (int y = by; y < by + window; ++y) {
          for (int x = bx; x < bx + window; ++x) acc += t.at(static_cast<std::size_t>(y) * w + x);
        }
        return acc / (static_cast<double>(window) * window);
      };
      const double ma = mean_of(a), mb = mean_of(b);
      const double va = moment(a, a) - ma * ma;
      const double vb = moment(b, b) - mb * mb;
      const double cov = moment(a, b) - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++blocks;
    }
  }
  return total / blocks;
}

}  // namespace

TEST_CASE("dice hand cases") {
  Tensor a = mask_of({1, 1, 1, 0, 0, 0, 0, 0, 0}, 3, 3);
  Tensor b = mask_of({1, 1, 0, 1, 1, 0, 0, 0, 0}, 3, 3);
  CHECK(dice(a, b) == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(dice(a, a) == 1.0);

  Tensor c = mask_of({0, 0, 0, 1, 1, 0, 0, 0, 0}, 3, 3);
  Tensor d = mask_of({0, 0, 0, 0, 0, 1, 0, 0, 0}, 3, 3);
  CHECK(dice(c, d) == 0.0);

  CHECK(dice(Tensor::zeros({1, 3, 3}), Tensor::zeros({1, 3, 3})) == 1.0);
  CHECK(dice(a, b) == dice(b, a));

  CHECK_THROWS_AS(dice(mask_of({0.5, 0, 0, 0}, 2, 2), Tensor::zeros({1, 2, 2})),
                  std::invalid_argument);
}

TEST_CASE("psnr hand cases") {
  Rng rng(1);
  Tensor a = random_image(4, 4, rng);
  CHECK(std::isinf(psnr(a, a)));

  Tensor b = add(a, 0.1);
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(a, b, 2.0) - psnr(a, b, 1.0) == doctest::Approx(20.0 * std::log10(2.0)).epsilon(1e-10));
  CHECK_THROWS_AS(psnr(a, Tensor::zeros({1, 3, 3})), std::invalid_argument);
}

TEST_CASE("ssim hand cases") {
  Rng rng(2);
  Tensor a = random_image(8, 8, rng);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  const double c = 0.4, delta = 0.2, c1 = 0.0001;
  Tensor ca = Tensor::full({1, 8, 8}, c);
  Tensor cb = Tensor::full({1, 8, 8}, c + delta);
  const double expected = (2 * c * (c + delta) + c1) / (c * c + (c + delta) * (c + delta) + c1);
  CHECK(ssim(ca, cb) == doctest::Approx(expected).epsilon(1e-12));

  Tensor b = random_image(8, 8, rng);
  CHECK(std::abs(ssim(a, b) - ssim(b, a)) < 1e-12);
  CHECK(ssim(a, b) >= -1.0);
  CHECK(ssim(a, b) <= 1.0);

  CHECK_THROWS_AS(ssim(random_image(4, 4, rng), random_image(4, 4, rng), 8), std::invalid_argument);
}

TEST_CASE("metric implementations match brute-force references") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor a = random_image(8, 8, rng);
    Tensor b = random_image(8, 8, rng);
    // psnr from a direct double loop
    double sum = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      sum += (a.at(i) - b.at(i)) * (a.at(i) - b.at(i));
    }
    const double ref_psnr = 10.0 * std::log10(1.0 / (sum / 64.0));
    CHECK(std::abs(psnr(a, b) - ref_psnr) < 1e-10);
    CHECK(std::abs(ssim(a, b) - ssim_reference(a, b, 8, 1.0)) < 1e-10);
  }
}

TEST_CASE("sampled pairs are binary and reproducible") {
  ModelConfig arch;
  arch.height = 8;
  arch.width = 8;
  arch.widths = {4};
  arch.latent_dim = 4;
  Rng init(4);

  Checkpoint ckpt;
  ckpt.model_kind = "hvae";
  ckpt.config = {{"height", "8"},     {"width", "8"},      {"in_channels", "2"},
                 {"latent_dim", "4"}, {"widths", "4"},     {"group_size", "8"},
                 {"attn_tail", "2"},  {"attn_dim_divisor", "8"}};
  ckpt.params = init_generative_params(arch, init);

  Rng rng1(9), rng2(9);
  auto pairs = sample_pairs(ckpt, 5, 0.5, rng1);
  auto again = sample_pairs(ckpt, 5, 0.5, rng2);
  REQUIRE(pairs.size() == 5);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(pairs[i].image.shape() == Shape{1, 8, 8});
    for (std::size_t k = 0; k < pairs[i].mask.numel(); ++k) {
      const double v = pairs[i].mask.at(k);
      REQUIRE((v == 0.0 || v == 1.0));
      REQUIRE(pairs[i].image.at(k) >= 0.0);
      REQUIRE(pairs[i].image.at(k) <= 1.0);
      CHECK(pairs[i].image.at(k) == again[i].image.at(k));
    }
  }

  // sigmoid never reaches 1, so a threshold of 1 blanks every mask
  Rng rng3(9);
  auto blank = sample_pairs(ckpt, 3, 1.0, rng3);
  for (const auto& p : blank) {
    for (std::size_t k = 0; k < p.mask.numel(); ++k) CHECK(p.mask.at(k) == 0.0);
  }

  Checkpoint wrong = ckpt;
  wrong.model_kind = "unet";
  Rng rng4(9);
  CHECK_THROWS_AS(sample_pairs(wrong, 1, 0.5, rng4), DataError);
}

TEST_CASE("evaluate_generation on identical sets") {
  PhantomConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 31;
  std::vector<SamplePair> set;
  for (int i = 0; i < 6; ++i) set.push_back(generate_phantom(cfg, static_cast<std::uint64_t>(i)));

  Rng rng(1);
  MetricsReport report = evaluate_generation(set, set, 1, rng);
  CHECK(report.psnr_inf_pairs == 6);
  CHECK(report.ssim_mean == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(report.runs == 1);
  CHECK(report.psnr_std == 0.0);
}

TEST_CASE("evaluate_generation is invariant to reference order") {
  PhantomConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 77;
  std::vector<SamplePair> gen, ref;
  for (int i = 0; i < 8; ++i) gen.push_back(generate_phantom(cfg, static_cast<std::uint64_t>(i)));
  for (int i = 20; i < 30; ++i) ref.push_back(generate_phantom(cfg, static_cast<std::uint64_t>(i)));

  Rng rng_a(5);
  MetricsReport a = evaluate_generation(gen, ref, 2, rng_a);

  std::vector<SamplePair> shuffled(ref.rbegin(), ref.rend());
  std::swap(shuffled[0], shuffled[4]);
  Rng rng_b(5);
  MetricsReport b = evaluate_generation(gen, shuffled, 2, rng_b);
  CHECK(a.psnr_mean == b.psnr_mean);
  CHECK(a.ssim_mean == b.ssim_mean);
  CHECK(a.psnr_std == b.psnr_std);

  CHECK_THROWS_AS(evaluate_generation(gen, ref, 3, rng_b), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_generation({}, ref, 1, rng_b), std::invalid_argument);
}

TEST_CASE("tumor colocalization") {
  PhantomConfig cfg;
  cfg.seed = 15;
  std::vector<SamplePair> pairs;
  for (int i = 0; i < 200; ++i) pairs.push_back(generate_phantom(cfg, static_cast<std::uint64_t>(i)));
  auto frac = tumor_colocalization(pairs);
  REQUIRE(frac.has_value());
  CHECK(*frac >= 0.99);

  // Inverted intensities flip the sign.
  std::vector<SamplePair> inverted;
  for (const auto& p : pairs) {
    std::vector<double> v(p.image.numel());
    for (std::size_t k = 0; k < v.size(); ++k) v[k] = 1.0 - p.image.at(k);
    SamplePair q;
    q.image = Tensor(p.image.shape(), std::move(v));
    q.mask = p.mask;
    inverted.push_back(std::move(q));
  }
  auto inv_frac = tumor_colocalization(inverted);
  REQUIRE(inv_frac.has_value());
  CHECK(*inv_frac <= 0.01);

  std::vector<SamplePair> empty_masks;
  for (int i = 0; i < 3; ++i) {
    SamplePair p;
    p.image = Tensor::full({1, 8, 8}, 0.5);
    p.mask = Tensor::zeros({1, 8, 8});
    empty_masks.push_back(std::move(p));
  }
  CHECK_FALSE(tumor_colocalization(empty_masks).has_value());
}

TEST_CASE("metrics csv dump") {
  MetricsReport report;
  report.runs = 2;
  report.psnr_runs = {10.0, 12.0};
  report.ssim_runs = {0.5, 0.7};
  report.psnr_mean = 11.0;
  report.psnr_std = std::sqrt(2.0);
  report.ssim_mean = 0.6;
  report.ssim_std = std::sqrt(0.02);
  const auto path = std::filesystem::temp_directory_path() / "hvae_metrics_test.csv";
  write_metrics_csv(path, report);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "run,metric,value");
  std::filesystem::remove(path);
}
