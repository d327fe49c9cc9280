#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hvae/errors.hpp"
#include "hvae/phantom.hpp"
#include "hvae/train.hpp"

using namespace hvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("hvae_train_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<SamplePair> phantom_set(int n, int size, std::uint64_t seed) {
  PhantomConfig cfg;
  cfg.height = size;
  cfg.width = size;
  cfg.seed = seed;
  std::vector<SamplePair> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_phantom(cfg, static_cast<std::uint64_t>(i)));
  return out;
}

bool params_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.items()[i].first != b.items()[i].first) return false;
    const Tensor& ta = a.items()[i].second;
    const Tensor& tb = b.items()[i].second;
    if (!ta.same_shape(tb)) return false;
    for (std::size_t k = 0; k < ta.numel(); ++k) {
      if (ta.at(k) != tb.at(k)) return false;
    }
  }
  return true;
}

TrainConfig small_vae_config() {
  TrainConfig cfg;
  cfg.model_kind = ModelKind::Vae;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  cfg.latent_dim = 4;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters untouched") {
  ParamStore params;
  params.add("p", Tensor({3}, {1.0, -2.0, 0.5}));
  AdamState state = AdamState::for_params(params);
  adam_step(params, {{"p", Tensor::zeros({3})}}, state, 0.1);
  CHECK(state.t == 1);
  CHECK(params.at("p").at(0) == 1.0);
  CHECK(params.at("p").at(1) == -2.0);
  CHECK(params.at("p").at(2) == 0.5);
}

TEST_CASE("adam: bias-corrected first step") {
  ParamStore params;
  params.add("p", Tensor({1}, {0.0}));
  AdamState state = AdamState::for_params(params);
  adam_step(params, {{"p", Tensor({1}, {1.0})}}, state, 0.1);
  CHECK(params.at("p").at(0) == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam: repeated identical gradients keep direction, shrink slightly") {
  ParamStore params;
  params.add("p", Tensor({1}, {0.0}));
  AdamState state = AdamState::for_params(params);
  adam_step(params, {{"p", Tensor({1}, {0.5})}}, state, 0.05);
  const double first = params.at("p").at(0);
  adam_step(params, {{"p", Tensor({1}, {0.5})}}, state, 0.05);
  const double second = params.at("p").at(0) - first;
  CHECK(first < 0.0);
  CHECK(second < 0.0);
  CHECK(std::abs(second) < std::abs(first) * 1.01);
}

TEST_CASE("adam matches a hand-rolled reference") {
  Rng rng(3);
  std::vector<double> p0(8), g1(8), g2(8);
  for (auto& v : p0) v = rng.uniform(-1.0, 1.0);
  for (auto& v : g1) v = rng.uniform(-1.0, 1.0);
  for (auto& v : g2) v = rng.uniform(-1.0, 1.0);

  ParamStore params;
  params.add("p", Tensor({8}, p0));
  AdamState state = AdamState::for_params(params);
  adam_step(params, {{"p", Tensor({8}, g1)}}, state, 0.01);
  adam_step(params, {{"p", Tensor({8}, g2)}}, state, 0.01);

  // Direct two-step recurrence.
  std::vector<double> p = p0, m(8, 0.0), v(8, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.01;
  for (int step = 1; step <= 2; ++step) {
    const auto& g = step == 1 ? g1 : g2;
    for (int k = 0; k < 8; ++k) {
      m[static_cast<std::size_t>(k)] = b1 * m[static_cast<std::size_t>(k)] + (1 - b1) * g[static_cast<std::size_t>(k)];
      v[static_cast<std::size_t>(k)] = b2 * v[static_cast<std::size_t>(k)] + (1 - b2) * g[static_cast<std::size_t>(k)] * g[static_cast<std::size_t>(k)];
      const double mhat = m[static_cast<std::size_t>(k)] / (1 - std::pow(b1, step));
      const double vhat = v[static_cast<std::size_t>(k)] / (1 - std::pow(b2, step));
      p[static_cast<std::size_t>(k)] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  for (int k = 0; k < 8; ++k) {
    CHECK(std::abs(params.at("p").at(static_cast<std::size_t>(k)) - p[static_cast<std::size_t>(k)]) < 1e-12);
  }
}

TEST_CASE("adam rejects non-finite gradients and misalignment") {
  ParamStore params;
  params.add("p", Tensor({2}, {0.0, 0.0}));
  AdamState state = AdamState::for_params(params);
  StrictFiniteGuard off(false);
  CHECK_THROWS_AS(adam_step(params, {{"p", Tensor({2}, {1.0, std::nan("")})}}, state, 0.1),
                  NumericError);
  CHECK_THROWS_AS(adam_step(params, {}, state, 0.1), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir("ckpt");
  Checkpoint ckpt;
  ckpt.model_kind = "vae";
  ckpt.config = {{"height", "8"}, {"note", "x"}};
  Rng rng(9);
  std::vector<double> v(37);
  for (auto& x : v) x = rng.uniform(-5.0, 5.0);
  ckpt.params.add("w", Tensor({37}, v));
  ckpt.params.add("b", Tensor({2, 3}, {1, 2, 3, 4, 5, -0.0}));
  ckpt.rng = rng;

  save_checkpoint(dir.path / "c.hvae", ckpt);
  Checkpoint back = load_checkpoint(dir.path / "c.hvae");
  CHECK(back.model_kind == "vae");
  CHECK(back.config_value("note") == "x");
  CHECK(params_equal(back.params, ckpt.params));
  CHECK(back.rng == ckpt.rng);
}

TEST_CASE("checkpoint version mismatch refuses to load") {
  TempDir dir("ver");
  Checkpoint ckpt;
  ckpt.model_kind = "vae";
  ckpt.params.add("w", Tensor({1}, {1.0}));
  save_checkpoint(dir.path / "c.hvae", ckpt);

  std::fstream f(dir.path / "c.hvae", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(4);
  const char bumped = 99;
  f.write(&bumped, 1);
  f.close();
  CHECK_THROWS_AS(load_checkpoint(dir.path / "c.hvae"), DataError);
}

TEST_CASE("generative training is deterministic and persists its curve") {
  TempDir dir("det");
  auto data = phantom_set(8, 8, 55);
  TrainConfig cfg = small_vae_config();

  TrainResult a = train_generative(data, cfg, dir.path / "a");
  TrainResult b = train_generative(data, cfg, dir.path / "b");
  CHECK(params_equal(a.checkpoint.params, b.checkpoint.params));
  REQUIRE(a.curve.size() == 4);
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].mean.total == b.curve[i].mean.total);
  }

  std::ifstream csv(a.loss_csv_path);
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,total,recon_image,recon_mask,kinetic,initial_logq,prior_logp");
  int rows = 0;
  std::string line;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);
}

TEST_CASE("training across threads matches single-threaded results") {
  TempDir dir("thr");
  auto data = phantom_set(6, 8, 77);
  TrainConfig cfg = small_vae_config();
  cfg.epochs = 2;
  TrainResult single = train_generative(data, cfg, dir.path / "one");
  cfg.threads = 2;
  TrainResult dual = train_generative(data, cfg, dir.path / "two");
  CHECK(params_equal(single.checkpoint.params, dual.checkpoint.params));
}

TEST_CASE("vae loss decreases over 100 optimizer steps on 4 phantoms") {
  TempDir dir("vae100");
  auto data = phantom_set(4, 8, 11);
  TrainConfig cfg = small_vae_config();
  cfg.epochs = 100;  // one batch per epoch = one step per epoch
  TrainResult r = train_generative(data, cfg, dir.path);
  CHECK(r.curve.back().mean.total < r.curve.front().mean.total);
}

TEST_CASE("hvae smoke training runs and improves") {
  TempDir dir("hvae");
  auto data = phantom_set(6, 8, 33);
  TrainConfig cfg;
  cfg.model_kind = ModelKind::Hvae;
  cfg.epochs = 20;
  cfg.batch_size = 6;
  cfg.latent_dim = 4;
  cfg.hmc.steps = 2;
  cfg.hmc.eps = 0.05;
  cfg.seed = 5;
  TrainResult r = train_generative(data, cfg, dir.path);
  CHECK(r.curve.back().mean.total < r.curve.front().mean.total);
  CHECK(r.curve.back().image_mse < r.curve.front().image_mse);
}

TEST_CASE("resumed training continues the exact same trajectory") {
  TempDir dir("resume");
  auto data = phantom_set(6, 8, 21);
  TrainConfig cfg = small_vae_config();
  cfg.epochs = 6;
  TrainResult full = train_generative(data, cfg, dir.path / "full");

  cfg.epochs = 3;
  TrainResult half = train_generative(data, cfg, dir.path / "half");
  cfg.epochs = 6;
  TrainResult resumed =
      train_generative(data, cfg, dir.path / "resumed", half.checkpoint_path);
  CHECK(params_equal(full.checkpoint.params, resumed.checkpoint.params));
  REQUIRE(resumed.curve.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(resumed.curve[i].mean.total == full.curve[i + 3].mean.total);
  }
}

TEST_CASE("invalid configs are rejected") {
  auto data = phantom_set(2, 8, 1);
  TrainConfig cfg = small_vae_config();
  cfg.epochs = 0;
  TempDir dir("bad");
  CHECK_THROWS_AS(train_generative(data, cfg, dir.path), ConfigError);
  cfg = small_vae_config();
  CHECK_THROWS_AS(train_generative({}, cfg, dir.path), DataError);
}

TEST_CASE("segmenter training: determinism, reference arm, improvement") {
  TempDir dir("seg");
  auto real = phantom_set(12, 16, 101);
  auto heldout = phantom_set(6, 16, 202);
  SegTrainConfig cfg;
  cfg.unet.depth = 2;
  cfg.unet.base_width = 4;
  cfg.epochs = 8;
  cfg.batch_size = 6;
  cfg.seed = 13;

  SegTrainResult a = train_segmenter(real, {}, heldout, cfg, dir.path / "a");
  SegTrainResult b = train_segmenter(real, {}, heldout, cfg, dir.path / "b");
  REQUIRE(a.heldout_dsc.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(a.heldout_dsc[i] == b.heldout_dsc[i]);
  CHECK(a.heldout_dsc.back() > 0.2);

  // The augmented arm consumes synthetic pairs through the same path.
  auto synthetic = phantom_set(12, 16, 303);
  SegTrainResult c = train_segmenter(real, synthetic, heldout, cfg, dir.path / "c");
  CHECK(c.heldout_dsc.back() > 0.0);

  CHECK_THROWS_AS(train_segmenter({}, synthetic, heldout, cfg, dir.path / "d"), DataError);

  Checkpoint back = load_checkpoint(a.checkpoint_path);
  CHECK(back.model_kind == "unet");
}
