#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hvae/elbo.hpp"
#include "hvae/nn.hpp"
#include "hvae/phantom.hpp"
#include "hvae/rng.hpp"

namespace hvae {

enum class ModelKind { Vae, Hvae };
std::string to_string(ModelKind kind);
ModelKind model_kind_from(const std::string& name);

struct TrainConfig {
  ModelKind model_kind = ModelKind::Hvae;
  int epochs = 300;
  int batch_size = 32;
  double learning_rate = 1e-3;
  int latent_dim = 32;
  HmcConfig hmc;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between snapshots; 0 keeps only the final one
  double lambda_mask = 1.0;
  double sigma_x = 1.0;
  LogqPoint logq_point = LogqPoint::InitialZ0;
  LogqDensity logq_density = LogqDensity::Encoder;
  int threads = 1;

  void validate() const;
  ElboConfig elbo() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::pair<std::string, Tensor>> m;
  std::vector<std::pair<std::string, Tensor>> v;
  std::int64_t t = 0;

  static AdamState for_params(const ParamStore& params);
};

// Bias-corrected update; grads must be aligned with the store order.
void adam_step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads,
               AdamState& state, double lr, const AdamConfig& cfg = {});

// Binary container: magic "HVAE", u32 version, model kind, key=value
// config echo, named tensors in store order, rng state. Optimizer
// moments ride along under the reserved "opt." name prefix so resumed
// runs continue without a transient.
struct Checkpoint {
  std::string model_kind;
  std::vector<std::pair<std::string, std::string>> config;
  ParamStore params;
  Rng rng;

  std::string config_value(const std::string& key) const;
  bool has_config(const std::string& key) const;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reconstructs the architecture a generative checkpoint was trained
// with (height/width/widths/latent_dim echo keys).
ModelConfig model_config_from(const Checkpoint& checkpoint);

struct EpochStats {
  int epoch = 0;
  ElboBreakdown mean;
  double image_mse = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::filesystem::path checkpoint_path;
  std::filesystem::path loss_csv_path;
  std::vector<EpochStats> curve;
};

// Trains a generative model on image+mask pairs. Writes
// checkpoint.hvae and loss.csv (epoch,total,recon_image,recon_mask,
// kinetic,initial_logq,prior_logp) under out_dir. Pass `resume_from`
// to continue a previous run's curve.
TrainResult train_generative(const std::vector<SamplePair>& dataset, const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume_from = {});

struct SegTrainConfig {
  UnetConfig unet;
  int epochs = 80;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct SegTrainResult {
  Checkpoint checkpoint;
  std::filesystem::path checkpoint_path;
  std::filesystem::path dsc_csv_path;
  std::vector<double> heldout_dsc;  // one entry per epoch
};

// Pixel cross-entropy training of the U-Net on real plus synthetic
// pairs; per-epoch Dice on the held-out set lands in dsc.csv.
SegTrainResult train_segmenter(const std::vector<SamplePair>& real,
                               const std::vector<SamplePair>& synthetic,
                               const std::vector<SamplePair>& heldout,
                               const SegTrainConfig& config,
                               const std::filesystem::path& out_dir);

}  // namespace hvae
