#include "hvae/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "hvae/errors.hpp"
#include "hvae/metrics.hpp"

namespace hvae {

std::string to_string(ModelKind kind) { return kind == ModelKind::Vae ? "vae" : "hvae"; }

ModelKind model_kind_from(const std::string& name) {
  if (name == "vae") return ModelKind::Vae;
  if (name == "hvae") return ModelKind::Hvae;
  throw ConfigError("unknown model kind '" + name + "' (expected vae or hvae)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train config: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("train config: batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
  if (latent_dim < 1) throw ConfigError("train config: latent_dim must be at least 1");
  if (threads < 1) throw ConfigError("train config: threads must be at least 1");
  hmc.validate(latent_dim);
}

ElboConfig TrainConfig::elbo() const {
  ElboConfig cfg;
  cfg.sigma_x = sigma_x;
  cfg.lambda_mask = lambda_mask;
  cfg.logq_point = logq_point;
  cfg.logq_density = logq_density;
  return cfg;
}

void SegTrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("seg config: epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("seg config: batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("seg config: learning_rate must be positive");
  if (threads < 1) throw ConfigError("seg config: threads must be at least 1");
}

// ---- Adam ------------------------------------------------------------

AdamState AdamState::for_params(const ParamStore& params) {
  AdamState state;
  for (const auto& [name, t] : params.items()) {
    state.m.emplace_back(name, Tensor::zeros(t.shape()));
    state.v.emplace_back(name, Tensor::zeros(t.shape()));
  }
  return state;
}

void adam_step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads,
               AdamState& state, double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: gradient/state size mismatch");
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const auto& [name, g] = grads[i];
    const Tensor& p = params.items()[i].second;
    if (name != params.items()[i].first || !g.same_shape(p)) {
      throw std::invalid_argument("adam_step: gradient '" + name + "' misaligned with parameters");
    }
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient for '" + name + "'");
    std::vector<double> mv = state.m[i].second.values();
    std::vector<double> vv = state.v[i].second.values();
    std::vector<double> pv = p.values();
    for (std::size_t k = 0; k < pv.size(); ++k) {
      const double gk = g.at(k);
      mv[k] = cfg.beta1 * mv[k] + (1.0 - cfg.beta1) * gk;
      vv[k] = cfg.beta2 * vv[k] + (1.0 - cfg.beta2) * gk * gk;
      const double mhat = mv[k] / bc1;
      const double vhat = vv[k] / bc2;
      pv[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    state.m[i].second = Tensor(p.shape(), std::move(mv));
    state.v[i].second = Tensor(p.shape(), std::move(vv));
    params.set(name, Tensor(p.shape(), std::move(pv)));
  }
}

// ---- checkpoint io ------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const std::uint32_t n = get_u32(in);
  if (n > (1u << 24)) throw DataError("checkpoint: absurd string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  return s;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.write(reinterpret_cast<const char*>(t.values().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

Tensor get_tensor(std::istream& in) {
  const std::uint32_t rank = get_u32(in);
  if (rank > 8) throw DataError("checkpoint: absurd tensor rank");
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<int>(get_u32(in));
  std::vector<double> values(shape_numel(shape));
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

std::string Checkpoint::config_value(const std::string& key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return v;
  }
  throw DataError("checkpoint: missing config key '" + key + "'");
}

bool Checkpoint::has_config(const std::string& key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return true;
  }
  return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write("HVAE", 4);
  put_u32(out, kCheckpointVersion);
  put_string(out, checkpoint.model_kind);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.config.size()));
  for (const auto& [k, v] : checkpoint.config) {
    put_string(out, k);
    put_string(out, v);
  }
  put_u32(out, static_cast<std::uint32_t>(checkpoint.params.size()));
  for (const auto& [name, t] : checkpoint.params.items()) {
    put_string(out, name);
    put_tensor(out, t);
  }
  checkpoint.rng.save(out);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "HVAE", 4) != 0) {
    throw DataError(path.string() + ": not a checkpoint file");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": checkpoint version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.model_kind = get_string(in);
  const std::uint32_t n_config = get_u32(in);
  for (std::uint32_t i = 0; i < n_config; ++i) {
    std::string k = get_string(in);
    std::string v = get_string(in);
    ckpt.config.emplace_back(std::move(k), std::move(v));
  }
  const std::uint32_t n_params = get_u32(in);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = get_string(in);
    ckpt.params.add(std::move(name), get_tensor(in));
  }
  ckpt.rng.load(in);
  if (!in) throw DataError(path.string() + ": truncated checkpoint");
  return ckpt;
}

ModelConfig model_config_from(const Checkpoint& checkpoint) {
  ModelConfig cfg;
  cfg.height = std::stoi(checkpoint.config_value("height"));
  cfg.width = std::stoi(checkpoint.config_value("width"));
  cfg.in_channels = std::stoi(checkpoint.config_value("in_channels"));
  cfg.latent_dim = std::stoi(checkpoint.config_value("latent_dim"));
  cfg.group_size = std::stoi(checkpoint.config_value("group_size"));
  cfg.attn_tail = std::stoi(checkpoint.config_value("attn_tail"));
  cfg.attn_dim_divisor = std::stoi(checkpoint.config_value("attn_dim_divisor"));
  cfg.widths.clear();
  std::istringstream ws(checkpoint.config_value("widths"));
  std::string tok;
  while (std::getline(ws, tok, ',')) cfg.widths.push_back(std::stoi(tok));
  cfg.validate();
  return cfg;
}

// ---- shared loop helpers ---------------------------------------------------

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64_at(seed ^ (counter * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
}

// Fresh identity permutation every call, so one epoch's order is a pure
// function of the rng state (resume depends on this).
void shuffle_indices(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
}

struct SampleGrad {
  std::vector<std::pair<std::string, Tensor>> grads;
  ElboBreakdown breakdown;
};

// Evaluates per-sample losses (possibly across threads), then reduces
// gradients in slot order so the result is thread-count independent.
template <typename EvalFn>
std::pair<std::vector<std::pair<std::string, Tensor>>, ElboBreakdown> batch_gradients(
    std::size_t batch_size, int threads, const ParamStore& params, const EvalFn& eval) {
  std::vector<SampleGrad> slots(batch_size);
  if (threads <= 1 || batch_size <= 1) {
    for (std::size_t i = 0; i < batch_size; ++i) slots[i] = eval(i);
  } else {
    const int n_threads = std::min<int>(threads, static_cast<int>(batch_size));
    std::vector<std::thread> pool;
    std::exception_ptr error;
    std::mutex error_mutex;
    for (int t = 0; t < n_threads; ++t) {
      pool.emplace_back([&, t]() {
        try {
          for (std::size_t i = static_cast<std::size_t>(t); i < batch_size;
               i += static_cast<std::size_t>(n_threads)) {
            slots[i] = eval(i);
          }
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }

  const double inv = 1.0 / static_cast<double>(batch_size);
  std::vector<std::pair<std::string, Tensor>> total;
  total.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double> acc(params.items()[p].second.numel(), 0.0);
    for (std::size_t i = 0; i < batch_size; ++i) {
      const Tensor& g = slots[i].grads[p].second;
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g.at(k);
    }
    for (auto& v : acc) v *= inv;
    total.emplace_back(params.items()[p].first, Tensor(params.items()[p].second.shape(), std::move(acc)));
  }
  ElboBreakdown sum;
  for (const auto& slot : slots) {
    sum.recon_image += slot.breakdown.recon_image * inv;
    sum.recon_mask += slot.breakdown.recon_mask * inv;
    sum.kinetic += slot.breakdown.kinetic * inv;
    sum.initial_logq += slot.breakdown.initial_logq * inv;
    sum.prior_logp += slot.breakdown.prior_logp * inv;
    sum.total += slot.breakdown.total * inv;
  }
  return {std::move(total), sum};
}

void write_loss_header(std::ofstream& out) {
  out << "epoch,total,recon_image,recon_mask,kinetic,initial_logq,prior_logp\n";
}

std::vector<std::pair<std::string, std::string>> generative_config_echo(
    const TrainConfig& config, const ModelConfig& arch, int epoch, std::uint64_t sample_counter,
    std::int64_t adam_t) {
  std::ostringstream widths;
  for (std::size_t i = 0; i < arch.widths.size(); ++i) {
    if (i) widths << ",";
    widths << arch.widths[i];
  }
  std::vector<std::pair<std::string, std::string>> echo;
  echo.emplace_back("height", std::to_string(arch.height));
  echo.emplace_back("width", std::to_string(arch.width));
  echo.emplace_back("in_channels", std::to_string(arch.in_channels));
  echo.emplace_back("latent_dim", std::to_string(arch.latent_dim));
  echo.emplace_back("widths", widths.str());
  echo.emplace_back("group_size", std::to_string(arch.group_size));
  echo.emplace_back("attn_tail", std::to_string(arch.attn_tail));
  echo.emplace_back("attn_dim_divisor", std::to_string(arch.attn_dim_divisor));
  echo.emplace_back("epochs", std::to_string(config.epochs));
  echo.emplace_back("batch_size", std::to_string(config.batch_size));
  echo.emplace_back("learning_rate", std::to_string(config.learning_rate));
  echo.emplace_back("seed", std::to_string(config.seed));
  echo.emplace_back("lambda_mask", std::to_string(config.lambda_mask));
  echo.emplace_back("sigma_x", std::to_string(config.sigma_x));
  echo.emplace_back("hmc_steps", std::to_string(config.hmc.steps));
  echo.emplace_back("hmc_eps", std::to_string(config.hmc.eps));
  echo.emplace_back("hmc_mh", config.hmc.mh_enabled ? "1" : "0");
  echo.emplace_back("hmc_include_initial_kinetic", config.hmc.include_initial_kinetic ? "1" : "0");
  echo.emplace_back("logq_point", config.logq_point == LogqPoint::InitialZ0 ? "z0" : "zk");
  echo.emplace_back("logq_density",
                    config.logq_density == LogqDensity::Encoder ? "encoder" : "standard_normal");
  echo.emplace_back("epoch", std::to_string(epoch));
  echo.emplace_back("sample_counter", std::to_string(sample_counter));
  echo.emplace_back("adam_t", std::to_string(adam_t));
  return echo;
}

Checkpoint make_checkpoint(const std::string& kind,
                           std::vector<std::pair<std::string, std::string>> echo,
                           const ParamStore& params, const AdamState& adam, const Rng& rng) {
  Checkpoint ckpt;
  ckpt.model_kind = kind;
  ckpt.config = std::move(echo);
  for (const auto& [name, t] : params.items()) ckpt.params.add(name, t);
  for (const auto& [name, t] : adam.m) ckpt.params.add("opt.m." + name, t);
  for (const auto& [name, t] : adam.v) ckpt.params.add("opt.v." + name, t);
  ckpt.rng = rng;
  return ckpt;
}

void split_checkpoint_params(const Checkpoint& ckpt, ParamStore& params, AdamState& adam) {
  for (const auto& [name, t] : ckpt.params.items()) {
    if (name.rfind("opt.m.", 0) == 0) {
      adam.m.emplace_back(name.substr(6), t);
    } else if (name.rfind("opt.v.", 0) == 0) {
      adam.v.emplace_back(name.substr(6), t);
    } else {
      params.add(name, t);
    }
  }
  adam.t = std::stoll(ckpt.config_value("adam_t"));
}

}  // namespace

// ---- generative training --------------------------------------------------

TrainResult train_generative(const std::vector<SamplePair>& dataset, const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume_from) {
  config.validate();
  if (dataset.empty()) throw DataError("train_generative: dataset is empty");
  const Shape data_shape = dataset.front().image.shape();
  for (const auto& pair : dataset) {
    if (pair.image.shape() != data_shape || pair.mask.shape() != data_shape) {
      throw DataError("train_generative: dataset shapes are not uniform");
    }
  }

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  ModelConfig arch = ModelConfig::for_image(data_shape[1], data_shape[2], config.latent_dim);
  ParamStore params;
  AdamState adam;
  Rng loop_rng(config.seed);
  std::uint64_t sample_counter = 0;
  int start_epoch = 1;

  if (resume_from) {
    Checkpoint prev = load_checkpoint(*resume_from);
    if (prev.model_kind != to_string(config.model_kind)) {
      throw DataError("resume checkpoint holds a '" + prev.model_kind + "' model");
    }
    arch = model_config_from(prev);
    split_checkpoint_params(prev, params, adam);
    loop_rng = prev.rng;
    sample_counter = std::stoull(prev.config_value("sample_counter"));
    start_epoch = std::stoi(prev.config_value("epoch")) + 1;
  } else {
    Rng init_rng(stream_seed(config.seed, 0xA11C));
    params = init_generative_params(arch, init_rng);
    adam = AdamState::for_params(params);
  }

  const ElboConfig elbo_cfg = config.elbo();
  const std::filesystem::path csv_path = out_dir / "loss.csv";
  std::ofstream csv(csv_path, resume_from ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot open " + csv_path.string() + " for writing");
  if (!resume_from) write_loss_header(csv);
  csv.precision(17);

  const double pixels = static_cast<double>(data_shape[1]) * data_shape[2];
  TrainResult result;

  StrictFiniteGuard relaxed(false);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = start_epoch; epoch <= config.epochs; ++epoch) {
    shuffle_indices(order, loop_rng);
    ElboBreakdown epoch_mean;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const std::size_t bsz = end - begin;
      const std::uint64_t batch_base = sample_counter;

      auto eval = [&](std::size_t slot) {
        SampleGrad out;
        Rng rng(stream_seed(config.seed, batch_base + slot));
        Tape tape;
        TapeScope scope(tape);
        ParamStore watched = params.watched(tape);
        const std::vector<SamplePair> one{dataset[order[begin + slot]]};
        LossResult loss = config.model_kind == ModelKind::Vae
                              ? vae_loss(arch, watched, one, elbo_cfg, rng)
                              : hvae_loss_joint(arch, watched, one, elbo_cfg, config.hmc, rng);
        out.breakdown = loss.breakdown;
        out.grads = grads_by_name(watched, tape.backward(loss.total));
        return out;
      };

      std::pair<std::vector<std::pair<std::string, Tensor>>, ElboBreakdown> reduced;
      try {
        reduced = batch_gradients(bsz, config.threads, params, eval);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(begin / static_cast<std::size_t>(config.batch_size)) +
                           ": " + e.what());
      }
      sample_counter += bsz;
      adam_step(params, reduced.first, adam, config.learning_rate);

      const double w = static_cast<double>(bsz);
      epoch_mean.recon_image += reduced.second.recon_image * w;
      epoch_mean.recon_mask += reduced.second.recon_mask * w;
      epoch_mean.kinetic += reduced.second.kinetic * w;
      epoch_mean.initial_logq += reduced.second.initial_logq * w;
      epoch_mean.prior_logp += reduced.second.prior_logp * w;
      epoch_mean.total += reduced.second.total * w;
      seen += bsz;
    }
    const double inv = 1.0 / static_cast<double>(seen);
    epoch_mean.recon_image *= inv;
    epoch_mean.recon_mask *= inv;
    epoch_mean.kinetic *= inv;
    epoch_mean.initial_logq *= inv;
    epoch_mean.prior_logp *= inv;
    epoch_mean.total *= inv;

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean = epoch_mean;
    // recon_image is the negated Gaussian log-likelihood; invert it to
    // a mean per-pixel squared error for reporting.
    const double sse = (epoch_mean.recon_image -
                        0.5 * pixels * std::log(2.0 * 3.14159265358979323846 * config.sigma_x *
                                                config.sigma_x)) *
                       2.0 * config.sigma_x * config.sigma_x;
    stats.image_mse = sse / pixels;
    result.curve.push_back(stats);

    csv << epoch << "," << epoch_mean.total << "," << epoch_mean.recon_image << ","
        << epoch_mean.recon_mask << "," << epoch_mean.kinetic << "," << epoch_mean.initial_logq
        << "," << epoch_mean.prior_logp << "\n";
    csv.flush();

    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 &&
        epoch != config.epochs) {
      Checkpoint snap = make_checkpoint(
          to_string(config.model_kind),
          generative_config_echo(config, arch, epoch, sample_counter, adam.t), params, adam,
          loop_rng);
      save_checkpoint(out_dir / ("checkpoint_epoch_" + std::to_string(epoch) + ".hvae"), snap);
    }
  }

  result.checkpoint = make_checkpoint(
      to_string(config.model_kind),
      generative_config_echo(config, arch, config.epochs, sample_counter, adam.t), params, adam,
      loop_rng);
  result.checkpoint_path = out_dir / "checkpoint.hvae";
  result.loss_csv_path = csv_path;
  save_checkpoint(result.checkpoint_path, result.checkpoint);
  return result;
}

// ---- segmenter training ------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> seg_config_echo(const SegTrainConfig& config,
                                                                 int height, int width, int epoch,
                                                                 std::uint64_t sample_counter,
                                                                 std::int64_t adam_t) {
  std::vector<std::pair<std::string, std::string>> echo;
  echo.emplace_back("height", std::to_string(height));
  echo.emplace_back("width", std::to_string(width));
  echo.emplace_back("unet_depth", std::to_string(config.unet.depth));
  echo.emplace_back("unet_base_width", std::to_string(config.unet.base_width));
  echo.emplace_back("unet_group_size", std::to_string(config.unet.group_size));
  echo.emplace_back("epochs", std::to_string(config.epochs));
  echo.emplace_back("batch_size", std::to_string(config.batch_size));
  echo.emplace_back("learning_rate", std::to_string(config.learning_rate));
  echo.emplace_back("seed", std::to_string(config.seed));
  echo.emplace_back("epoch", std::to_string(epoch));
  echo.emplace_back("sample_counter", std::to_string(sample_counter));
  echo.emplace_back("adam_t", std::to_string(adam_t));
  return echo;
}

Tensor hard_mask_from_logits(const Tensor& logits) {
  std::vector<double> m(logits.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits.at(i) > 0.0 ? 1.0 : 0.0;
  return Tensor(logits.shape(), std::move(m));
}

}  // namespace

SegTrainResult train_segmenter(const std::vector<SamplePair>& real,
                               const std::vector<SamplePair>& synthetic,
                               const std::vector<SamplePair>& heldout,
                               const SegTrainConfig& config,
                               const std::filesystem::path& out_dir) {
  config.validate();
  if (real.empty()) throw DataError("train_segmenter: at least one real sample is required");

  std::vector<SamplePair> training = real;
  training.insert(training.end(), synthetic.begin(), synthetic.end());
  const Shape data_shape = training.front().image.shape();
  for (const auto& pair : training) {
    if (pair.image.shape() != data_shape || pair.mask.shape() != data_shape) {
      throw DataError("train_segmenter: dataset shapes are not uniform");
    }
  }
  config.unet.validate(data_shape[1], data_shape[2]);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Rng init_rng(stream_seed(config.seed, 0x5E6));
  ParamStore params = init_unet_params(config.unet, init_rng);
  AdamState adam = AdamState::for_params(params);
  Rng loop_rng(config.seed);
  std::uint64_t sample_counter = 0;

  const std::filesystem::path csv_path = out_dir / "dsc.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot open " + csv_path.string() + " for writing");
  csv << "epoch,dsc\n";
  csv.precision(17);

  SegTrainResult result;
  StrictFiniteGuard relaxed(false);
  const double pixels = static_cast<double>(data_shape[1]) * data_shape[2];

  std::vector<std::size_t> order(training.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle_indices(order, loop_rng);
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      const std::size_t bsz = end - begin;
      const std::uint64_t batch_base = sample_counter;
      auto eval = [&](std::size_t slot) {
        (void)batch_base;
        SampleGrad out;
        Tape tape;
        TapeScope scope(tape);
        ParamStore watched = params.watched(tape);
        const SamplePair& sample = training[order[begin + slot]];
        Tensor logits = unet_forward(config.unet, watched, sample.image);
        Tensor loss = mul(bernoulli_mask_loglik(sample.mask, logits), -1.0 / pixels);
        out.breakdown.recon_mask = loss.value();
        out.breakdown.total = out.breakdown.recon_mask;
        if (!std::isfinite(out.breakdown.total)) {
          throw NumericError("train_segmenter: non-finite loss");
        }
        out.grads = grads_by_name(watched, tape.backward(loss));
        return out;
      };
      std::pair<std::vector<std::pair<std::string, Tensor>>, ElboBreakdown> reduced;
      try {
        reduced = batch_gradients(bsz, config.threads, params, eval);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + std::string(e.what()));
      }
      sample_counter += bsz;
      adam_step(params, reduced.first, adam, config.learning_rate);
    }

    double dsc_sum = 0.0;
    for (const auto& pair : heldout) {
      Tensor logits = unet_forward(config.unet, params, pair.image);
      dsc_sum += dice(hard_mask_from_logits(logits), pair.mask);
    }
    const double dsc = heldout.empty() ? 0.0 : dsc_sum / static_cast<double>(heldout.size());
    result.heldout_dsc.push_back(dsc);
    csv << epoch << "," << dsc << "\n";
    csv.flush();
  }

  result.checkpoint = make_checkpoint(
      "unet",
      seg_config_echo(config, data_shape[1], data_shape[2], config.epochs, sample_counter, adam.t),
      params, adam, loop_rng);
  result.checkpoint_path = out_dir / "unet.hvae";
  result.dsc_csv_path = csv_path;
  save_checkpoint(result.checkpoint_path, result.checkpoint);
  return result;
}

}  // namespace hvae
