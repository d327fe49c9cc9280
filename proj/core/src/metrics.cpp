#include "hvae/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "hvae/errors.hpp"
#include "hvae/nn.hpp"

namespace hvae {

namespace {

void require_binary_mask(const Tensor& m, const char* name) {
  for (std::size_t i = 0; i < m.numel(); ++i) {
    const double v = m.at(i);
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument(std::string(name) + ": mask contains non-binary value " +
                                  std::to_string(v));
    }
  }
}

double mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.at(i) - b.at(i);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  sd = 0.0;
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - mean) * (x - mean);
    sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
}

}  // namespace

double dice(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("dice: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  require_binary_mask(a, "dice");
  require_binary_mask(b, "dice");
  std::size_t na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const bool ia = a.at(i) != 0.0;
    const bool ib = b.at(i) != 0.0;
    na += ia;
    nb += ib;
    ni += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

double psnr(const Tensor& a, const Tensor& b, double max_val) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("psnr: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  if (!(max_val > 0.0)) throw std::invalid_argument("psnr: max_val must be positive");
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / m);
}

double ssim(const Tensor& a, const Tensor& b, int window, double max_val) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("ssim: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  int h = 0, w = 0;
  if (a.rank() == 2) {
    h = a.shape()[0];
    w = a.shape()[1];
  } else if (a.rank() == 3 && a.shape()[0] == 1) {
    h = a.shape()[1];
    w = a.shape()[2];
  } else {
    throw std::invalid_argument("ssim: image must be [H,W] or [1,H,W], got " +
                                shape_str(a.shape()));
  }
  if (window < 1 || h < window || w < window) {
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than window " + std::to_string(window));
  }
  const double c1 = 0.01 * max_val * 0.01 * max_val;
  const double c2 = 0.03 * max_val * 0.03 * max_val;
  const int wy = h / window, wx = w / window;
  const double n = static_cast<double>(window) * window;
  double total = 0.0;
  for (int by = 0; by < wy; ++by) {
    for (int bx = 0; bx < wx; ++bx) {
      double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
      for (int y = by * window; y < (by + 1) * window; ++y) {
        for (int x = bx * window; x < (bx + 1) * window; ++x) {
          const double va = a.at(static_cast<std::size_t>(y) * w + x);
          const double vb = b.at(static_cast<std::size_t>(y) * w + x);
          sa += va;
          sb += vb;
          saa += va * va;
          sbb += vb * vb;
          sab += va * vb;
        }
      }
      const double ma = sa / n, mb = sb / n;
      const double va = saa / n - ma * ma;
      const double vb = sbb / n - mb * mb;
      const double cov = sab / n - ma * mb;
      total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / static_cast<double>(wy * wx);
}

std::vector<SamplePair> sample_pairs(const Checkpoint& checkpoint, int n, double threshold,
                                     Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample_pairs: n must be at least 1");
  if (checkpoint.model_kind != "vae" && checkpoint.model_kind != "hvae") {
    throw DataError("sample_pairs: checkpoint holds a '" + checkpoint.model_kind +
                    "' model, not a generative one");
  }
  const ModelConfig cfg = model_config_from(checkpoint);
  std::vector<SamplePair> out;
  out.reserve(static_cast<std::size_t>(n));
  NoGradGuard value_only;
  for (int i = 0; i < n; ++i) {
    std::vector<double> zv(static_cast<std::size_t>(cfg.latent_dim));
    for (auto& v : zv) v = rng.normal();
    DecoderOutput dec = decoder_forward(cfg, checkpoint.params, Tensor({cfg.latent_dim}, std::move(zv)));
    std::vector<double> img(dec.image_mean.numel());
    std::vector<double> mask(dec.mask_logits.numel());
    for (std::size_t k = 0; k < img.size(); ++k) {
      img[k] = std::clamp(dec.image_mean.at(k), 0.0, 1.0);
      const double p = 1.0 / (1.0 + std::exp(-dec.mask_logits.at(k)));
      mask[k] = p > threshold ? 1.0 : 0.0;
    }
    SamplePair pair;
    pair.image = Tensor(dec.image_mean.shape(), std::move(img));
    pair.mask = Tensor(dec.mask_logits.shape(), std::move(mask));
    out.push_back(std::move(pair));
  }
  return out;
}

MetricsReport evaluate_generation(const std::vector<SamplePair>& generated,
                                  const std::vector<SamplePair>& reference, int runs, Rng& rng) {
  if (generated.empty() || reference.empty()) {
    throw std::invalid_argument("evaluate_generation: inputs must be non-empty");
  }
  if (runs < 1) throw std::invalid_argument("evaluate_generation: runs must be at least 1");
  if (generated.size() % static_cast<std::size_t>(runs) != 0) {
    throw std::invalid_argument("evaluate_generation: generated count " +
                                std::to_string(generated.size()) + " not divisible into " +
                                std::to_string(runs) + " runs");
  }

  std::vector<std::size_t> order(generated.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }

  MetricsReport report;
  report.runs = runs;
  report.samples = static_cast<int>(generated.size());
  const std::size_t chunk = generated.size() / static_cast<std::size_t>(runs);
  for (int r = 0; r < runs; ++r) {
    double psnr_acc = 0.0, ssim_acc = 0.0;
    int psnr_n = 0;
    for (std::size_t k = 0; k < chunk; ++k) {
      const SamplePair& gen = generated[order[static_cast<std::size_t>(r) * chunk + k]];
      // Minimum-MSE match against the full reference set.
      std::size_t best = 0;
      double best_mse = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < reference.size(); ++j) {
        const double m = mse(gen.image, reference[j].image);
        if (m < best_mse) {
          best_mse = m;
          best = j;
        }
      }
      const double p = psnr(gen.image, reference[best].image);
      if (std::isinf(p)) {
        ++report.psnr_inf_pairs;
      } else {
        psnr_acc += p;
        ++psnr_n;
      }
      ssim_acc += ssim(gen.image, reference[best].image);
    }
    report.psnr_runs.push_back(psnr_n > 0 ? psnr_acc / psnr_n
                                          : std::numeric_limits<double>::infinity());
    report.ssim_runs.push_back(ssim_acc / static_cast<double>(chunk));
  }
  mean_std(report.psnr_runs, report.psnr_mean, report.psnr_std);
  mean_std(report.ssim_runs, report.ssim_mean, report.ssim_std);
  return report;
}

std::optional<double> tumor_colocalization(const std::vector<SamplePair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("tumor_colocalization: no samples");
  std::size_t eligible = 0, hits = 0;
  for (const auto& pair : pairs) {
    double in_sum = 0.0, out_sum = 0.0;
    std::size_t in_n = 0, out_n = 0;
    for (std::size_t i = 0; i < pair.mask.numel(); ++i) {
      if (pair.mask.at(i) != 0.0) {
        in_sum += pair.image.at(i);
        ++in_n;
      } else {
        out_sum += pair.image.at(i);
        ++out_n;
      }
    }
    if (in_n == 0 || out_n == 0) continue;
    ++eligible;
    if (in_sum / static_cast<double>(in_n) > out_sum / static_cast<double>(out_n)) ++hits;
  }
  if (eligible == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "run,metric,value\n";
  for (int r = 0; r < report.runs; ++r) {
    out << r << ",psnr," << report.psnr_runs[static_cast<std::size_t>(r)] << "\n";
    out << r << ",ssim," << report.ssim_runs[static_cast<std::size_t>(r)] << "\n";
  }
  out << "aggregate,psnr_mean," << report.psnr_mean << "\n";
  out << "aggregate,psnr_std," << report.psnr_std << "\n";
  out << "aggregate,ssim_mean," << report.ssim_mean << "\n";
  out << "aggregate,ssim_std," << report.ssim_std << "\n";
  out << "aggregate,psnr_inf_pairs," << report.psnr_inf_pairs << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace hvae
