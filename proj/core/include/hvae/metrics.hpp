#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "hvae/phantom.hpp"
#include "hvae/rng.hpp"
#include "hvae/train.hpp"

namespace hvae {

struct MetricsReport {
  std::vector<double> psnr_runs;  // per-run means over finite pairs
  std::vector<double> ssim_runs;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  int runs = 0;
  int samples = 0;
  int psnr_inf_pairs = 0;  // exact matches (zero MSE)
};

// 2|a n b| / (|a| + |b|); 1.0 when both masks are empty.
double dice(const Tensor& a, const Tensor& b);

// 10 log10(max^2 / MSE); +infinity on exact match.
double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

// Non-overlapping uniform windows, population statistics,
// C1 = (0.01 max)^2, C2 = (0.03 max)^2.
double ssim(const Tensor& a, const Tensor& b, int window = 8, double max_val = 1.0);

// Decode n pairs from z ~ N(0, I): image clamped to [0,1], mask
// thresholded at sigmoid(logits) > threshold.
std::vector<SamplePair> sample_pairs(const Checkpoint& checkpoint, int n, double threshold,
                                     Rng& rng);

// Shuffles `generated`, splits it into `runs` equal chunks, matches
// each generated image to its minimum-MSE reference and averages
// PSNR/SSIM per chunk; mean and unbiased std across chunks.
MetricsReport evaluate_generation(const std::vector<SamplePair>& generated,
                                  const std::vector<SamplePair>& reference, int runs, Rng& rng);

// Fraction of samples with a non-empty mask whose inside-mask mean
// intensity exceeds the outside mean. Empty when nothing is eligible.
std::optional<double> tumor_colocalization(const std::vector<SamplePair>& pairs);

// CSV rows run,metric,value plus aggregate mean/std rows.
void write_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace hvae
