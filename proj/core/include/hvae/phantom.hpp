#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hvae/tensor.hpp"

namespace hvae {

// Procedural tumor phantom: smooth correlated background in [0.2, 0.6],
// one or more bright ellipses, pixel noise, exact binary mask.
struct PhantomConfig {
  int height = 32;
  int width = 32;
  int tumor_count_min = 1;
  int tumor_count_max = 2;
  double tumor_radius_min = 0.08;  // fraction of min extent
  double tumor_radius_max = 0.25;
  double tumor_contrast = 0.35;
  double background_smoothness = 2.0;  // box blur radius in pixels
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SamplePair {
  Tensor image;  // [1,H,W] in [0,1]
  Tensor mask;   // [1,H,W] in {0,1}
};

struct ManifestRecord {
  std::string id;
  std::string image;
  std::string mask;
  std::string split;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;  // relative record paths resolve against this
};

// Pure function of (config.seed, index).
SamplePair generate_phantom(const PhantomConfig& config, std::uint64_t index);

// Writes n pairs plus manifest.csv under dir. Train pairs use indices
// 0..n-1, test pairs n..2n-1 so the splits never collide.
DatasetManifest generate_dataset(const PhantomConfig& config, int n, const std::string& split,
                                 const std::filesystem::path& dir);

DatasetManifest load_manifest(const std::filesystem::path& manifest_csv);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& manifest_csv);

// Loads every pair; images rescaled to [0,1] when stored 8-bit, masks
// validated and binarized at 0.5.
std::vector<SamplePair> load_dataset(const std::filesystem::path& manifest_csv);

// Pairs image_dir/mask_dir files whose names match `pattern` ('*'
// wildcards). Stems must correspond one-to-one; masks must be binary.
DatasetManifest ingest_external(const std::filesystem::path& image_dir,
                                const std::filesystem::path& mask_dir,
                                const std::string& pattern);

}  // namespace hvae
