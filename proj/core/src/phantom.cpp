#include "hvae/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "hvae/errors.hpp"
#include "hvae/image_io.hpp"
#include "hvae/rng.hpp"

namespace hvae {

void PhantomConfig::validate() const {
  if (height < 8 || width < 8) throw ConfigError("phantom config: extents must be at least 8");
  if (tumor_count_min < 1 || tumor_count_max < tumor_count_min) {
    throw ConfigError("phantom config: tumor count range is degenerate");
  }
  if (!(tumor_radius_min > 0.0) || tumor_radius_max < tumor_radius_min) {
    throw ConfigError("phantom config: tumor radius range is degenerate");
  }
  const int mindim = std::min(height, width);
  if (2.0 * tumor_radius_max * mindim + 2.0 >= mindim) {
    throw ConfigError("phantom config: tumor radius range exceeds image bounds");
  }
  if (noise_sigma < 0.0) throw ConfigError("phantom config: noise sigma must be non-negative");
  if (!(tumor_contrast > 2.0 * noise_sigma)) {
    throw ConfigError("phantom config: contrast must exceed twice the noise sigma");
  }
  if (background_smoothness < 0.0) {
    throw ConfigError("phantom config: background smoothness must be non-negative");
  }
}

namespace {

// Separable box blur with clamped borders.
void box_blur(std::vector<double>& img, int h, int w, int radius) {
  if (radius < 1) return;
  std::vector<double> tmp(img.size());
  const double inv = 1.0 / (2 * radius + 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int xx = std::clamp(x + k, 0, w - 1);
        acc += img[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc * inv;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int yy = std::clamp(y + k, 0, h - 1);
        acc += tmp[static_cast<std::size_t>(yy) * w + x];
      }
      img[static_cast<std::size_t>(y) * w + x] = acc * inv;
    }
  }
}

void rescale(std::vector<double>& img, double lo, double hi) {
  double mn = img[0], mx = img[0];
  for (double v : img) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx - mn < 1e-12) {
    std::fill(img.begin(), img.end(), 0.5 * (lo + hi));
    return;
  }
  const double scale = (hi - lo) / (mx - mn);
  for (auto& v : img) v = lo + (v - mn) * scale;
}

}  // namespace

SamplePair generate_phantom(const PhantomConfig& config, std::uint64_t index) {
  config.validate();
  Rng rng(config.seed ^ splitmix64_at(index));
  const int h = config.height, w = config.width;
  const std::size_t n = static_cast<std::size_t>(h) * w;

  std::vector<double> background(n);
  for (auto& v : background) v = rng.uniform01();
  box_blur(background, h, w, static_cast<int>(std::lround(config.background_smoothness)));
  rescale(background, 0.2, 0.6);

  std::vector<double> boost(n, 0.0);
  std::vector<double> mask(n, 0.0);
  const int count = static_cast<int>(rng.uniform_int(config.tumor_count_min, config.tumor_count_max));
  const double mindim = static_cast<double>(std::min(h, w));
  for (int t = 0; t < count; ++t) {
    const double rx = rng.uniform(config.tumor_radius_min, config.tumor_radius_max) * mindim;
    const double ry = rng.uniform(config.tumor_radius_min, config.tumor_radius_max) * mindim;
    const double theta = rng.uniform(0.0, 3.14159265358979323846);
    const double maxr = std::max(rx, ry);
    const double cx = rng.uniform(maxr, static_cast<double>(w - 1) - maxr);
    const double cy = rng.uniform(maxr, static_cast<double>(h - 1) - maxr);
    const double ct = std::cos(theta), st = std::sin(theta);
    // Soft edge entirely inside the hard mask boundary.
    const double edge = 0.3;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * ct + dy * st) / rx;
        const double v = (-dx * st + dy * ct) / ry;
        const double q = u * u + v * v;
        if (q > 1.0) continue;
        mask[static_cast<std::size_t>(y) * w + x] = 1.0;
        double f = 1.0;
        if (q > 1.0 - edge) {
          const double s = (1.0 - q) / edge;
          f = s * s * (3.0 - 2.0 * s);
        }
        auto& b = boost[static_cast<std::size_t>(y) * w + x];
        b = std::max(b, config.tumor_contrast * f);
      }
    }
  }

  std::vector<double> image(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = background[i] + boost[i] + config.noise_sigma * rng.normal();
    image[i] = std::clamp(v, 0.0, 1.0);
  }
  SamplePair pair;
  pair.image = Tensor({1, h, w}, std::move(image));
  pair.mask = Tensor({1, h, w}, std::move(mask));
  return pair;
}

DatasetManifest generate_dataset(const PhantomConfig& config, int n, const std::string& split,
                                 const std::filesystem::path& dir) {
  if (n < 1) throw ConfigError("generate_dataset: n must be at least 1");
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  const std::uint64_t base = split == "test" ? static_cast<std::uint64_t>(n) : 0;
  DatasetManifest manifest;
  manifest.base_dir = dir;
  for (int i = 0; i < n; ++i) {
    const std::uint64_t index = base + static_cast<std::uint64_t>(i);
    SamplePair pair = generate_phantom(config, index);
    ManifestRecord rec;
    rec.id = split + "_" + std::to_string(index);
    rec.image = rec.id + "_image.imgf";
    rec.mask = rec.id + "_mask.imgf";
    rec.split = split;
    write_imgf(dir / rec.image, pair.image);
    write_imgf(dir / rec.mask, pair.mask);
    manifest.records.push_back(std::move(rec));
  }
  save_manifest(manifest, dir / "manifest.csv");
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& manifest_csv) {
  std::ofstream out(manifest_csv);
  if (!out) throw IoError("cannot open " + manifest_csv.string() + " for writing");
  out << "id,image,mask,split\n";
  for (const auto& rec : manifest.records) {
    for (const std::string* field : {&rec.id, &rec.image, &rec.mask, &rec.split}) {
      if (field->find(',') != std::string::npos) {
        throw DataError("manifest field contains a comma: " + *field);
      }
    }
    out << rec.id << "," << rec.image << "," << rec.mask << "," << rec.split << "\n";
  }
  if (!out) throw IoError("failed writing " + manifest_csv.string());
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_csv) {
  std::ifstream in(manifest_csv);
  if (!in) throw IoError("cannot open manifest " + manifest_csv.string());
  DatasetManifest manifest;
  manifest.base_dir = manifest_csv.parent_path();
  std::string line;
  if (!std::getline(in, line) || line != "id,image,mask,split") {
    throw DataError(manifest_csv.string() + ": expected header id,image,mask,split");
  }
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    ManifestRecord rec;
    if (!std::getline(row, rec.id, ',') || !std::getline(row, rec.image, ',') ||
        !std::getline(row, rec.mask, ',') || !std::getline(row, rec.split)) {
      throw DataError(manifest_csv.string() + ": malformed row '" + line + "'");
    }
    if (!seen.insert(rec.id).second) {
      throw DataError(manifest_csv.string() + ": duplicate id '" + rec.id + "'");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

namespace {

std::filesystem::path resolve(const DatasetManifest& manifest, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute()) return path;
  return manifest.base_dir / path;
}

Tensor load_mask_checked(const std::filesystem::path& path, const std::string& id) {
  Tensor raw = read_image(path);
  std::map<double, std::size_t> offending;
  std::vector<double> out(raw.numel());
  for (std::size_t i = 0; i < raw.numel(); ++i) {
    const double v = raw.at(i);
    if (v != 0.0 && v != 1.0) {
      ++offending[v];
      continue;
    }
    out[i] = v > 0.5 ? 1.0 : 0.0;
  }
  if (!offending.empty()) {
    std::ostringstream msg;
    msg << "mask for '" << id << "' (" << path.string() << ") is not binary; offending values:";
    std::size_t shown = 0;
    for (const auto& [value, cnt] : offending) {
      if (shown++ == 8) {
        msg << " ...";
        break;
      }
      msg << " " << value << " (x" << cnt << ")";
    }
    throw DataError(msg.str());
  }
  return Tensor(raw.shape(), std::move(out));
}

}  // namespace

std::vector<SamplePair> load_dataset(const std::filesystem::path& manifest_csv) {
  DatasetManifest manifest = load_manifest(manifest_csv);
  std::vector<SamplePair> pairs;
  pairs.reserve(manifest.records.size());
  Shape common;
  for (const auto& rec : manifest.records) {
    const auto image_path = resolve(manifest, rec.image);
    const auto mask_path = resolve(manifest, rec.mask);
    if (!std::filesystem::exists(image_path)) {
      throw DataError("record '" + rec.id + "': missing image file " + image_path.string());
    }
    if (!std::filesystem::exists(mask_path)) {
      throw DataError("record '" + rec.id + "': missing mask file " + mask_path.string());
    }
    SamplePair pair;
    pair.image = read_image(image_path);
    pair.mask = load_mask_checked(mask_path, rec.id);
    if (!pair.image.same_shape(pair.mask)) {
      throw DataError("record '" + rec.id + "': image " + shape_str(pair.image.shape()) +
                      " and mask " + shape_str(pair.mask.shape()) + " disagree");
    }
    if (common.empty()) {
      common = pair.image.shape();
    } else if (pair.image.shape() != common) {
      throw DataError("record '" + rec.id + "': shape " + shape_str(pair.image.shape()) +
                      " differs from dataset shape " + shape_str(common));
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

namespace {

bool wildcard_match(const std::string& pattern, const std::string& text) {
  // '*' only; classic two-pointer scan.
  std::size_t p = 0, t = 0, star = std::string::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::map<std::string, std::filesystem::path> list_matching(const std::filesystem::path& dir,
                                                           const std::string& pattern) {
  if (!std::filesystem::is_directory(dir)) {
    throw DataError("not a directory: " + dir.string());
  }
  std::map<std::string, std::filesystem::path> by_stem;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (!wildcard_match(pattern, name)) continue;
    by_stem[entry.path().stem().string()] = entry.path();
  }
  return by_stem;
}

}  // namespace

DatasetManifest ingest_external(const std::filesystem::path& image_dir,
                                const std::filesystem::path& mask_dir,
                                const std::string& pattern) {
  const auto images = list_matching(image_dir, pattern);
  const auto masks = list_matching(mask_dir, pattern);

  std::vector<std::string> unmatched;
  for (const auto& [stem, path] : images) {
    if (!masks.count(stem)) unmatched.push_back(stem + " (image without mask)");
  }
  for (const auto& [stem, path] : masks) {
    if (!images.count(stem)) unmatched.push_back(stem + " (mask without image)");
  }
  if (!unmatched.empty()) {
    std::ostringstream msg;
    msg << "unmatched files between " << image_dir.string() << " and " << mask_dir.string() << ":";
    for (const auto& s : unmatched) msg << " " << s;
    throw DataError(msg.str());
  }
  if (images.empty()) {
    throw DataError("no files matching '" + pattern + "' in " + image_dir.string());
  }

  DatasetManifest manifest;
  Shape common;
  for (const auto& [stem, image_path] : images) {
    const auto& mask_path = masks.at(stem);
    Tensor image = read_image(image_path);
    Tensor mask = load_mask_checked(mask_path, stem);
    if (!image.same_shape(mask)) {
      throw DataError("pair '" + stem + "': image " + shape_str(image.shape()) + " and mask " +
                      shape_str(mask.shape()) + " disagree");
    }
    if (common.empty()) {
      common = image.shape();
    } else if (image.shape() != common) {
      throw DataError("pair '" + stem + "': shape " + shape_str(image.shape()) +
                      " differs from dataset shape " + shape_str(common));
    }
    ManifestRecord rec;
    rec.id = stem;
    rec.image = std::filesystem::absolute(image_path).string();
    rec.mask = std::filesystem::absolute(mask_path).string();
    rec.split = "external";
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

}  // namespace hvae
