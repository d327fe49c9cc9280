#include "hvae/image_io.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "hvae/errors.hpp"

namespace hvae {

namespace {

void spatial_dims(const Tensor& image, int& h, int& w) {
  if (image.rank() == 2) {
    h = image.shape()[0];
    w = image.shape()[1];
    return;
  }
  if (image.rank() == 3 && image.shape()[0] == 1) {
    h = image.shape()[1];
    w = image.shape()[2];
    return;
  }
  throw std::invalid_argument("image must be [H,W] or [1,H,W], got " + shape_str(image.shape()));
}

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

constexpr std::uint32_t kImgfVersion = 1;

}  // namespace

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  int h, w;
  spatial_dims(image, h, w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.at(i), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(v * 255.0 + 0.5);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P5") throw DataError(path.string() + ": not a binary PGM (P5) file");
  auto next_token = [&]() -> long {
    // Skips whitespace and '#' comment lines.
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
        continue;
      }
      if (std::isspace(c)) {
        in.get();
        continue;
      }
      break;
    }
    long v;
    in >> v;
    return v;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw DataError(path.string() + ": truncated PGM payload");
  std::vector<double> values(bytes.size());
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = bytes[i] * scale;
  return Tensor({1, static_cast<int>(h), static_cast<int>(w)}, std::move(values));
}

void write_imgf(const std::filesystem::path& path, const Tensor& image) {
  int h, w;
  spatial_dims(image, h, w);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write("IMGF", 4);
  write_u32(out, kImgfVersion);
  write_u32(out, static_cast<std::uint32_t>(h));
  write_u32(out, static_cast<std::uint32_t>(w));
  out.write(reinterpret_cast<const char*>(image.values().data()),
            static_cast<std::streamsize>(image.numel() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

Tensor read_imgf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "IMGF", 4) != 0) {
    throw DataError(path.string() + ": not an IMGF file");
  }
  const std::uint32_t version = read_u32(in);
  if (version != kImgfVersion) {
    throw DataError(path.string() + ": unsupported IMGF version " + std::to_string(version));
  }
  const std::uint32_t h = read_u32(in);
  const std::uint32_t w = read_u32(in);
  if (!in || h == 0 || w == 0 || h > 1u << 20 || w > 1u << 20) {
    throw DataError(path.string() + ": malformed IMGF header");
  }
  std::vector<double> values(static_cast<std::size_t>(h) * w);
  in.read(reinterpret_cast<char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!in) throw DataError(path.string() + ": truncated IMGF payload");
  return Tensor({1, static_cast<int>(h), static_cast<int>(w)}, std::move(values));
}

Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  in.close();
  if (magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
  return read_imgf(path);
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (path.extension() == ".pgm") {
    write_pgm(path, image);
  } else {
    write_imgf(path, image);
  }
}

}  // namespace hvae
