#pragma once

#include <filesystem>

#include "hvae/tensor.hpp"

namespace hvae {

// Binary PGM (P5, maxval 255). Values are clamped to [0,1] and
// quantized to 8 bits on write; reads rescale back into [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

// Lossless raw format: 16-byte header (magic "IMGF", u32 version,
// u32 H, u32 W), then H*W little-endian f64 values.
void write_imgf(const std::filesystem::path& path, const Tensor& image);
Tensor read_imgf(const std::filesystem::path& path);

// Dispatch on the file's magic bytes. Always returns [1,H,W].
Tensor read_image(const std::filesystem::path& path);

// Dispatch on extension: ".pgm" quantized, anything else raw f64.
void write_image(const std::filesystem::path& path, const Tensor& image);

}  // namespace hvae
