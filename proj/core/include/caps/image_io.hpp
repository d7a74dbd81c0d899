#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace caps {

/// Grayscale raster with intensities in [0, 1], row-major.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;
};

/// Decodes PNG, BMP (uncompressed 1/4/8/24/32-bit) or binary/ASCII PGM by
/// extension. Colour inputs are reduced with Rec. 601 luma weights.
/// Throws DataError naming the file on any failure.
GrayImage decode_image(const std::filesystem::path& path);

GrayImage decode_pgm(const std::vector<unsigned char>& bytes);
GrayImage decode_bmp(const std::vector<unsigned char>& bytes);

/// Writes an 8-bit binary PGM (P5).
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

bool is_supported_image(const std::filesystem::path& path);

}  // namespace caps
