#include "caps/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "caps/errors.hpp"

namespace caps {

namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image file " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

std::uint32_t le32(const std::vector<unsigned char>& b, std::size_t at) {
  if (at + 4 > b.size()) throw DataError("bmp: truncated header");
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

std::uint16_t le16(const std::vector<unsigned char>& b, std::size_t at) {
  if (at + 2 > b.size()) throw DataError("bmp: truncated header");
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}

GrayImage decode_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw DataError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<unsigned char> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    std::string message = image.message;
    png_image_free(&image);
    throw DataError("cannot decode PNG " + path.string() + ": " + message);
  }
  GrayImage out{image.height, image.width, std::vector<float>(buffer.size())};
  for (std::size_t i = 0; i < buffer.size(); ++i) out.pixels[i] = static_cast<float>(buffer[i]) / 255.0f;
  return out;
}

// Skips whitespace and '#' comments in a PNM header.
std::size_t pnm_skip(const std::vector<unsigned char>& b, std::size_t at) {
  while (at < b.size()) {
    if (b[at] == '#') {
      while (at < b.size() && b[at] != '\n') ++at;
    } else if (std::isspace(b[at])) {
      ++at;
    } else {
      break;
    }
  }
  return at;
}

std::size_t pnm_number(const std::vector<unsigned char>& b, std::size_t& at) {
  at = pnm_skip(b, at);
  if (at >= b.size() || !std::isdigit(b[at])) throw DataError("pgm: malformed header");
  std::size_t value = 0;
  while (at < b.size() && std::isdigit(b[at])) value = value * 10 + (b[at++] - '0');
  return value;
}

}  // namespace

bool is_supported_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  return ext == ".png" || ext == ".bmp" || ext == ".pgm";
}

GrayImage decode_pgm(const std::vector<unsigned char>& b) {
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '5' && b[1] != '2')) throw DataError("pgm: bad magic");
  const bool binary = b[1] == '5';
  std::size_t at = 2;
  const std::size_t width = pnm_number(b, at);
  const std::size_t height = pnm_number(b, at);
  const std::size_t maxval = pnm_number(b, at);
  if (width == 0 || height == 0 || maxval == 0 || maxval > 65535) throw DataError("pgm: bad dimensions");
  GrayImage out{height, width, std::vector<float>(width * height)};
  const float inv = 1.0f / static_cast<float>(maxval);
  if (binary) {
    ++at;  // single whitespace byte after maxval
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    if (b.size() < at + out.pixels.size() * bytes_per) throw DataError("pgm: truncated raster");
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      const std::size_t v = bytes_per == 1 ? b[at + i] : (b[at + 2 * i] << 8) | b[at + 2 * i + 1];
      out.pixels[i] = std::min(1.0f, static_cast<float>(v) * inv);
    }
  } else {
    for (auto& p : out.pixels) p = std::min(1.0f, static_cast<float>(pnm_number(b, at)) * inv);
  }
  return out;
}

GrayImage decode_bmp(const std::vector<unsigned char>& b) {
  if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') throw DataError("bmp: bad magic");
  const std::uint32_t data_offset = le32(b, 10);
  const std::uint32_t header_size = le32(b, 14);
  if (header_size < 40) throw DataError("bmp: unsupported core header");
  const auto raw_width = static_cast<std::int32_t>(le32(b, 18));
  const auto raw_height = static_cast<std::int32_t>(le32(b, 22));
  const std::uint16_t bpp = le16(b, 28);
  const std::uint32_t compression = le32(b, 30);
  if (compression != 0 && compression != 3) throw DataError("bmp: compressed bitmaps are not supported");
  if (raw_width <= 0 || raw_height == 0) throw DataError("bmp: bad dimensions");
  const bool top_down = raw_height < 0;
  const std::size_t width = static_cast<std::size_t>(raw_width);
  const std::size_t height = static_cast<std::size_t>(top_down ? -static_cast<std::int64_t>(raw_height) : raw_height);

  std::vector<float> palette;
  if (bpp <= 8) {
    std::uint32_t colours = le32(b, 46);
    if (colours == 0) colours = 1u << bpp;
    const std::size_t table = 14 + header_size;
    if (table + colours * 4 > b.size()) throw DataError("bmp: truncated palette");
    for (std::uint32_t c = 0; c < colours; ++c) {
      const std::size_t at = table + c * 4;
      palette.push_back(luma(b[at + 2] / 255.0f, b[at + 1] / 255.0f, b[at] / 255.0f));
    }
  } else if (bpp != 24 && bpp != 32) {
    throw DataError("bmp: unsupported bit depth " + std::to_string(bpp));
  }

  const std::size_t stride = ((width * bpp + 31) / 32) * 4;
  if (data_offset + stride * height > b.size()) throw DataError("bmp: truncated raster");
  GrayImage out{height, width, std::vector<float>(width * height)};
  for (std::size_t row = 0; row < height; ++row) {
    const std::size_t y = top_down ? row : height - 1 - row;
    const unsigned char* src = b.data() + data_offset + row * stride;
    for (std::size_t x = 0; x < width; ++x) {
      float value = 0.0f;
      if (bpp <= 8) {
        const std::size_t bit = x * bpp;
        const unsigned shift = static_cast<unsigned>(8 - bpp - bit % 8);
        const std::size_t index = (src[bit / 8] >> shift) & ((1u << bpp) - 1);
        if (index >= palette.size()) throw DataError("bmp: palette index out of range");
        value = palette[index];
      } else {
        const std::size_t at = x * (bpp / 8);
        value = luma(src[at + 2] / 255.0f, src[at + 1] / 255.0f, src[at] / 255.0f);
      }
      out.pixels[y * width + x] = std::clamp(value, 0.0f, 1.0f);
    }
  }
  return out;
}

GrayImage decode_image(const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  try {
    if (ext == ".png") return decode_png(path);
    if (ext == ".pgm") return decode_pgm(read_bytes(path));
    if (ext == ".bmp") return decode_bmp(read_bytes(path));
  } catch (const DataError& e) {
    const std::string what = e.what();
    if (what.find(path.string()) != std::string::npos) throw;
    throw DataError(what + " in " + path.string());
  }
  throw DataError("unsupported image format: " + path.string());
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  for (float p : image.pixels) {
    out.put(static_cast<char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
  }
}

}  // namespace caps
