#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace frace {

/// 8-bit interleaved RGB image, row-major.
struct RgbImage {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> data;  // height * width * 3

  RgbImage() = default;
  RgbImage(std::int64_t h, std::int64_t w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h * w * 3), fill) {}

  std::uint8_t* pixel(std::int64_t row, std::int64_t col) { return &data[(row * width + col) * 3]; }
  const std::uint8_t* pixel(std::int64_t row, std::int64_t col) const {
    return &data[(row * width + col) * 3];
  }
  bool operator==(const RgbImage&) const = default;

  /// Copies `tile` with its top-left corner at (row, col).
  void blit(const RgbImage& tile, std::int64_t row, std::int64_t col);
  RgbImage crop(std::int64_t row, std::int64_t col, std::int64_t h, std::int64_t w) const;
};

/// [ch, h, w] tensor in [-1, 1] to RGB. One channel is replicated.
RgbImage to_rgb(const torch::Tensor& image);

std::string encode_png(const RgbImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Decodes PNG/JPEG/... bytes and returns a [channels, height, width]
/// tensor in [-1, 1], resized to height x width. Throws FormatError on
/// undecodable input.
torch::Tensor decode_image(const std::string& bytes, std::int64_t channels, std::int64_t height,
                           std::int64_t width);
RgbImage decode_png_rgb(const std::string& bytes);

std::string base64_encode(const std::string& bytes);
/// Throws FormatError on characters outside the standard alphabet.
std::string base64_decode(const std::string& text);

}  // namespace frace
