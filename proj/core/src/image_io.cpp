#include "frace/image_io.hpp"

#include <array>
#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "frace/datasets.hpp"
#include "frace/errors.hpp"

namespace frace {

void RgbImage::blit(const RgbImage& tile, std::int64_t row, std::int64_t col) {
  for (std::int64_t r = 0; r < tile.height; ++r) {
    for (std::int64_t c = 0; c < tile.width; ++c) {
      const auto* src = tile.pixel(r, c);
      auto* dst = pixel(row + r, col + c);
      dst[0] = src[0];
      dst[1] = src[1];
      dst[2] = src[2];
    }
  }
}

RgbImage RgbImage::crop(std::int64_t row, std::int64_t col, std::int64_t h, std::int64_t w) const {
  RgbImage out(h, w);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      const auto* src = pixel(row + r, col + c);
      auto* dst = out.pixel(r, c);
      dst[0] = src[0];
      dst[1] = src[1];
      dst[2] = src[2];
    }
  }
  return out;
}

RgbImage to_rgb(const torch::Tensor& image) {
  if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3)) {
    throw ShapeError("to_rgb expects a [1|3, h, w] image");
  }
  const auto img = image.detach().to(torch::kFloat32).contiguous();
  const auto channels = img.size(0);
  const auto h = img.size(1);
  const auto w = img.size(2);
  const auto* p = img.data_ptr<float>();
  RgbImage out(h, w);
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) {
      auto* dst = out.pixel(r, c);
      for (int k = 0; k < 3; ++k) {
        const auto ch = channels == 1 ? 0 : k;
        dst[k] = denormalize_value(p[(ch * h + r) * w + c]);
      }
    }
  }
  return out;
}

namespace {

cv::Mat as_bgr_mat(const RgbImage& image) {
  cv::Mat rgb(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
              const_cast<std::uint8_t*>(image.data.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

cv::Mat decode_mat(const std::string& bytes, int flags) {
  if (bytes.empty()) throw FormatError("empty image payload");
  std::vector<std::uint8_t> buffer(bytes.begin(), bytes.end());
  cv::Mat img = cv::imdecode(buffer, flags);
  if (img.empty()) throw FormatError("image payload is not a decodable image");
  return img;
}

}  // namespace

std::string encode_png(const RgbImage& image) {
  std::vector<std::uint8_t> buffer;
  // Fixed compression level keeps the byte stream reproducible.
  if (!cv::imencode(".png", as_bgr_mat(image), buffer, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw FormatError("PNG encoding failed");
  }
  return {buffer.begin(), buffer.end()};
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

torch::Tensor decode_image(const std::string& bytes, std::int64_t channels, std::int64_t height,
                           std::int64_t width) {
  if (channels != 1 && channels != 3) throw ValidationError("channels must be 1 or 3");
  cv::Mat img = decode_mat(bytes, channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR);
  if (img.rows != height || img.cols != width) {
    cv::resize(img, img, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0,
               cv::INTER_AREA);
  }
  if (channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  cv::Mat as_float;
  img.convertTo(as_float, CV_32F, 1.0 / 127.5, -1.0);
  return torch::from_blob(as_float.data, {height, width, channels}, torch::kFloat32)
      .permute({2, 0, 1})
      .clone();
}

RgbImage decode_png_rgb(const std::string& bytes) {
  cv::Mat img = decode_mat(bytes, cv::IMREAD_COLOR);
  cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  RgbImage out(img.rows, img.cols);
  for (int r = 0; r < img.rows; ++r) {
    std::copy_n(img.ptr<std::uint8_t>(r), img.cols * 3, out.pixel(r, 0));
  }
  return out;
}

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8) |
                            std::uint8_t(bytes[i + 2]);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  const auto rest = bytes.size() - i;
  if (rest == 1) {
    const std::uint32_t v = std::uint8_t(bytes[i]) << 16;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += "==";
  } else if (rest == 2) {
    const std::uint32_t v = (std::uint8_t(bytes[i]) << 16) | (std::uint8_t(bytes[i + 1]) << 8);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = i;

  std::string out;
  std::uint32_t buffer = 0;
  int bits = 0;
  std::size_t padding = 0;
  for (char ch : text) {
    if (ch == '=') {
      ++padding;
      continue;
    }
    if (ch == '\n' || ch == '\r') continue;
    const int v = lookup[static_cast<unsigned char>(ch)];
    if (v < 0 || padding > 0) throw FormatError("invalid base64 payload");
    buffer = (buffer << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out += static_cast<char>((buffer >> bits) & 0xff);
    }
  }
  if (padding > 2) throw FormatError("invalid base64 padding");
  return out;
}

}  // namespace frace
