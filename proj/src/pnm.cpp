#include "dap/pnm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "dap/error.hpp"
#include "dap/fileio.hpp"

namespace dap {

namespace {

class HeaderReader {
 public:
  HeaderReader(std::string_view bytes, std::size_t start) : bytes_(bytes), pos_(start) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (value > (1u << 24)) throw ParseError(start, std::string(what) + " is too large");
      ++pos_;
    }
    if (pos_ == start) throw ParseError(start, std::string("expected ") + what);
    return value;
  }

  void expect_single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
      throw ParseError(pos_, "expected whitespace after maxval");
    ++pos_;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_pnm(const PnmImage& img, std::string_view comment) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("pnm images have 1 or 3 channels");
  if (img.bytes.size() != img.width * img.height * img.channels) throw ShapeError("pnm payload size mismatch");
  if (comment.find('\n') != std::string_view::npos) throw InputError("pnm comment contains a newline");
  std::string out = img.channels == 1 ? "P5\n" : "P6\n";
  if (!comment.empty()) {
    out += "# ";
    out += comment;
    out += '\n';
  }
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.bytes.data()), img.bytes.size());
  return out;
}

PnmImage decode_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError(0, "missing P5/P6 magic");
  PnmImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader reader(bytes, 2);
  img.width = reader.read_uint("width");
  img.height = reader.read_uint("height");
  reader.skip_space_and_comments();
  const std::size_t maxval_at = reader.offset();
  const std::size_t maxval = reader.read_uint("maxval");
  if (maxval == 0 || maxval > 255) throw ParseError(maxval_at, "maxval must be in [1, 255]");
  reader.expect_single_space();
  const std::size_t payload_at = reader.offset();
  const std::size_t expected = img.width * img.height * img.channels;
  const std::size_t actual = bytes.size() - payload_at;
  if (actual < expected) {
    throw ParseError(payload_at, "truncated payload: expected " + std::to_string(expected) +
                                     " bytes, got " + std::to_string(actual));
  }
  img.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_at),
                   bytes.begin() + static_cast<std::ptrdiff_t>(payload_at + expected));
  return img;
}

void write_pnm(const std::filesystem::path& path, const PnmImage& img, std::string_view comment) {
  write_file_atomic(path, encode_pnm(img, comment));
}

PnmImage read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file(path)); }

PnmImage to_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("pnm images have 1 or 3 channels");
  PnmImage out;
  out.width = img.width;
  out.height = img.height;
  out.channels = img.channels;
  out.bytes.resize(img.width * img.height * img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
        out.bytes[(y * img.width + x) * img.channels + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return out;
}

Image from_pnm(const PnmImage& img) {
  Image out(img.channels, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        out.at(c, y, x) = static_cast<float>(img.bytes[(y * img.width + x) * img.channels + c]) / 255.0f;
  return out;
}

void write_image(const std::filesystem::path& path, const Image& img, std::string_view comment) {
  write_pnm(path, to_pnm(img), comment);
}

Image read_image(const std::filesystem::path& path) { return from_pnm(read_pnm(path)); }

HeatmapImage render_heatmap(const Heatmap& map, std::size_t image_size, Interpolation mode) {
  const std::size_t side = square_side(map.values.size());
  if (image_size == 0) throw ShapeError("image_size must be positive");
  HeatmapImage out;
  out.width = out.height = image_size;
  out.channels = 1;
  out.bytes.resize(image_size * image_size);

  const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
  if (!(*hi > *lo)) {
    std::fill(out.bytes.begin(), out.bytes.end(), std::uint8_t{128});
    return out;
  }
  const auto scaled = min_max_scaled(map.values);
  const double scale = static_cast<double>(side) / static_cast<double>(image_size);
  auto cell = [&](std::size_t gx, std::size_t gy) { return scaled[gy * side + gx]; };

  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      double v = 0.0;
      if (mode == Interpolation::kNearest) {
        const auto gx = std::min(side - 1, static_cast<std::size_t>((static_cast<double>(x) + 0.5) * scale));
        const auto gy = std::min(side - 1, static_cast<std::size_t>((static_cast<double>(y) + 0.5) * scale));
        v = cell(gx, gy);
      } else {
        // half-pixel centers, clamped at the border
        const double max_coord = static_cast<double>(side - 1);
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * scale - 0.5, 0.0, max_coord);
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * scale - 0.5, 0.0, max_coord);
        const auto x0 = static_cast<std::size_t>(fx);
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t x1 = std::min(x0 + 1, side - 1);
        const std::size_t y1 = std::min(y0 + 1, side - 1);
        const double tx = fx - static_cast<double>(x0);
        const double ty = fy - static_cast<double>(y0);
        const double top = cell(x0, y0) * (1.0 - tx) + cell(x1, y0) * tx;
        const double bottom = cell(x0, y1) * (1.0 - tx) + cell(x1, y1) * tx;
        v = top * (1.0 - ty) + bottom * ty;
      }
      out.bytes[y * image_size + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

}  // namespace dap
