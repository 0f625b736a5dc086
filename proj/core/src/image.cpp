#include "veil/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include "veil/errors.hpp"

namespace veil {

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw DimensionError("image dimensions must be positive");
  }
  pixels_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image::Image(int height, int width, int channels, std::vector<double> pixels)
    : height_(height), width_(width), channels_(channels), pixels_(std::move(pixels)) {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw DimensionError("image dimensions must be positive");
  }
  if (pixels_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw DimensionError("pixel buffer does not match image dimensions");
  }
}

void Image::validate() const {
  if (height_ < 16 || width_ < 16) {
    throw ParamError("image must be at least 16x16, got " + std::to_string(height_) + "x" +
                     std::to_string(width_));
  }
  if (channels_ != 1 && channels_ != 3) {
    throw ParamError("image must have 1 or 3 channels");
  }
  for (double p : pixels_) {
    if (!(p >= 0.0 && p <= 1.0)) throw ParamError("pixel value outside [0, 1]");
  }
}

void Image::clamp() {
  for (double& p : pixels_) p = std::clamp(p, 0.0, 1.0);
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": image shapes differ (" +
                         std::to_string(a.height()) + "x" + std::to_string(a.width()) + "x" +
                         std::to_string(a.channels()) + " vs " + std::to_string(b.height()) +
                         "x" + std::to_string(b.width()) + "x" +
                         std::to_string(b.channels()) + ")");
  }
}

double max_abs_diff(const Image& a, const Image& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image load_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path.string());

  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, fp.get())) {
    throw IoError("unreadable PNG " + path.string() + ": " + image.message);
  }
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int channels = gray ? 1 : 3;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("unreadable PNG " + path.string() + ": " + image.message);
  }
  std::vector<double> pixels(buffer.size());
  std::transform(buffer.begin(), buffer.end(), pixels.begin(),
                 [](png_byte b) { return static_cast<double>(b) / 255.0; });
  return Image(static_cast<int>(image.height), static_cast<int>(image.width), channels,
               std::move(pixels));
}

void save_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw ParamError("PNG output supports 1 or 3 channels");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::vector<png_byte> buffer(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.data()[i], 0.0, 1.0);
    buffer[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = img.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

}  // namespace veil
