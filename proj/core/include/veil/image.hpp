#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace veil {

/// H x W x C pixel grid with values in [0, 1]. Storage is interleaved
/// (y, x, c), which is also the column-major (channel x position) layout the
/// network consumes directly.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0);
  Image(int height, int width, int channels, std::vector<double> pixels);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }

  double& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

  std::span<double> pixels() { return pixels_; }
  std::span<const double> pixels() const { return pixels_; }
  std::vector<double>& data() { return pixels_; }
  const std::vector<double>& data() const { return pixels_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           channels_ == other.channels_;
  }

  /// Throws ParamError unless H, W >= 16, C in {1, 3} and all pixels are in
  /// the unit range.
  void validate() const;

  /// Clamp every pixel into [0, 1].
  void clamp();

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> pixels_;
};

/// Throws DimensionError if the two images differ in shape.
void require_same_shape(const Image& a, const Image& b, const char* what);

/// Largest absolute per-pixel difference.
double max_abs_diff(const Image& a, const Image& b);

// 8-bit PNG I/O; p_unit = p_byte / 255 on load, round(p * 255) on store.
Image load_png(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);

}  // namespace veil
