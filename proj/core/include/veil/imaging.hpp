#pragma once

#include <vector>

#include "veil/image.hpp"
#include "veil/rng.hpp"

namespace veil {

/// Parameters of the windowed SSIM behind the DSSIM perceptual budget.
/// Box (uniform) window; stabilizers C1 = (k1 L)^2, C2 = (k2 L)^2.
struct SsimParams {
  int window_size = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  /// Throws ParamError when the parameters cannot be applied to an
  /// image of the given size.
  void validate_for(int height, int width) const;
};

/// Mean SSIM over all fully-contained windows, averaged across channels.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});

/// Structural dissimilarity (1 - SSIM) / 2, in [0, 1].
double dssim(const Image& a, const Image& b, const SsimParams& params = {});

struct DssimGradient {
  double value = 0.0;
  /// d dssim / d b, laid out like the image pixels.
  std::vector<double> grad;
};

/// DSSIM together with its analytic gradient with respect to `b`.
DssimGradient dssim_with_grad(const Image& a, const Image& b, const SsimParams& params = {});

/// Separable Gaussian blur with reflected borders.
Image gaussian_blur(const Image& img, int kernel_size, double sigma);

/// Normalized 1-D Gaussian taps used by gaussian_blur.
std::vector<double> gaussian_kernel(int kernel_size, double sigma);

/// clamp(img + N(0, std^2), 0, 1), independently per pixel.
Image gaussian_noise(const Image& img, double std, SeededRng& rng);

/// Encode to JFIF at `quality` (5..95) and decode back.
Image jpeg_roundtrip(const Image& img, int quality);

struct AugmentParams {
  double rotation_deg = 20.0;
  double width_shift = 0.15;
  double height_shift = 0.15;
  double zoom = 0.15;
};

/// A concrete geometric transform. Positive rotation turns the content
/// clockwise as displayed (y axis points down); shifts are in pixels; zoom
/// above 1 magnifies.
struct AffineParams {
  double rotation_deg = 0.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double zoom = 1.0;
};

/// Apply an affine transform about the image center with bilinear sampling
/// and reflection padding.
Image affine_transform(const Image& img, const AffineParams& params);

/// Sample rotation in [-r, r], shifts in [-s, s] of the image extent and zoom
/// in [1 - z, 1 + z], then apply them.
Image augment(const Image& img, const AugmentParams& params, SeededRng& rng);

}  // namespace veil
