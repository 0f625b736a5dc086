#include "veil/imaging.hpp"

#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <numbers>
#include <string>

#include "veil/errors.hpp"

namespace veil {

void SsimParams::validate_for(int height, int width) const {
  if (window_size < 1 || window_size % 2 == 0) {
    throw ParamError("SSIM window size must be a positive odd integer");
  }
  if (window_size > std::min(height, width)) {
    throw ParamError("SSIM window " + std::to_string(window_size) + " exceeds image size " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  if (!(k1 > 0.0) || !(k2 > 0.0)) throw ParamError("SSIM constants k1, k2 must be positive");
  if (!(dynamic_range > 0.0)) throw ParamError("SSIM dynamic range must be positive");
}

namespace {

// 2-D inclusive prefix sums with a zero border row/column:
// table[(y + 1) * (w + 1) + (x + 1)] = sum over [0..y] x [0..x].
class SummedArea {
 public:
  SummedArea(int h, int w) : h_(h), w_(w), table_(static_cast<std::size_t>(h + 1) * (w + 1)) {}

  template <typename F>
  void build(F&& value) {
    std::fill(table_.begin(), table_.end(), 0.0);
    for (int y = 0; y < h_; ++y) {
      double row = 0.0;
      for (int x = 0; x < w_; ++x) {
        row += value(y, x);
        at(y + 1, x + 1) = at(y, x + 1) + row;
      }
    }
  }

  // Sum over rows [y0, y1) and cols [x0, x1).
  double rect(int y0, int x0, int y1, int x1) const {
    return at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
  }

 private:
  double& at(int y, int x) { return table_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }
  double at(int y, int x) const { return table_[static_cast<std::size_t>(y) * (w_ + 1) + x]; }

  int h_, w_;
  std::vector<double> table_;
};

struct WindowStats {
  double mu_a, mu_b, var_a, var_b, cov;
};

// Shared SSIM core. When grad is non-null it receives d(mean SSIM)/d b.
double ssim_impl(const Image& a, const Image& b, const SsimParams& p, std::vector<double>* grad) {
  require_same_shape(a, b, "ssim");
  p.validate_for(a.height(), a.width());

  const int h = a.height(), w = a.width(), channels = a.channels();
  const int win = p.window_size;
  const int out_h = h - win + 1, out_w = w - win + 1;
  const double n = static_cast<double>(win) * win;
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  const double norm = 1.0 / (static_cast<double>(out_h) * out_w * channels);

  if (grad) grad->assign(b.size(), 0.0);

  SummedArea sa(h, w), sb(h, w), saa(h, w), sbb(h, w), sab(h, w);
  std::vector<double> g_mu, g_ab, g_bb;
  if (grad) {
    g_mu.resize(static_cast<std::size_t>(out_h) * out_w);
    g_ab.resize(g_mu.size());
    g_bb.resize(g_mu.size());
  }

  double total = 0.0;
  for (int c = 0; c < channels; ++c) {
    sa.build([&](int y, int x) { return a.at(y, x, c); });
    sb.build([&](int y, int x) { return b.at(y, x, c); });
    saa.build([&](int y, int x) { return a.at(y, x, c) * a.at(y, x, c); });
    sbb.build([&](int y, int x) { return b.at(y, x, c) * b.at(y, x, c); });
    sab.build([&](int y, int x) { return a.at(y, x, c) * b.at(y, x, c); });

    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        const double mu_a = sa.rect(i, j, i + win, j + win) / n;
        const double mu_b = sb.rect(i, j, i + win, j + win) / n;
        const double m_aa = saa.rect(i, j, i + win, j + win) / n;
        const double m_bb = sbb.rect(i, j, i + win, j + win) / n;
        const double m_ab = sab.rect(i, j, i + win, j + win) / n;
        const double var_a = m_aa - mu_a * mu_a;
        const double var_b = m_bb - mu_b * mu_b;
        const double cov = m_ab - mu_a * mu_b;

        const double a1 = 2.0 * mu_a * mu_b + c1;
        const double a2 = 2.0 * cov + c2;
        const double b1 = mu_a * mu_a + mu_b * mu_b + c1;
        const double b2 = var_a + var_b + c2;
        const double s = (a1 * a2) / (b1 * b2);
        total += s;

        if (grad) {
          const std::size_t k = static_cast<std::size_t>(i) * out_w + j;
          const double denom = b1 * b2;
          g_mu[k] = 2.0 * mu_a * (a2 - a1) / denom - 2.0 * mu_b * s * (1.0 / b1 - 1.0 / b2);
          g_ab[k] = 2.0 * a1 / denom;
          g_bb[k] = -s / b2;
        }
      }
    }

    if (grad) {
      // Scatter window coefficients back to the pixels each window covers.
      SummedArea gm(out_h, out_w), ga(out_h, out_w), gb(out_h, out_w);
      gm.build([&](int y, int x) { return g_mu[static_cast<std::size_t>(y) * out_w + x]; });
      ga.build([&](int y, int x) { return g_ab[static_cast<std::size_t>(y) * out_w + x]; });
      gb.build([&](int y, int x) { return g_bb[static_cast<std::size_t>(y) * out_w + x]; });
      for (int y = 0; y < h; ++y) {
        const int i0 = std::max(0, y - win + 1), i1 = std::min(out_h - 1, y) + 1;
        for (int x = 0; x < w; ++x) {
          const int j0 = std::max(0, x - win + 1), j1 = std::min(out_w - 1, x) + 1;
          const double sum_mu = gm.rect(i0, j0, i1, j1);
          const double sum_ab = ga.rect(i0, j0, i1, j1);
          const double sum_bb = gb.rect(i0, j0, i1, j1);
          const double d = (sum_mu + sum_ab * a.at(y, x, c) + 2.0 * sum_bb * b.at(y, x, c)) / n;
          (*grad)[(static_cast<std::size_t>(y) * w + x) * channels + c] = d * norm;
        }
      }
    }
  }
  return total * norm;
}

}  // namespace

double ssim(const Image& a, const Image& b, const SsimParams& params) {
  return ssim_impl(a, b, params, nullptr);
}

double dssim(const Image& a, const Image& b, const SsimParams& params) {
  return std::clamp((1.0 - ssim_impl(a, b, params, nullptr)) / 2.0, 0.0, 1.0);
}

DssimGradient dssim_with_grad(const Image& a, const Image& b, const SsimParams& params) {
  DssimGradient out;
  const double s = ssim_impl(a, b, params, &out.grad);
  out.value = std::clamp((1.0 - s) / 2.0, 0.0, 1.0);
  for (double& g : out.grad) g *= -0.5;
  return out;
}

namespace {

// Reflect-101 index: -1 -> 1, n -> n - 2.
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

double reflect_coord(double u, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  u = std::fmod(u, period);
  if (u < 0) u += period;
  return u <= n - 1 ? u : period - u;
}

}  // namespace

std::vector<double> gaussian_kernel(int kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ParamError("blur kernel size must be a positive odd integer");
  }
  if (!(sigma > 0.0)) throw ParamError("blur sigma must be positive");
  const int r = kernel_size / 2;
  std::vector<double> k(kernel_size);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return k;
}

Image gaussian_blur(const Image& img, int kernel_size, double sigma) {
  const auto kernel = gaussian_kernel(kernel_size, sigma);
  if (kernel_size > std::min(img.height(), img.width())) {
    throw ParamError("blur kernel larger than image");
  }
  if (kernel_size == 1) return img;
  const int r = kernel_size / 2;
  const int h = img.height(), w = img.width(), ch = img.channels();

  Image tmp(h, w, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += kernel[k + r] * img.at(y, reflect(x + k, w), c);
        tmp.at(y, x, c) = acc;
      }
  Image out(h, w, ch);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int k = -r; k <= r; ++k) acc += kernel[k + r] * tmp.at(reflect(y + k, h), x, c);
        out.at(y, x, c) = acc;
      }
  out.clamp();
  return out;
}

Image gaussian_noise(const Image& img, double std, SeededRng& rng) {
  if (!(std >= 0.0)) throw ParamError("noise std must be non-negative");
  Image out = img;
  if (std == 0.0) return out;
  for (double& p : out.data()) p = std::clamp(p + std * rng.normal(), 0.0, 1.0);
  return out;
}

namespace {

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

std::vector<unsigned char> jpeg_encode(const std::vector<unsigned char>& raw, int h, int w,
                                       int ch, int quality) {
  jpeg_compress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    throw IoError(std::string("JPEG encode failed: ") + jerr.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_size);
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = ch;
  cinfo.in_color_space = ch == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = static_cast<std::size_t>(w) * ch;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(raw.data() + cinfo.next_scanline * stride);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<unsigned char> out(mem, mem + mem_size);
  std::free(mem);
  return out;
}

std::vector<unsigned char> jpeg_decode(const std::vector<unsigned char>& encoded, int h, int w,
                                       int ch) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.base);
  jerr.base.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError(std::string("JPEG decode failed: ") + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, encoded.data(), static_cast<unsigned long>(encoded.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = ch == 1 ? JCS_GRAYSCALE : JCS_RGB;
  jpeg_start_decompress(&cinfo);
  if (static_cast<int>(cinfo.output_width) != w || static_cast<int>(cinfo.output_height) != h ||
      cinfo.output_components != ch) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("JPEG decode produced unexpected dimensions");
  }
  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * w * ch);
  const std::size_t stride = static_cast<std::size_t>(w) * ch;
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.data() + cinfo.output_scanline * stride;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return raw;
}

}  // namespace

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 5 || quality > 95) {
    throw ParamError("JPEG quality must be in [5, 95], got " + std::to_string(quality));
  }
  if (img.channels() != 1 && img.channels() != 3) {
    throw ParamError("JPEG supports 1 or 3 channels");
  }
  std::vector<unsigned char> raw(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data()[i], 0.0, 1.0) * 255.0));
  }
  const auto encoded = jpeg_encode(raw, img.height(), img.width(), img.channels(), quality);
  const auto decoded = jpeg_decode(encoded, img.height(), img.width(), img.channels());
  Image out(img.height(), img.width(), img.channels());
  for (std::size_t i = 0; i < decoded.size(); ++i) out.data()[i] = decoded[i] / 255.0;
  return out;
}

namespace {

// Snap coordinates that are integral up to trig round-off, so exact
// quarter turns permute pixels without interpolation error.
double snap(double u) {
  const double r = std::round(u);
  return std::abs(u - r) < 1e-9 ? r : u;
}

}  // namespace

Image affine_transform(const Image& img, const AffineParams& params) {
  if (!(params.zoom > 0.0)) throw ParamError("zoom factor must be positive");
  const int h = img.height(), w = img.width(), ch = img.channels();
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  const double inv_zoom = 1.0 / params.zoom;

  Image out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source location.
      const double dx = (x - cx - params.shift_x) * inv_zoom;
      const double dy = (y - cy - params.shift_y) * inv_zoom;
      double sx = snap(cx + cos_t * dx + sin_t * dy);
      double sy = snap(cy - sin_t * dx + cos_t * dy);
      sx = reflect_coord(sx, w);
      sy = reflect_coord(sy, h);
      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      for (int c = 0; c < ch; ++c) {
        if (fx == 0.0 && fy == 0.0) {
          out.at(y, x, c) = img.at(y0, x0, c);
          continue;
        }
        const double top = img.at(y0, x0, c) * (1 - fx) + img.at(y0, x1, c) * fx;
        const double bottom = img.at(y1, x0, c) * (1 - fx) + img.at(y1, x1, c) * fx;
        out.at(y, x, c) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  out.clamp();
  return out;
}

Image augment(const Image& img, const AugmentParams& params, SeededRng& rng) {
  AffineParams t;
  t.rotation_deg = rng.uniform(-params.rotation_deg, params.rotation_deg);
  t.shift_x = rng.uniform(-params.width_shift, params.width_shift) * img.width();
  t.shift_y = rng.uniform(-params.height_shift, params.height_shift) * img.height();
  t.zoom = rng.uniform(1.0 - params.zoom, 1.0 + params.zoom);
  return affine_transform(img, t);
}

}  // namespace veil
