#include "veil/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "veil/errors.hpp"
#include "veil/rng.hpp"

namespace veil {

void CorpusSpec::validate() const {
  if (classes < 1) throw ParamError("corpus needs at least one class");
  if (images_per_class < 1) throw ParamError("corpus needs at least one image per class");
  if (height < 16 || width < 16) throw ParamError("corpus images must be at least 16x16");
  if (channels != 1 && channels != 3) throw ParamError("corpus images need 1 or 3 channels");
}

namespace {

using Color = std::array<double, 3>;

struct Identity {
  Color skin, hair, eye, lip, brow;
  double face_rx, face_ry;
  double hair_height, hair_width;
  double eye_dx, eye_y, eye_r;
  double brow_tilt, brow_gap;
  double nose_len;
  double mouth_y, mouth_w, mouth_curve, mouth_thick;
  bool glasses;
};

Color random_color(SeededRng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

Identity draw_identity(SeededRng& rng) {
  Identity id;
  const double tone = rng.uniform(0.35, 0.85);
  id.skin = {std::min(0.95, tone + rng.uniform(0.0, 0.1)), tone * rng.uniform(0.75, 0.95),
             tone * rng.uniform(0.55, 0.85)};
  id.hair = random_color(rng, 0.05, 0.75);
  id.eye = random_color(rng, 0.05, 0.5);
  id.lip = {rng.uniform(0.45, 0.9), rng.uniform(0.1, 0.4), rng.uniform(0.15, 0.45)};
  id.brow = random_color(rng, 0.05, 0.4);
  id.face_rx = rng.uniform(0.48, 0.68);
  id.face_ry = rng.uniform(0.62, 0.82);
  id.hair_height = rng.uniform(0.1, 0.45);
  id.hair_width = rng.uniform(0.9, 1.25);
  id.eye_dx = rng.uniform(0.18, 0.32);
  id.eye_y = rng.uniform(-0.25, -0.05);
  id.eye_r = rng.uniform(0.06, 0.12);
  id.brow_tilt = rng.uniform(-0.25, 0.25);
  id.brow_gap = rng.uniform(0.1, 0.2);
  id.nose_len = rng.uniform(0.1, 0.3);
  id.mouth_y = rng.uniform(0.25, 0.45);
  id.mouth_w = rng.uniform(0.15, 0.35);
  id.mouth_curve = rng.uniform(-0.15, 0.2);
  id.mouth_thick = rng.uniform(0.035, 0.07);
  id.glasses = rng.uniform() < 0.3;
  return id;
}

struct Pose {
  double cx, cy, scale, brightness;
  Color background;
  double noise;
};

// Soft coverage from a signed distance (negative inside), in face units.
double coverage(double sdf, double softness) {
  return std::clamp(0.5 - sdf / softness, 0.0, 1.0);
}

double ellipse_sdf(double u, double v, double cx, double cy, double rx, double ry) {
  const double du = (u - cx) / rx, dv = (v - cy) / ry;
  return (std::sqrt(du * du + dv * dv) - 1.0) * std::min(rx, ry);
}

double segment_sdf(double u, double v, double ax, double ay, double bx, double by, double r) {
  const double px = u - ax, py = v - ay, dx = bx - ax, dy = by - ay;
  const double t = std::clamp((px * dx + py * dy) / (dx * dx + dy * dy), 0.0, 1.0);
  return std::hypot(px - t * dx, py - t * dy) - r;
}

void blend(Color& dst, const Color& src, double alpha) {
  for (int k = 0; k < 3; ++k) dst[k] = dst[k] * (1.0 - alpha) + src[k] * alpha;
}

Color shade(const Identity& id, const Pose& pose, double u, double v, double softness) {
  Color c = pose.background;
  // Hair: a cap above and behind the face.
  blend(c, id.hair,
        coverage(ellipse_sdf(u, v, 0.0, -id.face_ry * 0.35, id.face_rx * id.hair_width,
                             id.face_ry * 0.55 + id.hair_height),
                 softness));
  blend(c, id.skin, coverage(ellipse_sdf(u, v, 0.0, 0.05, id.face_rx, id.face_ry), softness));
  // Eyes with highlights.
  for (double side : {-1.0, 1.0}) {
    const double ex = side * id.eye_dx;
    blend(c, {0.92, 0.92, 0.9}, coverage(ellipse_sdf(u, v, ex, id.eye_y, id.eye_r * 1.5, id.eye_r), softness));
    blend(c, id.eye, coverage(ellipse_sdf(u, v, ex, id.eye_y, id.eye_r * 0.8, id.eye_r * 0.8), softness));
    const double by = id.eye_y - id.brow_gap;
    blend(c, id.brow,
          coverage(segment_sdf(u, v, ex - 0.1, by + side * id.brow_tilt * 0.1, ex + 0.1,
                               by - side * id.brow_tilt * 0.1, 0.025),
                   softness));
    if (id.glasses) {
      const double ring = std::abs(ellipse_sdf(u, v, ex, id.eye_y, id.eye_r * 2.0, id.eye_r * 1.7)) - 0.015;
      blend(c, {0.1, 0.1, 0.12}, coverage(ring, softness));
    }
  }
  // Nose.
  Color nose = id.skin;
  for (double& ch : nose) ch *= 0.8;
  blend(c, nose, coverage(segment_sdf(u, v, 0.0, id.eye_y + 0.05, 0.0, id.eye_y + 0.05 + id.nose_len, 0.03), softness));
  // Mouth: a parabolic arc.
  const double x = std::clamp(u, -id.mouth_w, id.mouth_w);
  const double arc_y = id.mouth_y + id.mouth_curve * (1.0 - (x * x) / (id.mouth_w * id.mouth_w));
  const double mouth_sdf = std::hypot(u - x, v - arc_y) - id.mouth_thick;
  blend(c, id.lip, coverage(mouth_sdf, softness));
  return c;
}

Image render(const Identity& id, const Pose& pose, const CorpusSpec& spec, SeededRng& rng) {
  Image img(spec.height, spec.width, spec.channels);
  const double unit = 0.5 * std::min(spec.height, spec.width) * pose.scale;
  const double softness = 1.2 / unit;
  constexpr int kSub = 2;
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      Color acc{0.0, 0.0, 0.0};
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = x + (sx + 0.5) / kSub, py = y + (sy + 0.5) / kSub;
          const double u = (px - pose.cx) / unit, v = (py - pose.cy) / unit;
          const Color c = shade(id, pose, u, v, softness);
          for (int k = 0; k < 3; ++k) acc[k] += c[k] / (kSub * kSub);
        }
      }
      for (int k = 0; k < 3; ++k) acc[k] = acc[k] * pose.brightness + pose.noise * rng.normal();
      if (spec.channels == 1) {
        const double gray = 0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2];
        img.at(y, x, 0) = gray;
      } else {
        for (int k = 0; k < 3; ++k) img.at(y, x, k) = acc[k];
      }
    }
  }
  for (double& p : img.data()) p = std::round(std::clamp(p, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

}  // namespace

std::vector<std::vector<Image>> generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<std::vector<Image>> out(spec.classes);
  for (int k = 0; k < spec.classes; ++k) {
    SeededRng id_rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    const Identity id = draw_identity(id_rng);
    SeededRng img_rng = id_rng.fork(0x1a9e);
    for (int i = 0; i < spec.images_per_class; ++i) {
      Pose pose;
      pose.cx = spec.width / 2.0 + img_rng.uniform(-2.0, 2.0);
      pose.cy = spec.height / 2.0 + img_rng.uniform(-2.0, 2.0);
      pose.scale = img_rng.uniform(0.9, 1.05);
      pose.brightness = img_rng.uniform(0.85, 1.15);
      pose.background = random_color(img_rng, 0.15, 0.85);
      pose.noise = 0.015;
      out[k].push_back(render(id, pose, spec, img_rng));
    }
  }
  return out;
}

void make_desk_corpus(const CorpusSpec& spec, std::uint64_t seed,
                      const std::filesystem::path& root) {
  const auto corpus = generate_corpus(spec, seed);
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    char dir[32];
    std::snprintf(dir, sizeof dir, "class_%02zu", k);
    for (std::size_t i = 0; i < corpus[k].size(); ++i) {
      char file[32];
      std::snprintf(file, sizeof file, "img_%03zu.png", i);
      save_png(corpus[k][i], root / dir / file);
    }
  }
}

LabeledDataset desk_dataset(const CorpusSpec& spec, std::uint64_t seed, double split_fraction,
                            std::uint64_t split_seed) {
  const auto corpus = generate_corpus(spec, seed);
  LabeledDataset data;
  data.id = "desk-" + std::to_string(seed);
  data.split_fraction = split_fraction;
  data.split_seed = split_seed;
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    // Mirrors load_dataset: files sorted by name, per-class shuffle.
    const int label = static_cast<int>(k);
    SeededRng rng(mix_seed(split_seed, static_cast<std::uint64_t>(label)));
    const auto order = rng.permutation(corpus[k].size());
    const auto n_train = static_cast<std::size_t>(std::lround(split_fraction * corpus[k].size()));
    ClassImages c;
    char dir[32];
    std::snprintf(dir, sizeof dir, "class_%02zu", k);
    c.name = dir;
    for (std::size_t i = 0; i < order.size(); ++i) {
      char file[48];
      std::snprintf(file, sizeof file, "%s/img_%03zu.png", dir, order[i]);
      if (i < n_train) {
        c.train.push_back(corpus[k][order[i]]);
        c.train_paths.emplace_back(file);
      } else {
        c.test.push_back(corpus[k][order[i]]);
        c.test_paths.emplace_back(file);
      }
    }
    data.classes.emplace(label, std::move(c));
  }
  return data;
}

}  // namespace veil
