#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace veil::testing {

double naive_ssim(const Image& a, const Image& b, int win, double k1, double k2, double L) {
  const double c1 = (k1 * L) * (k1 * L), c2 = (k2 * L) * (k2 * L);
  const double n = win * win;
  double total = 0.0;
  int count = 0;
  for (int c = 0; c < a.channels(); ++c) {
    for (int i = 0; i + win <= a.height(); ++i) {
      for (int j = 0; j + win <= a.width(); ++j) {
        double ma = 0, mb = 0;
        for (int y = i; y < i + win; ++y) {
          for (int x = j; x < j + win; ++x) {
            ma += a.at(y, x, c);
            mb += b.at(y, x, c);
          }
        }
        ma /= n;
        mb /= n;
        double va = 0, vb = 0, cov = 0;
        for (int y = i; y < i + win; ++y) {
          for (int x = j; x < j + win; ++x) {
            va += (a.at(y, x, c) - ma) * (a.at(y, x, c) - ma);
            vb += (b.at(y, x, c) - mb) * (b.at(y, x, c) - mb);
            cov += (a.at(y, x, c) - ma) * (b.at(y, x, c) - mb);
          }
        }
        va /= n;
        vb /= n;
        cov /= n;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / count;
}

Eig jacobi_eigen(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  Eig e;
  for (std::size_t i = 0; i < n; ++i) {
    e.values.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    e.vectors.push_back(col);
  }
  return e;
}

std::pair<int, std::map<int, double>> brute_force_target(const std::vector<Image>& user,
                                                  const std::map<int, std::vector<Image>>& candidates,
                                                  TargetMode mode) {
  std::map<int, double> scores;
  for (const auto& [k, imgs] : candidates) {
    std::vector<double> centroid(imgs[0].size(), 0.0);
    for (const Image& im : imgs) {
      for (std::size_t i = 0; i < im.size(); ++i) centroid[i] += im.data()[i] / imgs.size();
    }
    double best = std::numeric_limits<double>::infinity();
    for (const Image& u : user) {
      double ss = 0;
      for (std::size_t i = 0; i < u.size(); ++i) ss += std::pow(u.data()[i] - centroid[i], 2);
      best = std::min(best, std::sqrt(ss));
    }
    scores[k] = best;
  }
  double mean = 0;
  for (const auto& [k, s] : scores) mean += s / scores.size();
  int chosen = -1;
  double key = 0;
  for (const auto& [k, s] : scores) {
    const double v = mode == TargetMode::kMaximal ? s : -std::abs(s - mean);
    if (chosen < 0 || v > key + 1e-9) {
      chosen = k;
      key = v;
    }
  }
  return {chosen, scores};
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = (i + j) / 2.0 + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace veil::testing
