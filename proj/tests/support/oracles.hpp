#pragma once

#include <map>
#include <utility>
#include <vector>

#include "veil/image.hpp"
#include "veil/targeting.hpp"

namespace veil::testing {

/// SSIM with every window summed from scratch (box window, population
/// statistics, mean over channels and valid windows).
double naive_ssim(const Image& a, const Image& b, int win, double k1, double k2, double L);

struct Eig {
  std::vector<double> values;
  std::vector<std::vector<double>> vectors;  // vectors[k] is the k-th eigenvector
};

/// Cyclic Jacobi rotations on a symmetric matrix.
Eig jacobi_eigen(std::vector<std::vector<double>> a);

/// Target choice over raw pixels treated as the embedding: scores are the
/// min user-to-centroid distances; ties within 1e-9 go to the lower id.
std::pair<int, std::map<int, double>> brute_force_target(
    const std::vector<Image>& user, const std::map<int, std::vector<Image>>& candidates,
    TargetMode mode);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace veil::testing
