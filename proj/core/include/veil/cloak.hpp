#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "veil/extractor.hpp"
#include "veil/image.hpp"
#include "veil/imaging.hpp"
#include "veil/rng.hpp"

namespace veil {

/// Extractors a cloak is optimized against. The distance term is the
/// unweighted mean over all of them.
using ExtractorSet = std::vector<const FeatureExtractor*>;

struct CloakParams {
  double rho = 0.007;          // DSSIM budget
  int iterations = 1000;
  // Adam step in 8-bit intensity units; the tanh-space step is this / 255.
  double learning_rate = 0.5;
  double lambda_init = 10.0;   // 0 disables the budget penalty entirely
  int lambda_update_every = 50;
  double lambda_grow = 2.0;
  double lambda_shrink = 1.5;
  double lambda_min = 1e-2;
  double lambda_max = 1e4;
  std::optional<double> early_stop_fraction;
  bool hard_budget = true;
  int bisection_steps = 20;
  int log_every = 50;
  SsimParams ssim;

  void validate() const;
};

struct CloakLogEntry {
  int iteration = 0;
  double loss = 0.0;
  double dssim = 0.0;
  double target_distance = 0.0;
  double lambda = 0.0;
};

struct CloakResult {
  Image cloaked;
  std::vector<double> delta;  // cloaked - x, per pixel
  double final_dssim = 0.0;
  double initial_target_distance = 0.0;
  double final_target_distance = 0.0;
  int iterations_run = 0;
  bool converged = false;
  std::vector<CloakLogEntry> log;
};

/// Perturb `x` so its embedding moves toward that of `target`, minimizing
///   mean_k ||phi_k(target) - phi_k(x + delta)|| + lambda * max(dssim(x, x + delta) - rho, 0)
/// over pixels parametrized as (tanh(w) + 1) / 2. The lambda penalty is
/// rescaled every `lambda_update_every` iterations. With `hard_budget` the
/// returned image satisfies dssim <= rho (a bisection on the perturbation
/// scale finishes the job); with `early_stop_fraction` f the optimization
/// halts once the distance reaches f times its initial value (on an in-budget
/// iterate when `hard_budget` is set).
CloakResult compute_cloak(const ExtractorSet& phis, const Image& x, const Image& target,
                          const CloakParams& params);

/// compute_cloak over many independent (x, target) pairs, optimized as one
/// batch. Results come back in input order.
std::vector<CloakResult> compute_cloaks(const ExtractorSet& phis, std::span<const Image> xs,
                                        std::span<const Image> targets,
                                        const CloakParams& params);

/// For every user image, the index of a uniformly drawn target image (with
/// replacement).
std::vector<std::size_t> pair_targets(std::size_t user_count, std::size_t target_count,
                                      SeededRng& rng);

/// pair_targets followed by compute_cloak for each pair.
std::vector<CloakResult> cloak_album(const ExtractorSet& phis,
                                     const std::vector<Image>& user_images,
                                     const std::vector<Image>& target_images,
                                     const CloakParams& params, SeededRng& rng);

/// One JSON object per log entry, tagged with `image_id`.
void write_cloak_log(std::ostream& os, const std::string& image_id, const CloakResult& result);

}  // namespace veil
