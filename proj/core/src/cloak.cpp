#include "veil/cloak.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "network.hpp"
#include "veil/errors.hpp"

namespace veil {

void CloakParams::validate() const {
  if (!(rho >= 0.0)) throw ParamError("cloak budget rho must be non-negative");
  if (iterations < 1) throw ParamError("cloak iterations must be >= 1");
  if (!(learning_rate > 0.0)) throw ParamError("cloak learning rate must be positive");
  if (!(lambda_init >= 0.0)) throw ParamError("lambda_init must be non-negative");
  if (lambda_update_every < 1) throw ParamError("lambda_update_every must be >= 1");
  if (early_stop_fraction && !(*early_stop_fraction > 0.0 && *early_stop_fraction <= 1.0)) {
    throw ParamError("early_stop_fraction must be in (0, 1]");
  }
  if (bisection_steps < 0) throw ParamError("bisection_steps must be non-negative");
}

namespace {

constexpr double kTanhEps = 1e-6;

// Distance from each image to its own target embedding, averaged over the
// extractor set.
std::vector<double> mean_distances(const ExtractorSet& phis,
                                   std::span<const Image* const> images,
                                   const std::vector<std::vector<FeatureVector>>& targets) {
  std::vector<double> out(images.size(), 0.0);
  for (std::size_t k = 0; k < phis.size(); ++k) {
    const auto emb = phis[k]->embed_batch(images);
    for (std::size_t b = 0; b < images.size(); ++b) {
      out[b] += feature_distance(emb[b], targets[k][b]) / static_cast<double>(phis.size());
    }
  }
  return out;
}

Image scaled(const Image& x, const Image& end, double s) {
  Image out = x;
  if (s == 0.0) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] = std::clamp(x.data()[i] + s * (end.data()[i] - x.data()[i]), 0.0, 1.0);
  }
  return out;
}

// Largest s in [0, 1] (to bisection precision) with dssim(x, x + s (end - x)) <= rho.
Image enforce_budget(const Image& x, const Image& end, const CloakParams& params) {
  if (dssim(x, end, params.ssim) <= params.rho) return end;
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < params.bisection_steps; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (dssim(x, scaled(x, end, mid), params.ssim) <= params.rho) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return scaled(x, end, lo);
}

struct Track {
  Image current;
  Image best;
  Image stop;
  double best_score = 0.0;
  double lambda = 0.0;
  bool stopped = false;
  int iterations_run = 0;
  double last_loss = 0.0;
  double window_loss = std::numeric_limits<double>::infinity();
  bool plateaued = false;
  std::vector<double> w;
  std::unique_ptr<detail::Adam> adam;
  std::vector<CloakLogEntry> log;
};

CloakResult identity_result(const Image& x, double distance) {
  CloakResult r;
  r.cloaked = x;
  r.delta.assign(x.size(), 0.0);
  r.final_dssim = 0.0;
  r.initial_target_distance = distance;
  r.final_target_distance = distance;
  r.iterations_run = 0;
  r.converged = true;
  return r;
}

}  // namespace

std::vector<CloakResult> compute_cloaks(const ExtractorSet& phis, std::span<const Image> xs,
                                        std::span<const Image> targets,
                                        const CloakParams& params) {
  params.validate();
  if (phis.empty()) throw ParamError("cloak needs at least one feature extractor");
  if (xs.size() != targets.size()) throw ParamError("one target per image required");
  for (std::size_t b = 0; b < xs.size(); ++b) {
    require_same_shape(xs[b], targets[b], "cloak");
    for (const FeatureExtractor* phi : phis) phi->check_input(xs[b]);
  }
  const std::size_t batch = xs.size();
  if (batch == 0) return {};
  const double n_phis = static_cast<double>(phis.size());

  std::vector<const Image*> x_ptrs, t_ptrs;
  for (std::size_t b = 0; b < batch; ++b) {
    x_ptrs.push_back(&xs[b]);
    t_ptrs.push_back(&targets[b]);
  }
  std::vector<std::vector<FeatureVector>> target_emb;
  for (const FeatureExtractor* phi : phis) target_emb.push_back(phi->embed_batch(t_ptrs));
  const std::vector<double> initial = mean_distances(phis, x_ptrs, target_emb);

  std::vector<CloakResult> results(batch);
  if (params.hard_budget && params.rho == 0.0) {
    for (std::size_t b = 0; b < batch; ++b) results[b] = identity_result(xs[b], initial[b]);
    return results;
  }

  std::vector<Track> tracks(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Track& t = tracks[b];
    t.current = xs[b];
    t.best = xs[b];
    t.best_score = initial[b];
    t.lambda = params.lambda_init;
    t.w.resize(xs[b].size());
    for (std::size_t i = 0; i < t.w.size(); ++i) {
      const double p = std::clamp(xs[b].data()[i], kTanhEps, 1.0 - kTanhEps);
      t.w[i] = std::atanh(2.0 * p - 1.0);
      t.current.data()[i] = (std::tanh(t.w[i]) + 1.0) / 2.0;
    }
    t.adam = std::make_unique<detail::Adam>(t.w.size(), params.learning_rate / 255.0);
  }

  std::vector<std::size_t> active(batch);
  for (std::size_t b = 0; b < batch; ++b) active[b] = b;
  std::vector<double> grad_w;

  for (int it = 0; it < params.iterations && !active.empty(); ++it) {
    std::vector<const Image*> cur;
    for (std::size_t b : active) cur.push_back(&tracks[b].current);

    // Feature-distance term and its pixel gradient, averaged over extractors.
    std::vector<double> dist(active.size(), 0.0);
    std::vector<std::vector<double>> grad(active.size(), std::vector<double>(xs[0].size(), 0.0));
    for (std::size_t k = 0; k < phis.size(); ++k) {
      std::vector<EmbeddingLoss> losses;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const Eigen::VectorXd& tv = target_emb[k][active[a]].values;
        losses.emplace_back([&tv](const Eigen::VectorXd& e, Eigen::VectorXd& g) {
          const Eigen::VectorXd diff = e - tv;
          const double norm = diff.norm();
          if (norm > 0.0) g = diff / norm;
          return norm;
        });
      }
      const auto out = phis[k]->embed_with_grad_batch(cur, losses);
      for (std::size_t a = 0; a < active.size(); ++a) {
        dist[a] += out[a].value / n_phis;
        for (std::size_t i = 0; i < grad[a].size(); ++i) grad[a][i] += out[a].grad[i] / n_phis;
      }
    }

    std::vector<std::size_t> still_active;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t b = active[a];
      Track& t = tracks[b];
      const bool penalized = t.lambda > 0.0;
      DssimGradient ds;
      if (penalized || params.hard_budget || it % params.log_every == 0) {
        ds = dssim_with_grad(xs[b], t.current, params.ssim);
      }
      const double excess = std::max(ds.value - params.rho, 0.0);
      const double loss = dist[a] + t.lambda * excess;
      if (!std::isfinite(loss)) throw NumericalError("cloak objective is not finite");
      t.iterations_run = it + 1;
      t.last_loss = loss;

      if (it % params.log_every == 0) {
        t.log.push_back({it, loss, ds.value, dist[a], t.lambda});
      }

      const double score = params.hard_budget ? (excess > 0.0 ? std::numeric_limits<double>::infinity()
                                                              : dist[a])
                                              : loss;
      if (score < t.best_score) {
        t.best_score = score;
        t.best = t.current;
      }
      if (params.early_stop_fraction && (!params.hard_budget || excess == 0.0) &&
          dist[a] <= *params.early_stop_fraction * initial[b]) {
        t.stopped = true;
        t.stop = t.current;
        continue;
      }
      if ((it + 1) % params.lambda_update_every == 0) {
        if (loss > t.window_loss * (1.0 - 1e-3) && excess == 0.0) {
          t.plateaued = true;
        }
        t.window_loss = loss;
      }

      // Chain rule through the tanh reparametrization.
      grad_w.resize(t.w.size());
      for (std::size_t i = 0; i < t.w.size(); ++i) {
        double g = grad[a][i];
        if (excess > 0.0) g += t.lambda * ds.grad[i];
        const double th = 2.0 * t.current.data()[i] - 1.0;
        grad_w[i] = g * 0.5 * (1.0 - th * th);
      }
      t.adam->step(t.w, grad_w);
      for (std::size_t i = 0; i < t.w.size(); ++i) {
        t.current.data()[i] = (std::tanh(t.w[i]) + 1.0) / 2.0;
      }

      if (penalized && (it + 1) % params.lambda_update_every == 0) {
        t.lambda = ds.value > params.rho ? t.lambda * params.lambda_grow
                                         : t.lambda / params.lambda_shrink;
        t.lambda = std::clamp(t.lambda, params.lambda_min, params.lambda_max);
      }
      still_active.push_back(b);
    }
    active = std::move(still_active);
  }

  // Candidate selection per image.
  std::vector<Image> finals(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    Track& t = tracks[b];
    if (t.stopped) {
      finals[b] = params.hard_budget ? enforce_budget(xs[b], t.stop, params) : t.stop;
    } else {
      finals[b] = t.best;
    }
  }
  std::vector<const Image*> final_ptrs;
  for (const auto& f : finals) final_ptrs.push_back(&f);
  std::vector<double> final_dist = mean_distances(phis, final_ptrs, target_emb);

  if (params.hard_budget) {
    // The last iterate, pulled back onto the budget, can beat the best
    // feasible iterate seen during optimization.
    std::vector<Image> pulled(batch);
    std::vector<const Image*> pulled_ptrs;
    for (std::size_t b = 0; b < batch; ++b) {
      pulled[b] = tracks[b].stopped ? finals[b] : enforce_budget(xs[b], tracks[b].current, params);
      pulled_ptrs.push_back(&pulled[b]);
    }
    const auto pulled_dist = mean_distances(phis, pulled_ptrs, target_emb);
    for (std::size_t b = 0; b < batch; ++b) {
      if (pulled_dist[b] < final_dist[b]) {
        finals[b] = std::move(pulled[b]);
        final_dist[b] = pulled_dist[b];
      }
    }
  }

  for (std::size_t b = 0; b < batch; ++b) {
    // Never hand back something worse than leaving the image alone.
    if (final_dist[b] > initial[b]) {
      finals[b] = xs[b];
      final_dist[b] = initial[b];
    }
    CloakResult& r = results[b];
    r.cloaked = std::move(finals[b]);
    r.delta.resize(xs[b].size());
    for (std::size_t i = 0; i < r.delta.size(); ++i) {
      r.delta[i] = r.cloaked.data()[i] - xs[b].data()[i];
    }
    r.final_dssim = dssim(xs[b], r.cloaked, params.ssim);
    r.initial_target_distance = initial[b];
    r.final_target_distance = final_dist[b];
    r.iterations_run = tracks[b].iterations_run;
    r.converged = tracks[b].stopped || tracks[b].plateaued;
    r.log = std::move(tracks[b].log);
  }
  return results;
}

CloakResult compute_cloak(const ExtractorSet& phis, const Image& x, const Image& target,
                          const CloakParams& params) {
  return std::move(compute_cloaks(phis, std::span<const Image>(&x, 1),
                                  std::span<const Image>(&target, 1), params)
                       .front());
}

std::vector<std::size_t> pair_targets(std::size_t user_count, std::size_t target_count,
                                      SeededRng& rng) {
  if (target_count == 0) throw DatasetError("no target images to pair with");
  std::vector<std::size_t> out(user_count);
  for (auto& idx : out) idx = rng.index(target_count);
  return out;
}

std::vector<CloakResult> cloak_album(const ExtractorSet& phis,
                                     const std::vector<Image>& user_images,
                                     const std::vector<Image>& target_images,
                                     const CloakParams& params, SeededRng& rng) {
  if (user_images.empty()) return {};
  const auto pairing = pair_targets(user_images.size(), target_images.size(), rng);
  std::vector<Image> targets;
  targets.reserve(pairing.size());
  for (std::size_t idx : pairing) targets.push_back(target_images[idx]);
  return compute_cloaks(phis, user_images, targets, params);
}

void write_cloak_log(std::ostream& os, const std::string& image_id, const CloakResult& result) {
  for (const auto& e : result.log) {
    nlohmann::json j{{"image", image_id},        {"iteration", e.iteration},
                     {"loss", e.loss},           {"dssim", e.dssim},
                     {"target_distance", e.target_distance}, {"lambda", e.lambda}};
    os << j.dump() << '\n';
  }
}

}  // namespace veil
