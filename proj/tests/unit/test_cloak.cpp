#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "../support/fixtures.hpp"
#include "veil/cloak.hpp"
#include "veil/errors.hpp"
#include "veil/sybil.hpp"

using namespace veil;
using veil::testing::random_image;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.height = 16;
  a.width = 16;
  a.conv_widths = {4, 8};
  a.embed_dim = 16;
  return a;
}

}  // namespace

TEST_CASE("rho = 0 under a hard budget returns the input bit for bit") {
  SeededRng rng(1);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 2);
  const Image x = random_image(16, 16, 3, rng), t = random_image(16, 16, 3, rng);
  CloakParams p;
  p.rho = 0.0;
  p.iterations = 20;
  const CloakResult r = compute_cloak({&phi}, x, t, p);
  CHECK(r.cloaked == x);
  CHECK(r.final_dssim == 0.0);
  for (double d : r.delta) CHECK(d == 0.0);
  CHECK(r.final_target_distance == r.initial_target_distance);
  CHECK(r.initial_target_distance == feature_distance(phi.embed(x), phi.embed(t)));
}

TEST_CASE("with a pixel-identity extractor and no penalty the cloak converges onto the target") {
  SeededRng rng(3);
  const FeatureExtractor id = FeatureExtractor::initialize(ArchConfig::flatten_pixels(16, 16, 3), 0);
  CloakParams p;
  p.lambda_init = 0.0;
  p.hard_budget = false;
  p.learning_rate = 5.0;
  p.iterations = 1000;
  for (int t = 0; t < 3; ++t) {
    const Image x = random_image(16, 16, 3, rng, 0.1, 0.9);
    const Image target = random_image(16, 16, 3, rng, 0.1, 0.9);
    const CloakResult r = compute_cloak({&id}, x, target, p);
    // Independent check: the raw pixel distance.
    double d0 = 0, d1 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      d0 += std::pow(x.data()[i] - target.data()[i], 2);
      d1 += std::pow(r.cloaked.data()[i] - target.data()[i], 2);
    }
    CHECK(std::abs(r.initial_target_distance - std::sqrt(d0)) < 1e-9);
    CHECK(std::sqrt(d1) / std::sqrt(d0) < 0.05);
  }
}

TEST_CASE("hard budget bound holds on 50 random cloaks") {
  SeededRng rng(4);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 5);
  std::vector<Image> xs, ts;
  for (int i = 0; i < 50; ++i) {
    xs.push_back(random_image(16, 16, 3, rng));
    ts.push_back(random_image(16, 16, 3, rng));
  }
  for (double rho : {0.001, 0.007, 0.03}) {
    CloakParams p;
    p.rho = rho;
    p.iterations = 40;
    p.learning_rate = 4.0;
    const auto rs = compute_cloaks({&phi}, xs, ts, p);
    REQUIRE(rs.size() == 50);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      CHECK(dssim(xs[i], rs[i].cloaked) <= rho + 1e-6);
      CHECK(rs[i].final_target_distance <= rs[i].initial_target_distance);
      for (double v : rs[i].cloaked.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
}

TEST_CASE("batched cloaks equal one-at-a-time cloaks") {
  SeededRng rng(6);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 7);
  std::vector<Image> xs, ts;
  for (int i = 0; i < 3; ++i) {
    xs.push_back(random_image(16, 16, 3, rng));
    ts.push_back(random_image(16, 16, 3, rng));
  }
  CloakParams p;
  p.rho = 0.01;
  p.iterations = 30;
  const auto batch = compute_cloaks({&phi}, xs, ts, p);
  for (int i = 0; i < 3; ++i) {
    const CloakResult single = compute_cloak({&phi}, xs[i], ts[i], p);
    CHECK(max_abs_diff(single.cloaked, batch[i].cloaked) < 1e-9);
  }
}

TEST_CASE("two identical extractors give the same cloak as one") {
  SeededRng rng(8);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 9);
  const Image x = random_image(16, 16, 3, rng), t = random_image(16, 16, 3, rng);
  CloakParams p;
  p.rho = 0.01;
  p.iterations = 20;
  const CloakResult one = compute_cloak({&phi}, x, t, p);
  const CloakResult two = compute_cloak({&phi, &phi}, x, t, p);
  CHECK(max_abs_diff(one.cloaked, two.cloaked) < 1e-9);
}

TEST_CASE("early stop halts once the distance falls to the requested fraction") {
  SeededRng rng(10);
  const FeatureExtractor id = FeatureExtractor::initialize(ArchConfig::flatten_pixels(16, 16, 3), 0);
  const Image x = random_image(16, 16, 3, rng, 0.1, 0.9), t = random_image(16, 16, 3, rng, 0.1, 0.9);
  CloakParams p;
  p.lambda_init = 0.0;
  p.hard_budget = false;
  p.learning_rate = 5.0;
  p.iterations = 1000;
  p.early_stop_fraction = 0.5;
  const CloakResult r = compute_cloak({&id}, x, t, p);
  CHECK(r.converged);
  CHECK(r.iterations_run < 1000);
  CHECK(r.final_target_distance <= 0.5 * r.initial_target_distance);
  // One Adam step from the boundary: the stop is not far past the fraction.
  CHECK(r.final_target_distance > 0.3 * r.initial_target_distance);
}

TEST_CASE("lambda = 0 skips the penalty and the soft budget may be exceeded") {
  SeededRng rng(11);
  const FeatureExtractor id = FeatureExtractor::initialize(ArchConfig::flatten_pixels(16, 16, 3), 0);
  const Image x = random_image(16, 16, 3, rng, 0.1, 0.9), t = random_image(16, 16, 3, rng, 0.1, 0.9);
  CloakParams p;
  p.rho = 0.001;
  p.lambda_init = 0.0;
  p.hard_budget = false;
  p.iterations = 200;
  p.learning_rate = 5.0;
  const CloakResult r = compute_cloak({&id}, x, t, p);
  CHECK(r.final_dssim > p.rho);
  for (const auto& e : r.log) CHECK(e.lambda == 0.0);
}

TEST_CASE("the penalty weight doubles while over budget") {
  SeededRng rng(12);
  const FeatureExtractor id = FeatureExtractor::initialize(ArchConfig::flatten_pixels(16, 16, 3), 0);
  const Image x = random_image(16, 16, 3, rng, 0.1, 0.9), t = random_image(16, 16, 3, rng, 0.1, 0.9);
  CloakParams p;
  p.rho = 1e-5;
  p.iterations = 151;
  p.learning_rate = 20.0;
  p.hard_budget = false;
  const CloakResult r = compute_cloak({&id}, x, t, p);
  REQUIRE(r.log.size() == 4);
  CHECK(r.log[0].lambda == 10.0);
  for (std::size_t i = 1; i < r.log.size(); ++i) {
    if (r.log[i - 1].dssim > p.rho) {
      const double expected = std::min(r.log[i - 1].lambda * 2.0, p.lambda_max);
      CHECK(r.log[i].lambda >= r.log[i - 1].lambda);
      CHECK(r.log[i].lambda <= expected);
    }
  }
}

TEST_CASE("parameter validation") {
  SeededRng rng(13);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 1);
  const Image x = random_image(16, 16, 3, rng);
  CloakParams p;
  p.rho = -0.1;
  CHECK_THROWS_AS(compute_cloak({&phi}, x, x, p), ParamError);
  p = {};
  p.iterations = 0;
  CHECK_THROWS_AS(compute_cloak({&phi}, x, x, p), ParamError);
  p = {};
  p.early_stop_fraction = 1.5;
  CHECK_THROWS_AS(compute_cloak({&phi}, x, x, p), ParamError);
  p = {};
  CHECK_THROWS_AS(compute_cloak({}, x, x, p), ParamError);
  CHECK_THROWS_AS(compute_cloak({&phi}, x, Image(16, 8, 3), p), DimensionError);
  CHECK_THROWS_AS(compute_cloak({&phi}, Image(8, 8, 3), Image(8, 8, 3), p), DimensionError);
}

TEST_CASE("pair_targets draws uniformly with replacement") {
  SeededRng rng(14);
  CHECK_THROWS_AS(pair_targets(3, 0, rng), DatasetError);
  const std::size_t n = 60000, k = 6;
  const auto idx = pair_targets(n, k, rng);
  std::vector<int> counts(k, 0);
  for (std::size_t i : idx) {
    REQUIRE(i < k);
    ++counts[i];
  }
  const double mean = static_cast<double>(n) / k;
  const double sd = std::sqrt(n * (1.0 / k) * (1.0 - 1.0 / k));
  for (int c : counts) CHECK(std::abs(c - mean) < 3 * sd);
  SeededRng a(15), b(15);
  CHECK(pair_targets(10, 4, a) == pair_targets(10, 4, b));
}

TEST_CASE("cloak log lines are JSON tagged with the image id") {
  SeededRng rng(16);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 1);
  const Image x = random_image(16, 16, 3, rng), t = random_image(16, 16, 3, rng);
  CloakParams p;
  p.iterations = 60;
  p.log_every = 20;
  const CloakResult r = compute_cloak({&phi}, x, t, p);
  REQUIRE(r.log.size() == 3);
  std::ostringstream os;
  write_cloak_log(os, "img_07", r);
  std::istringstream is(os.str());
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("image") == "img_07");
    CHECK(j.at("iteration") == 20 * n);
    ++n;
  }
  CHECK(n == 3);
}

TEST_CASE("sybil images move toward their anchors") {
  SeededRng rng(17);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 18);
  SybilSpec spec;
  for (int i = 0; i < 3; ++i) spec.candidates.push_back(random_image(16, 16, 3, rng));
  for (int i = 0; i < 2; ++i) spec.anchors.push_back(random_image(16, 16, 3, rng));
  spec.per_anchor = 2;
  spec.params.rho = 0.01;
  spec.params.iterations = 40;
  const auto set = build_sybil_set({&phi}, spec, rng);
  REQUIRE(set.size() == 4);
  CHECK(set[0].anchor_index == 0);
  CHECK(set[1].anchor_index == 0);
  CHECK(set[2].anchor_index == 1);
  CHECK(set[3].anchor_index == 1);
  CHECK(set[0].candidate_index != set[1].candidate_index);
  for (const auto& s : set) {
    CHECK(s.final_distance <= s.initial_distance);
    CHECK(s.final_dssim <= 0.01 + 1e-6);
    CHECK(std::abs(s.final_distance - feature_distance(phi.embed(s.image),
                                                       phi.embed(spec.anchors[s.anchor_index]))) <
          1e-9);
  }

  std::ostringstream os;
  write_sybil_manifest(os, set, {"a", "b", "c", "d"}, {"x", "y"});
  int lines = 0;
  for (char c : os.str()) lines += c == '\n';
  CHECK(lines == 5);

  SybilSpec bad = spec;
  bad.per_anchor = 0;
  CHECK_THROWS_AS(build_sybil_set({&phi}, bad, rng), ParamError);
  bad = spec;
  bad.candidates.clear();
  CHECK_THROWS(build_sybil_set({&phi}, bad, rng));
}

TEST_CASE("pairing with a single target and empty albums") {
  SeededRng rng(19);
  for (std::size_t i : pair_targets(7, 1, rng)) CHECK(i == 0);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 1);
  CHECK(cloak_album({&phi}, {}, {Image(16, 16, 3)}, CloakParams{}, rng).empty());
}

TEST_CASE("album of 5 on the desk extractor: invariants and determinism") {
  const FeatureExtractor& phi = veil::testing::desk_extractor();
  const LabeledDataset& data = veil::testing::desk_data();
  const std::vector<Image> user(data.classes.at(0).train.begin(), data.classes.at(0).train.begin() + 5);
  const std::vector<Image>& targets = data.classes.at(7).train;
  CloakParams p;
  p.iterations = 200;
  SeededRng r1(20), r2(20);
  const auto a = cloak_album({&phi}, user, targets, p, r1);
  const auto b = cloak_album({&phi}, user, targets, p, r2);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].cloaked == b[i].cloaked);
    CHECK(a[i].cloaked.same_shape(user[i]));
    CHECK(a[i].final_dssim <= p.rho + 1e-6);
    CHECK(a[i].final_dssim == doctest::Approx(dssim(user[i], a[i].cloaked)));
    CHECK(a[i].final_target_distance <= a[i].initial_target_distance);
    CHECK(a[i].delta.size() == user[i].size());
    double worst = 0.0;
    for (std::size_t k = 0; k < user[i].size(); ++k) {
      worst = std::max(worst, std::abs(a[i].delta[k] - (a[i].cloaked.data()[k] - user[i].data()[k])));
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("desk calibration: default cloaks of 50 images stay in budget and roughly halve the distance") {
  const FeatureExtractor& phi = veil::testing::desk_extractor();
  const LabeledDataset& data = veil::testing::desk_data();
  SeededRng rng(21);
  const Samples train = train_samples(data);
  std::vector<Image> xs, ts;
  while (xs.size() < 50) {
    const std::size_t i = rng.index(train.size()), j = rng.index(train.size());
    if (train.labels[i] == train.labels[j]) continue;
    xs.push_back(*train.images[i]);
    ts.push_back(*train.images[j]);
  }
  const CloakParams p;
  const auto rs = compute_cloaks({&phi}, xs, ts, p);
  int in_budget = 0, halved = 0, gate = 0;
  std::vector<double> ratios;
  for (const auto& r : rs) {
    in_budget += r.final_dssim <= p.rho + 1e-3;
    ratios.push_back(r.final_target_distance / r.initial_target_distance);
    halved += ratios.back() <= 0.5;
    gate += ratios.back() <= 0.75;
  }
  std::sort(ratios.begin(), ratios.end());
  MESSAGE("distance ratio median " << ratios[25] << ", 90th pct " << ratios[45] << ", <= 0.5: "
                                   << halved << "/50");
  CHECK(in_budget == 50);
  CHECK(gate >= 45);
}

TEST_CASE("a sybil candidate equal to its anchor barely moves") {
  const FeatureExtractor& phi = veil::testing::desk_extractor();
  const Image& x = veil::testing::desk_data().classes.at(2).train.at(0);
  CloakParams p;
  p.iterations = 100;
  const CloakResult r = make_sybil({&phi}, x, x, p);
  CHECK(r.final_dssim < 1e-4);
  CHECK(max_abs_diff(r.cloaked, x) < 1e-3);
}

TEST_CASE("identity extractor sybil moves onto the anchor") {
  SeededRng rng(22);
  const FeatureExtractor id = FeatureExtractor::initialize(ArchConfig::flatten_pixels(16, 16, 3), 0);
  const Image c = random_image(16, 16, 3, rng, 0.1, 0.9), a = random_image(16, 16, 3, rng, 0.1, 0.9);
  CloakParams p;
  p.lambda_init = 0.0;
  p.hard_budget = false;
  p.learning_rate = 5.0;
  const CloakResult r = make_sybil({&id}, c, a, p);
  CHECK(r.final_target_distance / r.initial_target_distance < 0.05);
}

TEST_CASE("sybil set cardinality, determinism and empty pools") {
  SeededRng rng(23);
  const FeatureExtractor phi = FeatureExtractor::initialize(small_arch(), 2);
  SybilSpec spec;
  for (int i = 0; i < 4; ++i) spec.candidates.push_back(random_image(16, 16, 3, rng));
  for (int i = 0; i < 3; ++i) spec.anchors.push_back(random_image(16, 16, 3, rng));
  spec.params.iterations = 5;
  SeededRng a(24);
  const auto one = build_sybil_set({&phi}, spec, a);
  REQUIRE(one.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(one[i].anchor_index == i);
  spec.per_anchor = 2;
  SeededRng b(25), c(25);
  const auto two = build_sybil_set({&phi}, spec, b);
  const auto again = build_sybil_set({&phi}, spec, c);
  CHECK(two.size() == 6);
  for (std::size_t i = 0; i < two.size(); ++i) {
    CHECK(two[i].image == again[i].image);
    CHECK(two[i].candidate_index == again[i].candidate_index);
  }
  spec.candidates.clear();
  CHECK_THROWS_AS(build_sybil_set({&phi}, spec, b), DatasetError);
}
