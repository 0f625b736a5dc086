#include <doctest.h>

#include <cmath>

#include "../support/fixtures.hpp"
#include "../support/oracles.hpp"
#include "veil/errors.hpp"
#include "veil/targeting.hpp"

using namespace veil;
using veil::testing::random_image;

namespace {

Image pixel(double v) { return Image(1, 1, 1, v); }

const FeatureExtractor& pixels_1d() {
  static const FeatureExtractor phi =
      FeatureExtractor::initialize(ArchConfig::flatten_pixels(1, 1, 1), 0);
  return phi;
}

}  // namespace

TEST_CASE("one-dimensional example with a tie goes to the lowest class id") {
  const std::vector<Image> user{pixel(0.5), pixel(0.55)};
  const std::map<int, std::vector<Image>> cands{
      {4, {pixel(0.9)}}, {2, {pixel(0.05), pixel(0.15)}}, {7, {pixel(0.6)}}};
  SeededRng rng(1);
  const TargetSelection s = select_target(pixels_1d(), user, cands, TargetMode::kMaximal, rng);
  CHECK(s.candidate_count == 3);
  CHECK(s.scores.at(2) == doctest::Approx(0.4));
  CHECK(s.scores.at(4) == doctest::Approx(0.35));
  CHECK(s.scores.at(7) == doctest::Approx(0.05));
  CHECK(s.chosen_class == 2);

  // Class 2 centroid 0.1 and class 4 at 0.9 are both 0.4 from the user at 0.5.
  const std::map<int, std::vector<Image>> tied{{4, {pixel(0.9)}}, {2, {pixel(0.1)}}};
  CHECK(select_target(pixels_1d(), {pixel(0.5)}, tied, TargetMode::kMaximal, rng).chosen_class ==
        2);
}

TEST_CASE("user at 0.5 with centroids 0.1, 0.9 and 0.49 picks 0.1 over the tied 0.9") {
  const std::map<int, std::vector<Image>> cands{
      {0, {pixel(0.1)}}, {1, {pixel(0.9)}}, {2, {pixel(0.49)}}};
  SeededRng rng(8);
  const TargetSelection s = select_target(pixels_1d(), {pixel(0.5)}, cands, TargetMode::kMaximal, rng);
  CHECK(s.chosen_class == 0);
  CHECK(std::abs(s.scores.at(0) - s.scores.at(1)) < 1e-12);
}

TEST_CASE("average mode picks the score nearest the mean score") {
  const std::map<int, std::vector<Image>> cands{
      {0, {pixel(0.6)}}, {1, {pixel(0.9)}}, {2, {pixel(0.3)}}};
  SeededRng rng(2);
  // Scores 0.1, 0.4, 0.2; mean 0.2333.
  const TargetSelection s =
      select_target(pixels_1d(), {pixel(0.5)}, cands, TargetMode::kAverage, rng);
  CHECK(s.chosen_class == 2);
  CHECK(s.mode == TargetMode::kAverage);
}

TEST_CASE("a single candidate is always chosen") {
  SeededRng rng(3);
  for (TargetMode m : {TargetMode::kMaximal, TargetMode::kAverage}) {
    const TargetSelection s =
        select_target(pixels_1d(), {pixel(0.2)}, {{9, {pixel(0.2)}}}, m, rng);
    CHECK(s.chosen_class == 9);
    CHECK(s.scores.at(9) == 0.0);
  }
}

TEST_CASE("selection equals brute force on every candidate subset") {
  const FeatureExtractor phi = FeatureExtractor::initialize(ArchConfig::flatten_pixels(2, 2, 1), 0);
  SeededRng rng(4);
  for (int inst = 0; inst < 20; ++inst) {
    std::vector<Image> user;
    const int nu = 1 + static_cast<int>(rng.index(3));
    for (int i = 0; i < nu; ++i) user.push_back(random_image(2, 2, 1, rng));
    std::map<int, std::vector<Image>> pool;
    for (int k = 0; k < 6; ++k) {
      const int n = 1 + static_cast<int>(rng.index(3));
      for (int i = 0; i < n; ++i) pool[k].push_back(random_image(2, 2, 1, rng));
    }
    for (int mask = 1; mask < 64; ++mask) {
      std::map<int, std::vector<Image>> cands;
      for (int k = 0; k < 6; ++k) {
        if (mask & (1 << k)) cands[k] = pool[k];
      }
      for (TargetMode m : {TargetMode::kMaximal, TargetMode::kAverage}) {
        const auto [chosen, scores] = veil::testing::brute_force_target(user, cands, m);
        SeededRng r(5);
        const TargetSelection s = select_target(phi, user, cands, m, r, 0);
        CHECK(s.chosen_class == chosen);
        for (const auto& [k, v] : scores) CHECK(std::abs(s.scores.at(k) - v) < 1e-12);
      }
    }
  }
}

TEST_CASE("candidate cap draws a reproducible subset") {
  std::map<int, std::vector<Image>> cands;
  for (int k = 0; k < 30; ++k) cands[k] = {pixel(k / 30.0)};
  SeededRng a(6), b(6);
  const TargetSelection sa =
      select_target(pixels_1d(), {pixel(0.5)}, cands, TargetMode::kMaximal, a, 10);
  const TargetSelection sb =
      select_target(pixels_1d(), {pixel(0.5)}, cands, TargetMode::kMaximal, b, 10);
  CHECK(sa.candidate_count == 10);
  CHECK(sa.scores.size() == 10);
  CHECK(sa == sb);
  CHECK(sa.scores.count(sa.chosen_class) == 1);
}

TEST_CASE("class_centroid and invalid inputs") {
  CHECK(class_centroid(pixels_1d(), {pixel(0.7)}).values[0] == 0.7);
  const FeatureVector c = class_centroid(pixels_1d(), {pixel(0.2), pixel(0.4)});
  CHECK(c.values[0] == doctest::Approx(0.3));
  CHECK_THROWS_AS(class_centroid(pixels_1d(), {}), DatasetError);
  SeededRng rng(7);
  CHECK_THROWS(select_target(pixels_1d(), {}, {{1, {pixel(0.1)}}}, TargetMode::kMaximal, rng));
  CHECK_THROWS(select_target(pixels_1d(), {pixel(0.1)}, {}, TargetMode::kMaximal, rng));
  CHECK(target_mode_from_string("average") == TargetMode::kAverage);
  CHECK(to_string(TargetMode::kMaximal) == "maximal");
  CHECK_THROWS_AS(target_mode_from_string("median"), ParamError);
}
