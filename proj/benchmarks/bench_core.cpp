#include <benchmark/benchmark.h>

#include "veil/cloak.hpp"
#include "veil/corpus.hpp"
#include "veil/extractor.hpp"
#include "veil/imaging.hpp"
#include "veil/targeting.hpp"
#include "veil/tracker.hpp"

using namespace veil;

namespace {

Image noise_image(std::uint64_t seed) {
  SeededRng rng(seed);
  Image img(32, 32, 3);
  for (double& p : img.data()) p = rng.uniform();
  return img;
}

const FeatureExtractor& net() {
  static const FeatureExtractor phi = FeatureExtractor::initialize(ArchConfig{}, 1);
  return phi;
}

void BM_Dssim(benchmark::State& state) {
  const Image a = noise_image(1), b = noise_image(2);
  for (auto _ : state) benchmark::DoNotOptimize(dssim(a, b));
}
BENCHMARK(BM_Dssim);

void BM_DssimWithGrad(benchmark::State& state) {
  const Image a = noise_image(1), b = noise_image(2);
  for (auto _ : state) benchmark::DoNotOptimize(dssim_with_grad(a, b));
}
BENCHMARK(BM_DssimWithGrad);

void BM_Embed(benchmark::State& state) {
  const Image x = noise_image(3);
  for (auto _ : state) benchmark::DoNotOptimize(net().embed(x));
}
BENCHMARK(BM_Embed);

void BM_EmbedBatch(benchmark::State& state) {
  std::vector<Image> xs;
  for (int i = 0; i < state.range(0); ++i) xs.push_back(noise_image(10 + i));
  for (auto _ : state) benchmark::DoNotOptimize(net().embed_batch(std::span<const Image>(xs)));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EmbedBatch)->Arg(8)->Arg(32);

void BM_EmbedWithGrad(benchmark::State& state) {
  const Image x = noise_image(4);
  const Eigen::VectorXd target = net().embed(noise_image(5)).values;
  const EmbeddingLoss loss = [&](const Eigen::VectorXd& z, Eigen::VectorXd& g) {
    g = (z - target) / (z - target).norm();
    return (z - target).norm();
  };
  for (auto _ : state) benchmark::DoNotOptimize(net().embed_with_grad(x, loss));
}
BENCHMARK(BM_EmbedWithGrad);

void BM_CloakIterations(benchmark::State& state) {
  std::vector<Image> xs, ts;
  for (int i = 0; i < state.range(0); ++i) {
    xs.push_back(noise_image(100 + i));
    ts.push_back(noise_image(200 + i));
  }
  CloakParams p;
  p.iterations = 20;
  for (auto _ : state) benchmark::DoNotOptimize(compute_cloaks({&net()}, xs, ts, p));
  state.SetItemsProcessed(state.iterations() * state.range(0) * p.iterations);
}
BENCHMARK(BM_CloakIterations)->Arg(1)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_GaussianBlur(benchmark::State& state) {
  const Image x = noise_image(6);
  for (auto _ : state) benchmark::DoNotOptimize(gaussian_blur(x, 5, 1.0));
}
BENCHMARK(BM_GaussianBlur);

void BM_JpegRoundtrip(benchmark::State& state) {
  const Image x = noise_image(7);
  for (auto _ : state) benchmark::DoNotOptimize(jpeg_roundtrip(x, 50));
}
BENCHMARK(BM_JpegRoundtrip);

void BM_SelectTarget(benchmark::State& state) {
  CorpusSpec spec;
  spec.classes = 20;
  spec.images_per_class = 10;
  const auto corpus = generate_corpus(spec, 3);
  std::map<int, std::vector<Image>> cands;
  for (int k = 1; k < spec.classes; ++k) cands[k] = corpus[k];
  for (auto _ : state) {
    SeededRng rng(1);
    benchmark::DoNotOptimize(select_target(net(), corpus[0], cands, TargetMode::kMaximal, rng));
  }
}
BENCHMARK(BM_SelectTarget)->Unit(benchmark::kMillisecond);

void BM_Detectors(benchmark::State& state) {
  SeededRng rng(8);
  ClassEmbeddings emb;
  for (int k = 0; k < 20; ++k) {
    for (int i = 0; i < 24; ++i) {
      Eigen::VectorXd v(64);
      for (auto& x : v) x = rng.normal();
      emb[k].emplace_back(v);
    }
  }
  if (state.range(0) == 0) {
    for (auto _ : state) benchmark::DoNotOptimize(detect_centroid_anomaly(emb));
  } else {
    for (auto _ : state) benchmark::DoNotOptimize(detect_bimodal_classes(emb));
  }
}
BENCHMARK(BM_Detectors)->ArgName("two_means")->Arg(0)->Arg(1);

}  // namespace

BENCHMARK_MAIN();
