#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "veil/cloak.hpp"
#include "veil/corpus.hpp"
#include "veil/dataset.hpp"
#include "veil/extractor.hpp"
#include "veil/targeting.hpp"
#include "veil/tracker.hpp"

namespace veil {

enum class Scenario {
  kSharedExtractor,
  kCrossExtractor,
  kScratch,
  kBudgetSweep,
  kLabelDensity,
  kLeakSweep,
  kSybilSweep,
  kSybilJoint,
  kCountermeasureTransform,
  kRobustTracker,
  kDetection,
};

std::string to_string(Scenario s);
/// Throws ConfigError for unknown ids.
Scenario scenario_from_string(const std::string& s);
std::vector<Scenario> all_scenarios();

enum class SweepAxis { kNone, kRho, kLabels, kLeakRatio, kPerAnchor, kTransform, kExtractor, kVariant };

std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

/// Tracker-side preprocessing for the transformation countermeasure. The
/// grid value is blur sigma, noise std, JPEG quality, or the augmentation
/// strength multiplier.
enum class TransformKind { kBlur, kNoise, kJpeg, kAugment };

std::string to_string(TransformKind k);
TransformKind transform_kind_from_string(const std::string& s);

/// Apply one tracker-side transformation at strength `value`.
Image apply_transform(const Image& img, TransformKind kind, double value, SeededRng& rng);

/// Detection variants, in grid order.
enum class DetectionVariant { kDefault = 0, kEarlyStop = 1, kAverageTarget = 2 };

/// A corpus either read from disk or generated procedurally.
struct CorpusSource {
  std::optional<std::filesystem::path> root;
  CorpusSpec spec;
  std::uint64_t seed = 1;
  double split_fraction = 0.8;
  std::uint64_t split_seed = 0;

  LabeledDataset load() const;
};

/// How to obtain an extractor: load `checkpoint` if it exists, otherwise
/// train on the pretrain corpus (and save to `checkpoint` when set).
struct ExtractorSpec {
  std::string name = "phi";
  std::optional<std::filesystem::path> checkpoint;
  ArchConfig arch;
  TrainOptions train;
  int robust_epochs = 0;
  PgdConfig pgd;
};

FeatureExtractor build_extractor(const ExtractorSpec& spec, const LabeledDataset& pretrain);

struct ExperimentConfig {
  Scenario scenario = Scenario::kSharedExtractor;
  CorpusSource pretrain;
  CorpusSource tracker_data;
  std::vector<ExtractorSpec> user_extractors;
  /// Defaults to the first user extractor (the shared-extractor setting).
  std::optional<ExtractorSpec> tracker_extractor;
  CloakParams cloak;
  TargetMode target_mode = TargetMode::kMaximal;
  int max_candidates = 20;
  HeadTrainOptions head;
  ArchConfig scratch_arch;
  TrainOptions scratch_train;
  SweepAxis axis = SweepAxis::kNone;
  std::vector<double> grid;
  int repetitions = 5;
  std::uint64_t seed = 0;
  int workers = 1;
  std::optional<std::filesystem::path> output_dir;
  double leak_ratio = 0.2;  // sybil scenarios
  TransformKind transform = TransformKind::kBlur;
  double z_threshold = 3.0;
  double detection_leak_ratio = 0.5;  // uncloaked share of the user class for 2-means
  double evasion_early_stop = 0.2;

  /// Throws ConfigError.
  void validate() const;
};

/// Scenario defaults: corpora, one user extractor, axis and grid.
ExperimentConfig default_config(Scenario s);
std::vector<double> default_grid(Scenario s, TransformKind transform);
SweepAxis default_axis(Scenario s);

/// Missing keys keep default_config values for the named scenario.
/// Unknown keys and malformed values throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);

struct ExperimentRecord {
  double grid_value = 0.0;
  int repetition = 0;
  int user_label = 0;
  int target_label = -1;
  ProtectionReport report;
  std::map<std::string, double> metrics;
};

struct CurvePoint {
  double grid_value = 0.0;
  double mean_protection = 0.0;
  double std_protection = 0.0;
  double mean_normal_accuracy = 0.0;
  std::map<std::string, double> mean_metrics;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<ExperimentRecord> records;  // grid-major, then repetition
  std::vector<CurvePoint> curve;
  std::vector<std::uint64_t> repetition_seeds;
  double wall_seconds = 0.0;

  const CurvePoint& at(double grid_value) const;
};

/// Run the scenario over grid x repetitions. Repetitions are scheduled on
/// `config.workers` threads; results do not depend on the worker count.
/// With an output directory, writes report.json, records.csv, one
/// predictions CSV per record and the cloak optimizer logs (JSONL).
ExperimentReport run_experiment(const ExperimentConfig& config);

nlohmann::json to_json(const ExperimentReport& report);
/// grid,repetition,user,target,protection,normal_accuracy,<metrics...>
void write_records_csv(std::ostream& os, const ExperimentReport& report);

/// Run fn(0..n-1) on at most `workers` threads. The first exception thrown
/// is rethrown after all threads finish.
template <class Fn>
void run_bounded(std::size_t n, int workers, Fn&& fn) {
  const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < w; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace veil
