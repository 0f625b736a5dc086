#include "veil/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "veil/errors.hpp"
#include "veil/imaging.hpp"
#include "veil/sybil.hpp"

namespace veil {

using nlohmann::json;

namespace {

template <class E>
struct Names {
  E value;
  const char* name;
};

constexpr Names<Scenario> kScenarioNames[] = {
    {Scenario::kSharedExtractor, "shared_extractor"},
    {Scenario::kCrossExtractor, "cross_extractor"},
    {Scenario::kScratch, "scratch"},
    {Scenario::kBudgetSweep, "budget_sweep"},
    {Scenario::kLabelDensity, "label_density"},
    {Scenario::kLeakSweep, "leak_sweep"},
    {Scenario::kSybilSweep, "sybil_sweep"},
    {Scenario::kSybilJoint, "sybil_joint"},
    {Scenario::kCountermeasureTransform, "countermeasure_transform"},
    {Scenario::kRobustTracker, "robust_tracker"},
    {Scenario::kDetection, "detection"},
};

constexpr Names<SweepAxis> kAxisNames[] = {
    {SweepAxis::kNone, "none"},           {SweepAxis::kRho, "rho"},
    {SweepAxis::kLabels, "labels"},       {SweepAxis::kLeakRatio, "leak_ratio"},
    {SweepAxis::kPerAnchor, "per_anchor"}, {SweepAxis::kTransform, "transform"},
    {SweepAxis::kExtractor, "extractor"}, {SweepAxis::kVariant, "variant"},
};

constexpr Names<TransformKind> kTransformNames[] = {
    {TransformKind::kBlur, "blur"},
    {TransformKind::kNoise, "noise"},
    {TransformKind::kJpeg, "jpeg"},
    {TransformKind::kAugment, "augment"},
};

template <class E, std::size_t N>
std::string name_of(const Names<E> (&table)[N], E value) {
  for (const auto& n : table) {
    if (n.value == value) return n.name;
  }
  return "?";
}

template <class E, std::size_t N>
E value_of(const Names<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& n : table) {
    if (s == n.name) return n.value;
  }
  throw ConfigError(std::string("unknown ") + what + ": '" + s + "'");
}

}  // namespace

std::string to_string(Scenario s) { return name_of(kScenarioNames, s); }
Scenario scenario_from_string(const std::string& s) {
  return value_of(kScenarioNames, s, "scenario");
}
std::vector<Scenario> all_scenarios() {
  std::vector<Scenario> out;
  for (const auto& n : kScenarioNames) out.push_back(n.value);
  return out;
}

std::string to_string(SweepAxis a) { return name_of(kAxisNames, a); }
SweepAxis sweep_axis_from_string(const std::string& s) {
  return value_of(kAxisNames, s, "sweep axis");
}

std::string to_string(TransformKind k) { return name_of(kTransformNames, k); }
TransformKind transform_kind_from_string(const std::string& s) {
  return value_of(kTransformNames, s, "transform");
}

Image apply_transform(const Image& img, TransformKind kind, double value, SeededRng& rng) {
  switch (kind) {
    case TransformKind::kBlur: {
      if (value <= 0.0) return img;
      const int half = std::max(1, static_cast<int>(std::ceil(2.0 * value)));
      return gaussian_blur(img, 2 * half + 1, value);
    }
    case TransformKind::kNoise:
      return gaussian_noise(img, value, rng);
    case TransformKind::kJpeg:
      return jpeg_roundtrip(img, static_cast<int>(std::lround(value)));
    case TransformKind::kAugment: {
      if (value <= 0.0) return img;
      AugmentParams p;
      p.rotation_deg *= value;
      p.width_shift *= value;
      p.height_shift *= value;
      p.zoom *= value;
      return augment(img, p, rng);
    }
  }
  return img;
}

LabeledDataset CorpusSource::load() const {
  if (root) return load_dataset(*root, split_fraction, split_seed);
  return desk_dataset(spec, seed, split_fraction, split_seed);
}

FeatureExtractor build_extractor(const ExtractorSpec& spec, const LabeledDataset& pretrain) {
  if (spec.checkpoint && std::filesystem::exists(*spec.checkpoint)) {
    FeatureExtractor phi = FeatureExtractor::load(*spec.checkpoint);
    if (!(phi.arch() == spec.arch)) {
      throw ConfigError("checkpoint " + spec.checkpoint->string() +
                        " does not match the configured architecture");
    }
    return phi;
  }
  FeatureExtractor phi = spec.arch.flatten ? FeatureExtractor::initialize(spec.arch, 0)
                                           : train_extractor(pretrain, spec.arch, spec.train);
  if (spec.robust_epochs > 0) {
    phi = robust_train(phi, pretrain, spec.robust_epochs, spec.pgd,
                       mix_seed(spec.train.seed, 0x7062), spec.train);
  }
  if (spec.checkpoint) {
    if (spec.checkpoint->has_parent_path()) {
      std::filesystem::create_directories(spec.checkpoint->parent_path());
    }
    phi.save(*spec.checkpoint);
  }
  return phi;
}

// ---------------------------------------------------------------------------
// Defaults and validation

SweepAxis default_axis(Scenario s) {
  switch (s) {
    case Scenario::kSharedExtractor:
    case Scenario::kScratch:
      return SweepAxis::kNone;
    case Scenario::kCrossExtractor:
      return SweepAxis::kExtractor;
    case Scenario::kBudgetSweep:
    case Scenario::kRobustTracker:
      return SweepAxis::kRho;
    case Scenario::kLabelDensity:
      return SweepAxis::kLabels;
    case Scenario::kLeakSweep:
      return SweepAxis::kLeakRatio;
    case Scenario::kSybilSweep:
    case Scenario::kSybilJoint:
      return SweepAxis::kPerAnchor;
    case Scenario::kCountermeasureTransform:
      return SweepAxis::kTransform;
    case Scenario::kDetection:
      return SweepAxis::kVariant;
  }
  return SweepAxis::kNone;
}

std::vector<double> default_grid(Scenario s, TransformKind transform) {
  switch (s) {
    case Scenario::kSharedExtractor:
    case Scenario::kScratch:
      return {0.0};
    case Scenario::kCrossExtractor:
      return {0.0, 1.0};
    case Scenario::kBudgetSweep:
      return {0.0005, 0.001, 0.002, 0.004, 0.007};
    case Scenario::kRobustTracker:
      return {0.003, 0.007, 0.012, 0.02};
    case Scenario::kLabelDensity:
      return {2, 4, 6, 8, 10};
    case Scenario::kLeakSweep:
      return {0.0, 0.1, 0.2, 0.3, 0.5};
    case Scenario::kSybilSweep:
    case Scenario::kSybilJoint:
      return {0, 1, 2};
    case Scenario::kCountermeasureTransform:
      switch (transform) {
        case TransformKind::kBlur: return {0.0, 0.5, 1.0, 1.5, 2.0};
        case TransformKind::kNoise: return {0.0, 0.02, 0.05, 0.08, 0.12};
        case TransformKind::kJpeg: return {95, 75, 50, 20, 5};
        case TransformKind::kAugment: return {0.0, 0.5, 1.0};
      }
      break;
    case Scenario::kDetection:
      return {0, 1, 2};
  }
  return {0.0};
}

namespace {

ExtractorSpec plain_extractor(const std::string& name, std::uint64_t seed,
                              std::vector<int> widths = {16, 32, 64}) {
  ExtractorSpec e;
  e.name = name;
  e.arch.conv_widths = std::move(widths);
  e.train.seed = seed;
  return e;
}

ExtractorSpec robust_extractor(const std::string& name, std::uint64_t seed) {
  ExtractorSpec e = plain_extractor(name, seed);
  e.robust_epochs = 5;
  e.pgd = PgdConfig{7, 2.0 / 255.0, 8.0 / 255.0};
  return e;
}

}  // namespace

ExperimentConfig default_config(Scenario s) {
  ExperimentConfig c;
  c.scenario = s;
  c.pretrain.spec.classes = 40;
  c.pretrain.seed = 1;
  c.pretrain.split_seed = 11;
  c.tracker_data.spec.classes = 20;
  c.tracker_data.seed = 2;
  c.tracker_data.split_seed = 12;
  c.user_extractors = {plain_extractor("phi", 5)};
  c.axis = default_axis(s);
  c.grid = default_grid(s, c.transform);
  switch (s) {
    case Scenario::kCrossExtractor:
      c.user_extractors = {plain_extractor("phi", 5), robust_extractor("phi_robust", 5)};
      c.tracker_extractor = plain_extractor("tracker", 6, {24, 48, 96});
      break;
    case Scenario::kSybilJoint:
      c.user_extractors = {plain_extractor("phi", 5), plain_extractor("phi_b", 7, {24, 48, 96})};
      c.tracker_extractor = plain_extractor("tracker", 6, {24, 48, 96});
      break;
    case Scenario::kRobustTracker:
      c.tracker_extractor = robust_extractor("tracker_robust", 5);
      break;
    default:
      break;
  }
  return c;
}

void ExperimentConfig::validate() const {
  try {
    if (grid.empty()) throw ConfigError("sweep grid is empty");
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (user_extractors.empty()) throw ConfigError("at least one user extractor is required");
    if (max_candidates < 0) throw ConfigError("max_candidates must be >= 0");
    for (const auto& e : user_extractors) e.arch.validate();
    if (tracker_extractor) tracker_extractor->arch.validate();
    cloak.validate();
    pretrain.spec.validate();
    tracker_data.spec.validate();
    if (!(leak_ratio >= 0.0 && leak_ratio <= 1.0)) throw ConfigError("leak_ratio must be in [0,1]");
    if (!(detection_leak_ratio >= 0.0 && detection_leak_ratio <= 1.0)) {
      throw ConfigError("detection leak_ratio must be in [0,1]");
    }
    if (!(evasion_early_stop > 0.0 && evasion_early_stop <= 1.0)) {
      throw ConfigError("evasion early_stop_fraction must be in (0,1]");
    }
    const SweepAxis expected = default_axis(scenario);
    if (axis != expected) {
      throw ConfigError("scenario " + to_string(scenario) + " sweeps '" + to_string(expected) +
                        "', not '" + to_string(axis) + "'");
    }
    for (double g : grid) {
      if (!std::isfinite(g)) throw ConfigError("grid values must be finite");
      switch (axis) {
        case SweepAxis::kRho:
          if (g < 0.0) throw ConfigError("rho grid values must be >= 0");
          break;
        case SweepAxis::kLabels:
          if (g < 2 || g != std::floor(g)) throw ConfigError("label counts must be integers >= 2");
          break;
        case SweepAxis::kLeakRatio:
          if (g < 0.0 || g > 1.0) throw ConfigError("leak ratios must be in [0,1]");
          break;
        case SweepAxis::kPerAnchor:
          if (g < 0 || g != std::floor(g)) throw ConfigError("per_anchor values must be integers >= 0");
          break;
        case SweepAxis::kExtractor:
          if (g < 0 || g != std::floor(g) || g >= static_cast<double>(user_extractors.size())) {
            throw ConfigError("extractor grid values must index user_extractors");
          }
          break;
        case SweepAxis::kVariant:
          if (g != 0 && g != 1 && g != 2) throw ConfigError("detection variants are 0, 1, 2");
          break;
        case SweepAxis::kTransform:
          if (transform == TransformKind::kJpeg && (g < 5 || g > 95)) {
            throw ConfigError("JPEG quality must be in [5,95]");
          }
          if (transform != TransformKind::kJpeg && g < 0.0) {
            throw ConfigError("transform strengths must be >= 0");
          }
          break;
        case SweepAxis::kNone:
          break;
      }
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON

namespace {

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_arch(const json& j, ArchConfig& a) {
  check_keys(j, {"height", "width", "channels", "conv_widths", "embed_dim", "flatten"}, "arch");
  read(j, "height", a.height);
  read(j, "width", a.width);
  read(j, "channels", a.channels);
  read(j, "conv_widths", a.conv_widths);
  read(j, "embed_dim", a.embed_dim);
  read(j, "flatten", a.flatten);
}

json arch_json(const ArchConfig& a) {
  return {{"height", a.height},   {"width", a.width},         {"channels", a.channels},
          {"conv_widths", a.conv_widths}, {"embed_dim", a.embed_dim}, {"flatten", a.flatten}};
}

void read_train(const json& j, TrainOptions& t) {
  check_keys(j, {"epochs", "batch_size", "learning_rate", "seed"}, "train");
  read(j, "epochs", t.epochs);
  read(j, "batch_size", t.batch_size);
  read(j, "learning_rate", t.learning_rate);
  read(j, "seed", t.seed);
}

json train_json(const TrainOptions& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate}, {"seed", t.seed}};
}

void read_extractor(const json& j, ExtractorSpec& e) {
  check_keys(j, {"name", "checkpoint", "arch", "train", "robust_epochs", "pgd"}, "extractor");
  read(j, "name", e.name);
  if (j.contains("checkpoint")) e.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("arch")) read_arch(j.at("arch"), e.arch);
  if (j.contains("train")) read_train(j.at("train"), e.train);
  read(j, "robust_epochs", e.robust_epochs);
  if (j.contains("pgd")) {
    const json& p = j.at("pgd");
    check_keys(p, {"steps", "step_size", "epsilon"}, "pgd");
    read(p, "steps", e.pgd.steps);
    read(p, "step_size", e.pgd.step_size);
    read(p, "epsilon", e.pgd.epsilon);
  }
}

json extractor_json(const ExtractorSpec& e) {
  json j = {{"name", e.name},
            {"arch", arch_json(e.arch)},
            {"train", train_json(e.train)},
            {"robust_epochs", e.robust_epochs},
            {"pgd", {{"steps", e.pgd.steps}, {"step_size", e.pgd.step_size},
                     {"epsilon", e.pgd.epsilon}}}};
  if (e.checkpoint) j["checkpoint"] = e.checkpoint->string();
  return j;
}

void read_corpus(const json& j, CorpusSource& c, const std::string& where) {
  check_keys(j, {"root", "classes", "images_per_class", "height", "width", "channels", "seed",
                 "split_fraction", "split_seed"},
             where);
  if (j.contains("root")) c.root = j.at("root").get<std::string>();
  read(j, "classes", c.spec.classes);
  read(j, "images_per_class", c.spec.images_per_class);
  read(j, "height", c.spec.height);
  read(j, "width", c.spec.width);
  read(j, "channels", c.spec.channels);
  read(j, "seed", c.seed);
  read(j, "split_fraction", c.split_fraction);
  read(j, "split_seed", c.split_seed);
}

json corpus_json(const CorpusSource& c) {
  json j = {{"classes", c.spec.classes}, {"images_per_class", c.spec.images_per_class},
            {"height", c.spec.height},   {"width", c.spec.width},
            {"channels", c.spec.channels}, {"seed", c.seed},
            {"split_fraction", c.split_fraction}, {"split_seed", c.split_seed}};
  if (c.root) j["root"] = c.root->string();
  return j;
}

void read_cloak(const json& j, CloakParams& p) {
  check_keys(j, {"rho", "iterations", "learning_rate", "lambda_init", "lambda_update_every",
                 "lambda_grow", "lambda_shrink", "lambda_min", "lambda_max",
                 "early_stop_fraction", "hard_budget", "bisection_steps", "log_every"},
             "cloak");
  read(j, "rho", p.rho);
  read(j, "iterations", p.iterations);
  read(j, "learning_rate", p.learning_rate);
  read(j, "lambda_init", p.lambda_init);
  read(j, "lambda_update_every", p.lambda_update_every);
  read(j, "lambda_grow", p.lambda_grow);
  read(j, "lambda_shrink", p.lambda_shrink);
  read(j, "lambda_min", p.lambda_min);
  read(j, "lambda_max", p.lambda_max);
  if (j.contains("early_stop_fraction")) {
    if (j.at("early_stop_fraction").is_null()) {
      p.early_stop_fraction.reset();
    } else {
      p.early_stop_fraction = j.at("early_stop_fraction").get<double>();
    }
  }
  read(j, "hard_budget", p.hard_budget);
  read(j, "bisection_steps", p.bisection_steps);
  read(j, "log_every", p.log_every);
}

json cloak_json(const CloakParams& p) {
  json j = {{"rho", p.rho},
            {"iterations", p.iterations},
            {"learning_rate", p.learning_rate},
            {"lambda_init", p.lambda_init},
            {"lambda_update_every", p.lambda_update_every},
            {"lambda_grow", p.lambda_grow},
            {"lambda_shrink", p.lambda_shrink},
            {"lambda_min", p.lambda_min},
            {"lambda_max", p.lambda_max},
            {"hard_budget", p.hard_budget},
            {"bisection_steps", p.bisection_steps},
            {"log_every", p.log_every}};
  j["early_stop_fraction"] =
      p.early_stop_fraction ? json(*p.early_stop_fraction) : json(nullptr);
  return j;
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  try {
    check_keys(j, {"scenario", "pretrain", "tracker_data", "user_extractors", "tracker_extractor",
                   "cloak", "target_mode", "max_candidates", "head", "scratch", "sweep",
                   "repetitions", "seed", "workers", "output_dir", "leak_ratio", "transform",
                   "detection"},
               "config");
    if (!j.contains("scenario")) throw ConfigError("config needs a 'scenario'");
    const Scenario s = scenario_from_string(j.at("scenario").get<std::string>());
    ExperimentConfig c = default_config(s);
    if (j.contains("pretrain")) read_corpus(j.at("pretrain"), c.pretrain, "pretrain");
    if (j.contains("tracker_data")) read_corpus(j.at("tracker_data"), c.tracker_data, "tracker_data");
    if (j.contains("user_extractors")) {
      const json& list = j.at("user_extractors");
      if (!list.is_array()) throw ConfigError("user_extractors must be a list");
      c.user_extractors.clear();
      for (const auto& e : list) {
        ExtractorSpec spec;
        read_extractor(e, spec);
        c.user_extractors.push_back(std::move(spec));
      }
    }
    if (j.contains("tracker_extractor")) {
      if (j.at("tracker_extractor").is_null()) {
        c.tracker_extractor.reset();
      } else {
        ExtractorSpec spec = c.tracker_extractor.value_or(ExtractorSpec{});
        read_extractor(j.at("tracker_extractor"), spec);
        c.tracker_extractor = std::move(spec);
      }
    }
    if (j.contains("cloak")) read_cloak(j.at("cloak"), c.cloak);
    if (j.contains("target_mode")) {
      try {
        c.target_mode = target_mode_from_string(j.at("target_mode").get<std::string>());
      } catch (const ParamError& e) {
        throw ConfigError(e.what());
      }
    }
    read(j, "max_candidates", c.max_candidates);
    if (j.contains("head")) {
      const json& h = j.at("head");
      check_keys(h, {"epochs", "learning_rate", "batch_size", "seed"}, "head");
      read(h, "epochs", c.head.epochs);
      read(h, "learning_rate", c.head.learning_rate);
      read(h, "batch_size", c.head.batch_size);
      read(h, "seed", c.head.seed);
    }
    if (j.contains("scratch")) {
      const json& sc = j.at("scratch");
      check_keys(sc, {"arch", "train"}, "scratch");
      if (sc.contains("arch")) read_arch(sc.at("arch"), c.scratch_arch);
      if (sc.contains("train")) read_train(sc.at("train"), c.scratch_train);
    }
    if (j.contains("transform")) {
      c.transform = transform_kind_from_string(j.at("transform").get<std::string>());
      c.grid = default_grid(s, c.transform);
    }
    if (j.contains("sweep")) {
      const json& sw = j.at("sweep");
      check_keys(sw, {"axis", "grid"}, "sweep");
      if (sw.contains("axis")) c.axis = sweep_axis_from_string(sw.at("axis").get<std::string>());
      read(sw, "grid", c.grid);
    }
    read(j, "repetitions", c.repetitions);
    read(j, "seed", c.seed);
    read(j, "workers", c.workers);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read(j, "leak_ratio", c.leak_ratio);
    if (j.contains("detection")) {
      const json& d = j.at("detection");
      check_keys(d, {"z_threshold", "leak_ratio", "early_stop_fraction"}, "detection");
      read(d, "z_threshold", c.z_threshold);
      read(d, "leak_ratio", c.detection_leak_ratio);
      read(d, "early_stop_fraction", c.evasion_early_stop);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config value: ") + e.what());
  }
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["scenario"] = to_string(c.scenario);
  j["pretrain"] = corpus_json(c.pretrain);
  j["tracker_data"] = corpus_json(c.tracker_data);
  j["user_extractors"] = json::array();
  for (const auto& e : c.user_extractors) j["user_extractors"].push_back(extractor_json(e));
  j["tracker_extractor"] = c.tracker_extractor ? extractor_json(*c.tracker_extractor) : json(nullptr);
  j["cloak"] = cloak_json(c.cloak);
  j["target_mode"] = to_string(c.target_mode);
  j["max_candidates"] = c.max_candidates;
  j["head"] = {{"epochs", c.head.epochs}, {"learning_rate", c.head.learning_rate},
               {"batch_size", c.head.batch_size}, {"seed", c.head.seed}};
  j["scratch"] = {{"arch", arch_json(c.scratch_arch)}, {"train", train_json(c.scratch_train)}};
  j["sweep"] = {{"axis", to_string(c.axis)}, {"grid", c.grid}};
  j["repetitions"] = c.repetitions;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  if (c.output_dir) j["output_dir"] = c.output_dir->string();
  j["leak_ratio"] = c.leak_ratio;
  j["transform"] = to_string(c.transform);
  j["detection"] = {{"z_threshold", c.z_threshold}, {"leak_ratio", c.detection_leak_ratio},
                    {"early_stop_fraction", c.evasion_early_stop}};
  return j;
}

// ---------------------------------------------------------------------------
// Scenario execution

namespace {

struct World {
  const ExperimentConfig& cfg;
  LabeledDataset pretrain;
  LabeledDataset tracker;
  std::map<int, std::vector<Image>> candidates;
  std::vector<FeatureExtractor> users;
  FeatureExtractor tracker_phi;
};

std::vector<std::string> prefixed(const std::vector<std::string>& paths, const std::string& p) {
  std::vector<std::string> out;
  for (const auto& s : paths) out.push_back(p + s);
  return out;
}

/// Replace the user's train images (and their provenance names).
LabeledDataset with_user_train(const LabeledDataset& data, int user, std::vector<Image> train,
                               std::vector<std::string> names) {
  LabeledDataset out = data;
  out.classes.at(user).train = std::move(train);
  out.classes.at(user).train_paths = std::move(names);
  return out;
}

int add_class(LabeledDataset& data, ClassImages c) {
  const int label = data.classes.empty() ? 0 : data.classes.rbegin()->first + 1;
  data.classes.emplace(label, std::move(c));
  return label;
}

ProtectionReport score(const Classifier& model, const LabeledDataset& data, int user) {
  Samples others;
  std::vector<std::string> other_names;
  for (const auto& [label, c] : data.classes) {
    if (label == user) continue;
    for (std::size_t i = 0; i < c.test.size(); ++i) {
      others.images.push_back(&c.test[i]);
      others.labels.push_back(label);
      other_names.push_back(i < c.test_paths.size() ? c.test_paths[i] : c.name);
    }
  }
  const ClassImages& u = data.classes.at(user);
  return evaluate_protection(model, user, u.test, others, u.test_paths, other_names);
}

void add_cloak_metrics(std::map<std::string, double>& m, const std::vector<CloakResult>& rs) {
  if (rs.empty()) return;
  double dssim_sum = 0.0, dssim_max = 0.0, ratio = 0.0;
  for (const auto& r : rs) {
    dssim_sum += r.final_dssim;
    dssim_max = std::max(dssim_max, r.final_dssim);
    ratio += r.initial_target_distance > 0.0
                 ? r.final_target_distance / r.initial_target_distance
                 : 1.0;
  }
  const double n = static_cast<double>(rs.size());
  m["mean_dssim"] = dssim_sum / n;
  m["max_dssim"] = dssim_max;
  m["mean_distance_ratio"] = ratio / n;
}

class RepRunner {
 public:
  RepRunner(const World& w, int rep, std::uint64_t seed, std::ostream* log)
      : w_(w), cfg_(w.cfg), rep_(rep), seed_(seed), base_(seed), log_(log) {
    SeededRng pick = base_.fork(1);
    const auto labels = w.tracker.labels();
    user_ = labels[pick.index(labels.size())];
  }

  std::vector<ExperimentRecord> run() {
    switch (cfg_.scenario) {
      case Scenario::kSharedExtractor:
      case Scenario::kScratch:
      case Scenario::kBudgetSweep:
      case Scenario::kRobustTracker:
      case Scenario::kCrossExtractor:
        return run_cloak_axis();
      case Scenario::kLabelDensity:
        return run_label_density();
      case Scenario::kLeakSweep:
        return run_leak();
      case Scenario::kSybilSweep:
      case Scenario::kSybilJoint:
        return run_sybil();
      case Scenario::kCountermeasureTransform:
        return run_transform();
      case Scenario::kDetection:
        return run_detection();
    }
    return {};
  }

 private:
  const ClassImages& user_class() const { return w_.tracker.classes.at(user_); }

  ExtractorSet user_set(std::size_t only) const {
    return {&w_.users.at(only)};
  }
  ExtractorSet joint_set() const {
    ExtractorSet s;
    for (const auto& u : w_.users) s.push_back(&u);
    return s;
  }

  TargetSelection choose_target(const FeatureExtractor& phi, TargetMode mode) const {
    SeededRng rng = base_.fork(2);
    return select_target(phi, user_class().train, w_.candidates, mode, rng, cfg_.max_candidates);
  }

  std::vector<CloakResult> cloak_user(const ExtractorSet& set, const TargetSelection& sel,
                                      const CloakParams& params, const std::string& tag) {
    SeededRng pairing = base_.fork(3);
    auto results = cloak_album(set, user_class().train, w_.candidates.at(sel.chosen_class),
                               params, pairing);
    if (log_) {
      for (std::size_t i = 0; i < results.size(); ++i) {
        write_cloak_log(*log_, tag + "/" + user_class().train_paths.at(i), results[i]);
      }
    }
    return results;
  }

  static std::vector<Image> cloaked_images(const std::vector<CloakResult>& rs) {
    std::vector<Image> out;
    for (const auto& r : rs) out.push_back(r.cloaked);
    return out;
  }

  Classifier train_tracker(const LabeledDataset& data) const {
    if (cfg_.scenario == Scenario::kScratch) {
      TrainOptions opt = cfg_.scratch_train;
      opt.seed = mix_seed(seed_, 0x5c);
      return scratch_train(cfg_.scratch_arch, data, opt);
    }
    HeadTrainOptions opt = cfg_.head;
    opt.seed = mix_seed(seed_, 0x4e);
    return transfer_train(w_.tracker_phi, data, opt);
  }

  ExperimentRecord record(double g, int target, ProtectionReport rep) const {
    ExperimentRecord r;
    r.grid_value = g;
    r.repetition = rep_;
    r.user_label = user_;
    r.target_label = target;
    r.report = std::move(rep);
    return r;
  }

  void add_baseline(ExperimentRecord& r, const LabeledDataset& clean) const {
    const ProtectionReport b = score(train_tracker(clean), clean, user_);
    r.metrics["baseline_protection"] = b.protection_success_rate;
    r.metrics["baseline_normal_accuracy"] = b.normal_accuracy;
  }

  std::string grid_tag(std::size_t gi) const {
    return "rep" + std::to_string(rep_) + "/g" + std::to_string(gi);
  }

  // shared_extractor, scratch, budget_sweep, robust_tracker, cross_extractor
  std::vector<ExperimentRecord> run_cloak_axis() {
    std::vector<ExperimentRecord> out;
    std::optional<ProtectionReport> baseline;
    for (std::size_t gi = 0; gi < cfg_.grid.size(); ++gi) {
      const double g = cfg_.grid[gi];
      CloakParams params = cfg_.cloak;
      std::size_t ext = 0;
      if (cfg_.axis == SweepAxis::kRho) params.rho = g;
      if (cfg_.axis == SweepAxis::kExtractor) ext = static_cast<std::size_t>(g);
      const TargetSelection sel = choose_target(w_.users[ext], cfg_.target_mode);
      const auto cloaks = cloak_user(user_set(ext), sel, params, grid_tag(gi));
      const LabeledDataset poisoned =
          with_user_train(w_.tracker, user_, cloaked_images(cloaks),
                          prefixed(user_class().train_paths, "cloaked/"));
      ExperimentRecord r = record(g, sel.chosen_class, score(train_tracker(poisoned), poisoned, user_));
      if (!baseline) baseline = score(train_tracker(w_.tracker), w_.tracker, user_);
      r.metrics["baseline_protection"] = baseline->protection_success_rate;
      r.metrics["baseline_normal_accuracy"] = baseline->normal_accuracy;
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  std::vector<ExperimentRecord> run_label_density() {
    const TargetSelection sel = choose_target(w_.users[0], cfg_.target_mode);
    const auto cloaks = cloak_user(user_set(0), sel, cfg_.cloak, grid_tag(0));
    const LabeledDataset poisoned = with_user_train(
        w_.tracker, user_, cloaked_images(cloaks), prefixed(user_class().train_paths, "cloaked/"));
    std::vector<int> others;
    for (int l : w_.tracker.labels()) {
      if (l != user_) others.push_back(l);
    }
    SeededRng rng = base_.fork(5);
    const auto order = rng.permutation(others.size());
    std::vector<ExperimentRecord> out;
    for (double g : cfg_.grid) {
      const auto n = static_cast<std::size_t>(g);
      if (n - 1 > others.size()) {
        throw ConfigError("label count " + std::to_string(n) + " exceeds the tracker's classes");
      }
      std::vector<int> keep{user_};
      for (std::size_t i = 0; i + 1 < n; ++i) keep.push_back(others[order[i]]);
      const LabeledDataset sub = poisoned.subset(keep);
      ExperimentRecord r = record(g, sel.chosen_class, score(train_tracker(sub), sub, user_));
      add_baseline(r, w_.tracker.subset(keep));
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  /// Train images for a leak ratio: the first round(l * n) of a fixed
  /// permutation stay original, the rest are cloaked.
  std::pair<std::vector<Image>, std::vector<std::string>> mixed_train(
      const std::vector<CloakResult>& cloaks, const std::vector<std::size_t>& order,
      double leak, std::vector<std::size_t>* cloaked_idx) const {
    const ClassImages& u = user_class();
    const auto n_leak = static_cast<std::size_t>(std::lround(leak * static_cast<double>(u.train.size())));
    std::vector<bool> leaked(u.train.size(), false);
    for (std::size_t i = 0; i < n_leak; ++i) leaked[order[i]] = true;
    std::vector<Image> imgs;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < u.train.size(); ++i) {
      if (leaked[i]) {
        imgs.push_back(u.train[i]);
        names.push_back("leaked/" + u.train_paths[i]);
      } else {
        imgs.push_back(cloaks[i].cloaked);
        names.push_back("cloaked/" + u.train_paths[i]);
        if (cloaked_idx) cloaked_idx->push_back(i);
      }
    }
    return {std::move(imgs), std::move(names)};
  }

  std::vector<std::size_t> leak_order() const {
    SeededRng rng = base_.fork(6);
    return rng.permutation(user_class().train.size());
  }

  std::vector<ExperimentRecord> run_leak() {
    const TargetSelection sel = choose_target(w_.users[0], cfg_.target_mode);
    const auto cloaks = cloak_user(user_set(0), sel, cfg_.cloak, grid_tag(0));
    const auto order = leak_order();
    std::vector<ExperimentRecord> out;
    for (double g : cfg_.grid) {
      auto [imgs, names] = mixed_train(cloaks, order, g, nullptr);
      const LabeledDataset data = with_user_train(w_.tracker, user_, std::move(imgs), std::move(names));
      ExperimentRecord r = record(g, sel.chosen_class, score(train_tracker(data), data, user_));
      r.metrics["leaked_count"] = std::lround(g * static_cast<double>(user_class().train.size()));
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  std::vector<ExperimentRecord> run_sybil() {
    const bool joint = cfg_.scenario == Scenario::kSybilJoint;
    const ExtractorSet set = joint ? joint_set() : user_set(0);
    const TargetSelection sel = choose_target(w_.users[0], cfg_.target_mode);
    const auto cloaks = cloak_user(set, sel, cfg_.cloak, grid_tag(0));
    std::vector<std::size_t> a_idx;
    auto [imgs, names] = mixed_train(cloaks, leak_order(), cfg_.leak_ratio, &a_idx);
    const LabeledDataset leaked = with_user_train(w_.tracker, user_, std::move(imgs), std::move(names));

    // The Sybil identity: one public class other than the cloak target.
    std::vector<int> pool_labels;
    for (const auto& [l, imgs_l] : w_.candidates) {
      if (l != sel.chosen_class) pool_labels.push_back(l);
    }
    SeededRng pick = base_.fork(7);
    const int sybil_source = pool_labels.at(pick.index(pool_labels.size()));

    std::vector<ExperimentRecord> out;
    for (std::size_t gi = 0; gi < cfg_.grid.size(); ++gi) {
      const double g = cfg_.grid[gi];
      const int per_anchor = static_cast<int>(g);
      LabeledDataset data = leaked;
      std::map<std::string, double> sybil_metrics;
      if (per_anchor > 0 && !a_idx.empty()) {
        SybilSpec spec;
        spec.candidates = w_.candidates.at(sybil_source);
        for (std::size_t i : a_idx) spec.anchors.push_back(user_class().train[i]);
        spec.per_anchor = per_anchor;
        spec.params = cfg_.cloak;
        SeededRng rng = base_.fork(8);
        const auto sybils = build_sybil_set(set, spec, rng);
        ClassImages c;
        c.name = "sybil";
        double ratio = 0.0;
        for (std::size_t k = 0; k < sybils.size(); ++k) {
          c.train.push_back(sybils[k].image);
          c.train_paths.push_back("sybil/" + std::to_string(k) + "_anchor_" +
                                  user_class().train_paths[a_idx[sybils[k].anchor_index]]);
          ratio += sybils[k].initial_distance > 0.0
                       ? sybils[k].final_distance / sybils[k].initial_distance
                       : 1.0;
        }
        const int label = add_class(data, std::move(c));
        sybil_metrics["sybil_label"] = label;
        sybil_metrics["sybil_count"] = static_cast<double>(sybils.size());
        sybil_metrics["sybil_distance_ratio"] = ratio / static_cast<double>(sybils.size());
      } else {
        sybil_metrics["sybil_count"] = 0.0;
      }
      ExperimentRecord r = record(g, sel.chosen_class, score(train_tracker(data), data, user_));
      r.metrics = std::move(sybil_metrics);
      r.metrics["leaked_count"] = static_cast<double>(user_class().train.size() - a_idx.size());
      r.metrics["sybil_source"] = sybil_source;
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  LabeledDataset transformed(const LabeledDataset& data, double g, std::uint64_t stream) const {
    LabeledDataset out = data;
    SeededRng rng(mix_seed(seed_, stream));
    for (auto& [label, c] : out.classes) {
      for (auto& img : c.train) img = apply_transform(img, cfg_.transform, g, rng);
      for (auto& img : c.test) img = apply_transform(img, cfg_.transform, g, rng);
    }
    return out;
  }

  std::vector<ExperimentRecord> run_transform() {
    const TargetSelection sel = choose_target(w_.users[0], cfg_.target_mode);
    const auto cloaks = cloak_user(user_set(0), sel, cfg_.cloak, grid_tag(0));
    const LabeledDataset poisoned = with_user_train(
        w_.tracker, user_, cloaked_images(cloaks), prefixed(user_class().train_paths, "cloaked/"));
    std::vector<ExperimentRecord> out;
    for (double g : cfg_.grid) {
      const LabeledDataset data = transformed(poisoned, g, 0x71);
      ExperimentRecord r = record(g, sel.chosen_class, score(train_tracker(data), data, user_));
      add_baseline(r, transformed(w_.tracker, g, 0x72));
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  std::vector<ExperimentRecord> run_detection() {
    std::vector<ExperimentRecord> out;
    for (std::size_t gi = 0; gi < cfg_.grid.size(); ++gi) {
      const double g = cfg_.grid[gi];
      const auto variant = static_cast<DetectionVariant>(static_cast<int>(g));
      CloakParams params = cfg_.cloak;
      TargetMode mode = cfg_.target_mode;
      if (variant == DetectionVariant::kEarlyStop) params.early_stop_fraction = cfg_.evasion_early_stop;
      if (variant == DetectionVariant::kAverageTarget) mode = TargetMode::kAverage;
      const TargetSelection sel = choose_target(w_.users[0], mode);
      const auto cloaks = cloak_user(user_set(0), sel, params, grid_tag(gi));

      // Without originals: the tracker holds the cloaked class and the target class.
      LabeledDataset with_target = with_user_train(
          w_.tracker, user_, cloaked_images(cloaks), prefixed(user_class().train_paths, "cloaked/"));
      ClassImages target = w_.pretrain.classes.at(sel.chosen_class);
      target.name = "target_" + target.name;
      const int target_label = add_class(with_target, std::move(target));
      const DetectionResult centroid =
          detect_centroid_anomaly(w_.tracker_phi, with_target, cfg_.z_threshold);

      // With originals: part of the user's class stays uncloaked.
      auto [imgs, names] = mixed_train(cloaks, leak_order(), cfg_.detection_leak_ratio, nullptr);
      const LabeledDataset mixed = with_user_train(w_.tracker, user_, std::move(imgs), std::move(names));
      const DetectionResult bimodal =
          detect_bimodal_classes(w_.tracker_phi, mixed, cfg_.z_threshold);

      ExperimentRecord r =
          record(g, sel.chosen_class, score(train_tracker(with_target), with_target, user_));
      auto user_entry = [&](const DetectionResult& d, int label) {
        for (const auto& c : d.classes) {
          if (c.label == label) return c;
        }
        return ClassDetection{};
      };
      const ClassDetection cu = user_entry(centroid, user_);
      const ClassDetection bu = user_entry(bimodal, user_);
      r.metrics["centroid_flagged"] = cu.flagged ? 1.0 : 0.0;
      r.metrics["centroid_z"] = cu.z;
      r.metrics["centroid_score"] = cu.score;
      r.metrics["target_flagged"] = user_entry(centroid, target_label).flagged ? 1.0 : 0.0;
      r.metrics["centroid_flag_count"] = static_cast<double>(centroid.flagged().size());
      r.metrics["bimodal_flagged"] = bu.flagged ? 1.0 : 0.0;
      r.metrics["bimodal_z"] = bu.z;
      r.metrics["bimodal_score"] = bu.score;
      r.metrics["bimodal_flag_count"] = static_cast<double>(bimodal.flagged().size());
      add_cloak_metrics(r.metrics, cloaks);
      out.push_back(std::move(r));
    }
    return out;
  }

  const World& w_;
  const ExperimentConfig& cfg_;
  int rep_;
  std::uint64_t seed_;
  SeededRng base_;
  std::ostream* log_;
  int user_ = 0;
};

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<CurvePoint> aggregate(const ExperimentConfig& cfg,
                                  const std::vector<ExperimentRecord>& records) {
  std::vector<CurvePoint> curve;
  for (std::size_t gi = 0; gi < cfg.grid.size(); ++gi) {
    CurvePoint p;
    p.grid_value = cfg.grid[gi];
    std::vector<double> prot, normal;
    std::map<std::string, std::vector<double>> metrics;
    for (std::size_t r = 0; r < static_cast<std::size_t>(cfg.repetitions); ++r) {
      const ExperimentRecord& rec = records[gi * static_cast<std::size_t>(cfg.repetitions) + r];
      prot.push_back(rec.report.protection_success_rate);
      normal.push_back(rec.report.normal_accuracy);
      for (const auto& [k, v] : rec.metrics) metrics[k].push_back(v);
    }
    p.mean_protection = mean_of(prot);
    p.mean_normal_accuracy = mean_of(normal);
    double ss = 0.0;
    for (double x : prot) ss += (x - p.mean_protection) * (x - p.mean_protection);
    p.std_protection = prot.size() > 1 ? std::sqrt(ss / static_cast<double>(prot.size() - 1)) : 0.0;
    for (const auto& [k, v] : metrics) p.mean_metrics[k] = mean_of(v);
    curve.push_back(std::move(p));
  }
  return curve;
}

}  // namespace

const CurvePoint& ExperimentReport::at(double grid_value) const {
  for (const auto& p : curve) {
    if (p.grid_value == grid_value) return p;
  }
  throw ParamError("grid value " + std::to_string(grid_value) + " not in report");
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();

  World world{config, config.pretrain.load(), config.tracker_data.load(), {}, {}, {}};
  for (const auto& [label, c] : world.pretrain.classes) world.candidates[label] = c.train;
  world.users.resize(config.user_extractors.size());
  std::vector<const ExtractorSpec*> specs;
  for (const auto& e : config.user_extractors) specs.push_back(&e);
  if (config.tracker_extractor) specs.push_back(&*config.tracker_extractor);
  std::vector<FeatureExtractor> built(specs.size());
  run_bounded(specs.size(), config.workers,
              [&](std::size_t i) { built[i] = build_extractor(*specs[i], world.pretrain); });
  for (std::size_t i = 0; i < world.users.size(); ++i) world.users[i] = built[i];
  world.tracker_phi = config.tracker_extractor ? built.back() : built.front();

  const auto& out_dir = config.output_dir;
  if (out_dir) std::filesystem::create_directories(*out_dir / "cloak_logs");

  ExperimentReport report;
  report.config = config;
  const auto reps = static_cast<std::size_t>(config.repetitions);
  for (std::size_t r = 0; r < reps; ++r) report.repetition_seeds.push_back(mix_seed(config.seed, r));

  std::vector<std::vector<ExperimentRecord>> per_rep(reps);
  run_bounded(reps, config.workers, [&](std::size_t r) {
    std::ofstream log;
    if (out_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "rep_%03zu.jsonl", r);
      log.open(*out_dir / "cloak_logs" / name);
    }
    RepRunner runner(world, static_cast<int>(r), report.repetition_seeds[r],
                     out_dir ? &log : nullptr);
    per_rep[r] = runner.run();
  });

  for (std::size_t gi = 0; gi < config.grid.size(); ++gi) {
    for (std::size_t r = 0; r < reps; ++r) report.records.push_back(per_rep[r].at(gi));
  }
  report.curve = aggregate(config, report.records);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (out_dir) {
    std::ofstream(*out_dir / "report.json") << to_json(report).dump(2) << '\n';
    std::ofstream csv(*out_dir / "records.csv");
    write_records_csv(csv, report);
    std::filesystem::create_directories(*out_dir / "predictions");
    for (std::size_t i = 0; i < report.records.size(); ++i) {
      const auto& rec = report.records[i];
      char name[48];
      std::snprintf(name, sizeof name, "g%02zu_rep%03d.csv", i / reps, rec.repetition);
      std::ofstream p(*out_dir / "predictions" / name);
      write_predictions_csv(p, rec.report);
    }
  }
  return report;
}

json to_json(const ExperimentReport& report) {
  json j;
  j["config"] = to_json(report.config);
  j["wall_seconds"] = report.wall_seconds;
  j["repetition_seeds"] = report.repetition_seeds;
  j["records"] = json::array();
  for (const auto& r : report.records) {
    json rec = {{"grid_value", r.grid_value},
                {"repetition", r.repetition},
                {"user_label", r.user_label},
                {"target_label", r.target_label},
                {"protection_success_rate", r.report.protection_success_rate},
                {"normal_accuracy", r.report.normal_accuracy},
                {"metrics", r.metrics}};
    j["records"].push_back(std::move(rec));
  }
  j["curve"] = json::array();
  for (const auto& p : report.curve) {
    j["curve"].push_back({{"grid_value", p.grid_value},
                          {"mean_protection", p.mean_protection},
                          {"std_protection", p.std_protection},
                          {"mean_normal_accuracy", p.mean_normal_accuracy},
                          {"mean_metrics", p.mean_metrics}});
  }
  return j;
}

void write_records_csv(std::ostream& os, const ExperimentReport& report) {
  std::set<std::string> keys;
  for (const auto& r : report.records) {
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  }
  os << "grid,repetition,user,target,protection,normal_accuracy";
  for (const auto& k : keys) os << ',' << k;
  os << '\n';
  char buf[64];
  for (const auto& r : report.records) {
    std::snprintf(buf, sizeof buf, "%.17g", r.grid_value);
    os << buf << ',' << r.repetition << ',' << r.user_label << ',' << r.target_label;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g", r.report.protection_success_rate,
                  r.report.normal_accuracy);
    os << buf;
    for (const auto& k : keys) {
      const auto it = r.metrics.find(k);
      if (it == r.metrics.end()) {
        os << ',';
      } else {
        std::snprintf(buf, sizeof buf, ",%.17g", it->second);
        os << buf;
      }
    }
    os << '\n';
  }
}

}  // namespace veil
