// veil: command-line front end for corpus generation, extractor training,
// cloaking, tracker simulation and experiments.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "veil/cloak.hpp"
#include "veil/corpus.hpp"
#include "veil/dataset.hpp"
#include "veil/errors.hpp"
#include "veil/extractor.hpp"
#include "veil/harness.hpp"
#include "veil/pca.hpp"
#include "veil/sybil.hpp"
#include "veil/targeting.hpp"
#include "veil/tracker.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace veil;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "veil_out";
  int workers = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON file of option values (flags override it)");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--workers", c.workers, "Worker threads")->check(CLI::PositiveNumber);
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::string stem_of(const std::string& path) { return fs::path(path).stem().string(); }

struct SplitOpts {
  double fraction = 0.8;
  std::uint64_t seed = 0;
};

void add_split(CLI::App* sub, SplitOpts& s) {
  sub->add_option("--split", s.fraction, "Train fraction per class");
  sub->add_option("--split-seed", s.seed, "Seed of the per-class split");
}

struct CloakOpts {
  double rho = CloakParams{}.rho;
  int iterations = CloakParams{}.iterations;
  double lr = CloakParams{}.learning_rate;
  double lambda_init = CloakParams{}.lambda_init;
  std::optional<double> early_stop;
  bool soft = false;

  CloakParams params() const {
    CloakParams p;
    p.rho = rho;
    p.iterations = iterations;
    p.learning_rate = lr;
    p.lambda_init = lambda_init;
    p.early_stop_fraction = early_stop;
    p.hard_budget = !soft;
    p.validate();
    return p;
  }
};

void add_cloak(CLI::App* sub, CloakOpts& c) {
  sub->add_option("--rho", c.rho, "DSSIM budget");
  sub->add_option("--iterations", c.iterations, "Optimizer iterations");
  sub->add_option("--lr", c.lr, "Adam step in 8-bit intensity units");
  sub->add_option("--lambda-init", c.lambda_init, "Initial budget penalty weight");
  sub->add_option("--early-stop", c.early_stop, "Stop at this fraction of the initial distance");
  sub->add_flag("--soft-budget", c.soft, "Skip the final budget bisection");
}

std::vector<FeatureExtractor> load_models(const std::vector<std::string>& paths) {
  std::vector<FeatureExtractor> out;
  for (const auto& p : paths) out.push_back(FeatureExtractor::load(p));
  return out;
}

ExtractorSet as_set(const std::vector<FeatureExtractor>& models) {
  ExtractorSet s;
  for (const auto& m : models) s.push_back(&m);
  return s;
}

std::vector<Image> images_of(const std::vector<NamedImage>& named) {
  std::vector<Image> out;
  for (const auto& n : named) out.push_back(n.image);
  return out;
}

std::map<int, std::vector<Image>> all_images_by_class(const LabeledDataset& data) {
  std::map<int, std::vector<Image>> out;
  for (const auto& [label, c] : data.classes) {
    auto& v = out[label];
    v.insert(v.end(), c.train.begin(), c.train.end());
    v.insert(v.end(), c.test.begin(), c.test.end());
  }
  return out;
}

json cloak_result_json(const std::string& name, const CloakResult& r) {
  return {{"image", name},
          {"final_dssim", r.final_dssim},
          {"initial_target_distance", r.initial_target_distance},
          {"final_target_distance", r.final_target_distance},
          {"iterations_run", r.iterations_run},
          {"converged", r.converged}};
}

// Splice option values from --config into argv ahead of the explicit
// arguments, so explicit flags win (options take the last value).
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2 || args[1] == "experiment") return args;
  std::string path;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  std::vector<std::string> extra;
  auto scalar = [&](const json& v) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number() || v.is_boolean()) return v.dump();
    throw ConfigError("config values must be scalars or lists of scalars");
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "config") continue;
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& v : value) {
        extra.push_back(flag);
        extra.push_back(scalar(v));
      }
    } else {
      extra.push_back(flag);
      extra.push_back(scalar(value));
    }
  }
  args.insert(args.begin() + 2, extra.begin(), extra.end());
  return args;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"veil: image cloaking against feature-extractor trackers"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // make-corpus
  Common mc_common;
  CorpusSpec mc_spec;
  auto* mc = app.add_subcommand("make-corpus", "Generate the procedural face corpus as PNGs");
  add_common(mc, mc_common);
  mc->add_option("--classes", mc_spec.classes, "Identities");
  mc->add_option("--images-per-class", mc_spec.images_per_class, "Images per identity");
  mc->add_option("--height", mc_spec.height);
  mc->add_option("--width", mc_spec.width);
  mc->add_option("--channels", mc_spec.channels);
  mc->callback([&] {
    const fs::path out = out_dir(mc_common);
    make_desk_corpus(mc_spec, mc_common.seed, out);
    write_json(out / "manifest.json",
               {{"classes", mc_spec.classes}, {"images_per_class", mc_spec.images_per_class},
                {"height", mc_spec.height}, {"width", mc_spec.width},
                {"channels", mc_spec.channels}, {"seed", mc_common.seed}});
    std::cout << "wrote " << mc_spec.classes * mc_spec.images_per_class << " images to "
              << out.string() << '\n';
  });

  // train-extractor
  Common te_common;
  SplitOpts te_split;
  std::string te_data;
  TrainOptions te_train;
  ArchConfig te_arch;
  auto* te = app.add_subcommand("train-extractor", "Train a feature extractor with a softmax head");
  add_common(te, te_common);
  add_split(te, te_split);
  te->add_option("--data", te_data, "Dataset root (one directory per class)")->required();
  te->add_option("--epochs", te_train.epochs);
  te->add_option("--batch", te_train.batch_size);
  te->add_option("--lr", te_train.learning_rate);
  te->add_option("--widths", te_arch.conv_widths, "Conv block widths")->expected(1, 8)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  te->add_option("--embed-dim", te_arch.embed_dim);
  te->callback([&] {
    const LabeledDataset data = load_dataset(te_data, te_split.fraction, te_split.seed);
    const Image& probe = data.classes.begin()->second.train.at(0);
    te_arch.height = probe.height();
    te_arch.width = probe.width();
    te_arch.channels = probe.channels();
    te_train.seed = te_common.seed;
    const FeatureExtractor phi = train_extractor(data, te_arch, te_train);
    const fs::path out = out_dir(te_common);
    phi.save(out / "extractor.ckpt");
    const double test_acc = classification_accuracy(phi, test_samples(data));
    write_json(out / "report.json", {{"train_accuracy", phi.provenance().train_accuracy},
                                     {"test_accuracy", test_acc},
                                     {"checksum", phi.checksum()},
                                     {"epochs", te_train.epochs},
                                     {"seed", te_train.seed}});
    std::cout << "train accuracy " << phi.provenance().train_accuracy << ", test accuracy "
              << test_acc << '\n';
  });

  // robust-train
  Common rt_common;
  SplitOpts rt_split;
  std::string rt_model, rt_data;
  int rt_epochs = 5;
  PgdConfig rt_pgd{7, 2.0 / 255.0, 8.0 / 255.0};
  auto* rt = app.add_subcommand("robust-train", "PGD adversarial fine-tuning of an extractor");
  add_common(rt, rt_common);
  add_split(rt, rt_split);
  rt->add_option("--model", rt_model, "Trained extractor checkpoint")->required();
  rt->add_option("--data", rt_data, "Dataset root")->required();
  rt->add_option("--epochs", rt_epochs);
  rt->add_option("--pgd-steps", rt_pgd.steps);
  rt->add_option("--pgd-step-size", rt_pgd.step_size);
  rt->add_option("--pgd-epsilon", rt_pgd.epsilon);
  rt->callback([&] {
    const LabeledDataset data = load_dataset(rt_data, rt_split.fraction, rt_split.seed);
    const FeatureExtractor phi = FeatureExtractor::load(rt_model);
    const Samples test = test_samples(data);
    const double before = pgd_success_rate(phi, test, rt_pgd, rt_common.seed);
    const FeatureExtractor robust = robust_train(phi, data, rt_epochs, rt_pgd, rt_common.seed);
    const double after = pgd_success_rate(robust, test, rt_pgd, rt_common.seed);
    const fs::path out = out_dir(rt_common);
    robust.save(out / "robust.ckpt");
    write_json(out / "report.json",
               {{"pgd_success_before", before},
                {"pgd_success_after", after},
                {"test_accuracy", classification_accuracy(robust, test)},
                {"pgd", {{"steps", rt_pgd.steps}, {"step_size", rt_pgd.step_size},
                         {"epsilon", rt_pgd.epsilon}}}});
    std::cout << "PGD success " << before << " -> " << after << '\n';
  });

  // select-target
  Common st_common;
  std::string st_model, st_user, st_candidates, st_mode = "maximal";
  int st_max = 20;
  auto* st = app.add_subcommand("select-target", "Choose a cloak target class");
  add_common(st, st_common);
  st->add_option("--model", st_model, "Extractor checkpoint")->required();
  st->add_option("--user", st_user, "Directory of the user's PNGs")->required();
  st->add_option("--candidates", st_candidates, "Root of candidate class directories")->required();
  st->add_option("--mode", st_mode, "maximal or average");
  st->add_option("--max-candidates", st_max);
  st->callback([&] {
    const FeatureExtractor phi = FeatureExtractor::load(st_model);
    const auto user = images_of(load_image_dir(st_user));
    const LabeledDataset cands = load_dataset(st_candidates, 1.0, 0);
    SeededRng rng(st_common.seed);
    const TargetSelection sel = select_target(phi, user, all_images_by_class(cands),
                                              target_mode_from_string(st_mode), rng, st_max);
    json scores = json::object();
    for (const auto& [label, s] : sel.scores) scores[cands.classes.at(label).name] = s;
    write_json(out_dir(st_common) / "target.json",
               {{"chosen_class", sel.chosen_class},
                {"chosen_name", cands.classes.at(sel.chosen_class).name},
                {"mode", to_string(sel.mode)},
                {"candidate_count", sel.candidate_count},
                {"scores", scores}});
    std::cout << "target " << cands.classes.at(sel.chosen_class).name << '\n';
  });

  // cloak
  Common ck_common;
  CloakOpts ck_opts;
  std::vector<std::string> ck_models;
  std::string ck_user, ck_target, ck_candidates, ck_mode = "maximal";
  auto* ck = app.add_subcommand("cloak", "Cloak a directory of user images");
  add_common(ck, ck_common);
  add_cloak(ck, ck_opts);
  ck->add_option("--model", ck_models, "Extractor checkpoint(s); several means joint optimization")
      ->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ck->add_option("--user", ck_user, "Directory of the user's PNGs")->required();
  auto* target_opt = ck->add_option("--target", ck_target, "Directory of target-class PNGs");
  auto* cand_opt = ck->add_option("--candidates", ck_candidates,
                                  "Candidate class root; the target is selected automatically");
  target_opt->excludes(cand_opt);
  ck->add_option("--mode", ck_mode, "Target selection mode with --candidates");
  ck->callback([&] {
    if (ck_target.empty() && ck_candidates.empty()) {
      throw ConfigError("cloak needs --target or --candidates");
    }
    const auto models = load_models(ck_models);
    const auto user = load_image_dir(ck_user);
    const std::vector<Image> user_images = images_of(user);
    SeededRng rng(ck_common.seed);
    std::vector<Image> targets;
    json target_info;
    if (!ck_target.empty()) {
      targets = images_of(load_image_dir(ck_target));
      target_info = {{"directory", ck_target}};
    } else {
      const LabeledDataset cands = load_dataset(ck_candidates, 1.0, 0);
      const auto by_class = all_images_by_class(cands);
      const TargetSelection sel = select_target(models.front(), user_images, by_class,
                                                target_mode_from_string(ck_mode), rng);
      targets = by_class.at(sel.chosen_class);
      target_info = {{"class", cands.classes.at(sel.chosen_class).name},
                     {"mode", to_string(sel.mode)}};
    }
    const CloakParams params = ck_opts.params();
    const auto pairs = pair_targets(user_images.size(), targets.size(), rng);
    std::vector<Image> paired;
    for (std::size_t i : pairs) paired.push_back(targets[i]);

    // Contiguous chunks, one per worker.
    std::vector<CloakResult> results(user_images.size());
    const std::size_t chunks = std::min<std::size_t>(user_images.size(),
                                                     static_cast<std::size_t>(ck_common.workers));
    const ExtractorSet set = as_set(models);
    run_bounded(chunks, ck_common.workers, [&](std::size_t c) {
      const std::size_t lo = c * user_images.size() / chunks;
      const std::size_t hi = (c + 1) * user_images.size() / chunks;
      auto part = compute_cloaks(set, std::span<const Image>(user_images).subspan(lo, hi - lo),
                                 std::span<const Image>(paired).subspan(lo, hi - lo), params);
      for (std::size_t i = lo; i < hi; ++i) results[i] = std::move(part[i - lo]);
    });

    const fs::path out = out_dir(ck_common);
    fs::create_directories(out / "cloaked");
    std::ofstream log(out / "cloak_log.jsonl");
    json per_image = json::array();
    for (std::size_t i = 0; i < results.size(); ++i) {
      const std::string name = stem_of(user[i].path);
      save_png(results[i].cloaked, out / "cloaked" / (name + ".png"));
      write_cloak_log(log, name, results[i]);
      per_image.push_back(cloak_result_json(name, results[i]));
    }
    write_json(out / "report.json", {{"target", target_info},
                                     {"rho", params.rho},
                                     {"iterations", params.iterations},
                                     {"learning_rate", params.learning_rate},
                                     {"hard_budget", params.hard_budget},
                                     {"images", per_image}});
    std::cout << "cloaked " << results.size() << " images into " << (out / "cloaked").string()
              << '\n';
  });

  // sybil
  Common sy_common;
  CloakOpts sy_opts;
  std::vector<std::string> sy_models;
  std::string sy_anchors, sy_candidates;
  int sy_per_anchor = 1;
  auto* sy = app.add_subcommand("sybil", "Build Sybil decoys that mimic the user's originals");
  add_common(sy, sy_common);
  add_cloak(sy, sy_opts);
  sy->add_option("--model", sy_models, "Extractor checkpoint(s)")
      ->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sy->add_option("--anchors", sy_anchors, "Directory of the user's uncloaked PNGs")->required();
  sy->add_option("--candidates", sy_candidates, "Directory of candidate PNGs")->required();
  sy->add_option("--per-anchor", sy_per_anchor, "Sybil images per anchor");
  sy->callback([&] {
    const auto models = load_models(sy_models);
    const auto anchors = load_image_dir(sy_anchors);
    const auto candidates = load_image_dir(sy_candidates);
    SybilSpec spec;
    spec.anchors = images_of(anchors);
    spec.candidates = images_of(candidates);
    spec.per_anchor = sy_per_anchor;
    spec.params = sy_opts.params();
    SeededRng rng(sy_common.seed);
    const auto set = build_sybil_set(as_set(models), spec, rng);
    const fs::path out = out_dir(sy_common);
    fs::create_directories(out / "sybil");
    std::vector<std::string> files, anchor_files;
    for (std::size_t i = 0; i < set.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sybil_%03zu.png", i);
      save_png(set[i].image, out / "sybil" / name);
      files.push_back((fs::path("sybil") / name).string());
      anchor_files.push_back(anchors[set[i].anchor_index].path);
    }
    std::ofstream manifest(out / "manifest.csv");
    write_sybil_manifest(manifest, set, files, anchor_files);
    std::cout << "wrote " << set.size() << " Sybil images\n";
  });

  // train-tracker
  Common tt_common;
  SplitOpts tt_split;
  std::string tt_data, tt_mode = "transfer", tt_model;
  int tt_epochs = -1;
  double tt_lr = -1.0;
  auto* tt = app.add_subcommand("train-tracker", "Train the tracker's recognition model");
  add_common(tt, tt_common);
  add_split(tt, tt_split);
  tt->add_option("--data", tt_data, "Dataset root (possibly containing cloaked images)")->required();
  tt->add_option("--mode", tt_mode, "transfer or scratch");
  tt->add_option("--model", tt_model, "Backbone checkpoint for transfer mode");
  tt->add_option("--epochs", tt_epochs, "Head epochs (transfer) or full epochs (scratch)");
  tt->add_option("--lr", tt_lr);
  tt->callback([&] {
    const LabeledDataset data = load_dataset(tt_data, tt_split.fraction, tt_split.seed);
    std::optional<Classifier> model;
    if (tt_mode == "transfer") {
      if (tt_model.empty()) throw ConfigError("transfer mode needs --model");
      HeadTrainOptions opt;
      opt.seed = tt_common.seed;
      if (tt_epochs > 0) opt.epochs = tt_epochs;
      if (tt_lr > 0) opt.learning_rate = tt_lr;
      model.emplace(transfer_train(FeatureExtractor::load(tt_model), data, opt));
    } else if (tt_mode == "scratch") {
      TrainOptions opt;
      opt.seed = tt_common.seed;
      if (tt_epochs > 0) opt.epochs = tt_epochs;
      if (tt_lr > 0) opt.learning_rate = tt_lr;
      ArchConfig arch;
      const Image& probe = data.classes.begin()->second.train.at(0);
      arch.height = probe.height();
      arch.width = probe.width();
      arch.channels = probe.channels();
      model.emplace(scratch_train(arch, data, opt));
    } else {
      throw ConfigError("unknown tracker mode '" + tt_mode + "'");
    }
    const fs::path out = out_dir(tt_common);
    model->model().save(out / "tracker.ckpt");
    const double acc = classification_accuracy(model->model(), test_samples(data));
    json labels = json::object();
    for (const auto& [label, c] : data.classes) labels[std::to_string(label)] = c.name;
    write_json(out / "report.json", {{"mode", to_string(model->mode())},
                                     {"test_accuracy", acc},
                                     {"backbone_checksum", model->model().checksum()},
                                     {"labels", labels}});
    std::cout << "tracker test accuracy " << acc << '\n';
  });

  // evaluate
  Common ev_common;
  SplitOpts ev_split;
  std::string ev_tracker, ev_data, ev_user_name;
  int ev_user = -1;
  auto* ev = app.add_subcommand("evaluate", "Score protection and normal accuracy");
  add_common(ev, ev_common);
  add_split(ev, ev_split);
  ev->add_option("--tracker", ev_tracker, "Tracker checkpoint")->required();
  ev->add_option("--data", ev_data, "Clean dataset root (test split is scored)")->required();
  auto* ev_u = ev->add_option("--user", ev_user, "Protected user's class id");
  auto* ev_un = ev->add_option("--user-name", ev_user_name, "Protected user's class directory");
  ev_u->excludes(ev_un);
  ev->callback([&] {
    const LabeledDataset data = load_dataset(ev_data, ev_split.fraction, ev_split.seed);
    if (!ev_user_name.empty()) {
      for (const auto& [label, c] : data.classes) {
        if (c.name == ev_user_name) ev_user = label;
      }
    }
    if (!data.classes.contains(ev_user)) throw ConfigError("protected user class not found");
    const Classifier model(FeatureExtractor::load(ev_tracker), TrainingMode::kTransfer);
    Samples others;
    std::vector<std::string> names;
    for (const auto& [label, c] : data.classes) {
      if (label == ev_user) continue;
      for (std::size_t i = 0; i < c.test.size(); ++i) {
        others.images.push_back(&c.test[i]);
        others.labels.push_back(label);
        names.push_back(c.test_paths[i]);
      }
    }
    const ClassImages& u = data.classes.at(ev_user);
    const ProtectionReport rep =
        evaluate_protection(model, ev_user, u.test, others, u.test_paths, names);
    const fs::path out = out_dir(ev_common);
    write_json(out / "report.json", to_json(rep));
    std::ofstream csv(out / "predictions.csv");
    write_predictions_csv(csv, rep);
    std::cout << "protection " << rep.protection_success_rate << ", normal accuracy "
              << rep.normal_accuracy << '\n';
  });

  // detect
  Common dt_common;
  SplitOpts dt_split;
  std::string dt_model, dt_data, dt_detector = "both";
  double dt_z = 3.0;
  auto* dt = app.add_subcommand("detect", "Run the cloak-detection countermeasures");
  add_common(dt, dt_common);
  add_split(dt, dt_split);
  dt->add_option("--model", dt_model, "Backbone checkpoint")->required();
  dt->add_option("--data", dt_data, "Dataset root")->required();
  dt->add_option("--detector", dt_detector, "centroid, bimodal or both");
  dt->add_option("--z", dt_z, "Threshold in standard deviations");
  dt->callback([&] {
    if (dt_detector != "centroid" && dt_detector != "bimodal" && dt_detector != "both") {
      throw ConfigError("unknown detector '" + dt_detector + "'");
    }
    const LabeledDataset data = load_dataset(dt_data, dt_split.fraction, dt_split.seed);
    const FeatureExtractor phi = FeatureExtractor::load(dt_model);
    const ClassEmbeddings emb = embed_classes(phi, data);
    json j = json::object();
    auto flagged_names = [&](const DetectionResult& r) {
      json names = json::array();
      for (int label : r.flagged()) names.push_back(data.classes.at(label).name);
      return names;
    };
    if (dt_detector != "bimodal") {
      const auto r = detect_centroid_anomaly(emb, dt_z);
      j["centroid"] = to_json(r);
      j["centroid"]["flagged_names"] = flagged_names(r);
      std::cout << "centroid flags: " << j["centroid"]["flagged_names"].dump() << '\n';
    }
    if (dt_detector != "centroid") {
      const auto r = detect_bimodal_classes(emb, dt_z);
      j["bimodal"] = to_json(r);
      j["bimodal"]["flagged_names"] = flagged_names(r);
      std::cout << "bimodal flags: " << j["bimodal"]["flagged_names"].dump() << '\n';
    }
    write_json(out_dir(dt_common) / "detection.json", j);
  });

  // experiment
  Common ex_common;
  std::string ex_scenario;
  int ex_reps = 0;
  auto* ex = app.add_subcommand("experiment", "Run a scenario over its sweep grid");
  add_common(ex, ex_common);
  auto* ex_config_opt = ex->get_option("--config");
  auto* ex_seed_opt = ex->get_option("--seed");
  auto* ex_out_opt = ex->get_option("--out");
  auto* ex_workers_opt = ex->get_option("--workers");
  ex->add_option("--scenario", ex_scenario, "Scenario id (overrides the config file)");
  ex->add_option("--repetitions", ex_reps, "Repetitions (overrides the config file)");
  ex->callback([&] {
    json j = json::object();
    if (ex_config_opt->count() > 0) {
      std::ifstream is(ex_common.config);
      if (!is) throw ConfigError("cannot read config file " + ex_common.config);
      try {
        j = json::parse(is);
      } catch (const json::exception& e) {
        throw ConfigError("config file " + ex_common.config + ": " + e.what());
      }
      if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    }
    if (!ex_scenario.empty()) j["scenario"] = ex_scenario;
    if (ex_seed_opt->count() > 0) j["seed"] = ex_common.seed;
    if (ex_workers_opt->count() > 0) j["workers"] = ex_common.workers;
    if (ex_reps > 0) j["repetitions"] = ex_reps;
    if (ex_out_opt->count() > 0 || !j.contains("output_dir")) j["output_dir"] = ex_common.out;
    const ExperimentConfig cfg = config_from_json(j);
    const ExperimentReport rep = run_experiment(cfg);
    std::cout << to_string(cfg.scenario) << " (" << to_string(cfg.axis) << ")\n";
    for (const auto& p : rep.curve) {
      std::printf("  %-10g protection %.3f +- %.3f  normal accuracy %.3f\n", p.grid_value,
                  p.mean_protection, p.std_protection, p.mean_normal_accuracy);
    }
    std::cout << "report: " << (*cfg.output_dir / "report.json").string() << '\n';
  });

  // pca
  Common pc_common;
  std::string pc_model;
  std::vector<std::string> pc_groups;
  auto* pc = app.add_subcommand("pca", "Project embeddings of image groups to 2-D");
  add_common(pc, pc_common);
  pc->add_option("--model", pc_model, "Extractor checkpoint")->required();
  pc->add_option("--group", pc_groups, "name=directory, repeatable")
      ->required()->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  pc->callback([&] {
    NamedImageSets groups;
    for (const auto& g : pc_groups) {
      const auto eq = g.find('=');
      if (eq == std::string::npos) throw ConfigError("--group expects name=directory");
      groups.emplace_back(g.substr(0, eq), images_of(load_image_dir(g.substr(eq + 1))));
    }
    const PcaTable table = emit_pca(FeatureExtractor::load(pc_model), groups);
    const fs::path out = out_dir(pc_common);
    std::ofstream csv(out / "pca.csv");
    write_pca_csv(csv, table);
    write_json(out / "pca.json", {{"explained_variance_ratio",
                                   {table.explained_variance_ratio[0],
                                    table.explained_variance_ratio[1]}},
                                  {"points", table.points.size()}});
    std::cout << "explained variance " << table.explained_variance_ratio.transpose() << '\n';
  });

  std::vector<std::string> args;
  try {
    args = expand_config(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  args.erase(args.begin());
  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  return 0;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParamError& e) {
    std::cerr << "parameter error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
