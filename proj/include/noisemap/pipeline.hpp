#pragma once

// File-based pipeline stages driven by one JSON configuration document.
//
// Every stage reads its inputs from and writes its outputs to the working
// directory (or explicit paths given in the config), so stages can be rerun
// independently.

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "noisemap/dataset.hpp"
#include "noisemap/eval.hpp"
#include "noisemap/fusion.hpp"
#include "noisemap/synth.hpp"
#include "noisemap/trainer.hpp"
#include "noisemap/transitions.hpp"

namespace noisemap {

namespace fs = std::filesystem;

struct SynthStage {
  LandscapeSpec landscape = LandscapeSpec::defaults();
  std::size_t coarsen_factor = 8;
  double flip_r01 = 0.3;
  double flip_r10 = 0.1;
  std::size_t points = 500;
  std::vector<std::string> years = {"2020"};
};

struct PrepareStage {
  std::optional<fs::path> image, labels;
  std::size_t tile = 64;
  double split_ratio = 0.7;
  bool balance = false;
};

struct PredictStage {
  std::optional<fs::path> image;
  std::size_t tile = 64;
  std::size_t overlap = 8;
  TileNormalization normalization = TileNormalization::PerTile;
};

struct FuseStage {
  SensorModel sensor;
  Neighborhood neighborhood = Neighborhood::Single;
  std::size_t block = 10;
  std::optional<fs::path> prior;
  std::vector<fs::path> evidence;  // empty = the synthetic noisy labels
};

struct EvaluateStage {
  std::optional<fs::path> map, points;
  std::string year = "2020";
};

struct TransitionsStage {
  std::optional<fs::path> from, to;
  std::vector<LandClass> classes = {{0, "other"}, {1, "oil_palm"}};
  std::optional<double> pixel_area_m2;
};

struct PipelineConfig {
  fs::path workdir = "out";
  std::uint64_t seed = 0;
  SynthStage synth;
  PrepareStage prepare;
  UNetConfig model;
  TrainConfig train;
  PredictStage predict;
  FuseStage fuse;
  EvaluateStage evaluate;
  TransitionsStage transitions;

  fs::path out(const std::string& name) const { return workdir / name; }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw Error(ErrorKind::Config, "'" + where + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw Error(ErrorKind::Config, "unknown key '" + key + "' in " + where);
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline std::optional<fs::path> opt_path(const nlohmann::json& j, const char* key, const fs::path& base) {
  if (!j.contains(key)) return std::nullopt;
  return resolve(base, j.at(key).get<std::string>());
}

}  // namespace detail

/// Parses and validates a pipeline configuration. Relative paths are taken
/// relative to `base` (normally the directory holding the config file).
inline PipelineConfig parse_pipeline_config(const nlohmann::json& j, const fs::path& base) {
  using detail::check_keys;
  PipelineConfig c;
  try {
    check_keys(j, "config",
               {"workdir", "seed", "synth", "prepare", "model", "train", "predict", "fuse", "evaluate", "transitions"});
    if (j.contains("workdir")) c.workdir = detail::resolve(base, j.at("workdir").get<std::string>());
    else c.workdir = base / "out";
    c.seed = j.value("seed", c.seed);

    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      check_keys(s, "synth", {"landscape", "coarsen_factor", "flip_r01", "flip_r10", "points", "years"});
      if (s.contains("landscape")) {
        check_keys(s.at("landscape"), "synth.landscape",
                   {"height", "width", "bands", "blob_scale", "class_means", "class_sigmas", "pixel_size", "seed"});
        s.at("landscape").get_to(c.synth.landscape);
      }
      c.synth.coarsen_factor = s.value("coarsen_factor", c.synth.coarsen_factor);
      c.synth.flip_r01 = s.value("flip_r01", c.synth.flip_r01);
      c.synth.flip_r10 = s.value("flip_r10", c.synth.flip_r10);
      c.synth.points = s.value("points", c.synth.points);
      c.synth.years = s.value("years", c.synth.years);
    }
    if (!j.contains("synth") || !j.at("synth").contains("landscape") ||
        !j.at("synth").at("landscape").contains("seed"))
      c.synth.landscape.seed = derive_seed(c.seed, 10);

    if (j.contains("prepare")) {
      const auto& s = j.at("prepare");
      check_keys(s, "prepare", {"image", "labels", "tile", "split_ratio", "balance"});
      c.prepare.image = detail::opt_path(s, "image", base);
      c.prepare.labels = detail::opt_path(s, "labels", base);
      c.prepare.tile = s.value("tile", c.prepare.tile);
      c.prepare.split_ratio = s.value("split_ratio", c.prepare.split_ratio);
      c.prepare.balance = s.value("balance", c.prepare.balance);
    }

    c.model.in_bands = c.synth.landscape.bands;
    c.model.seed = derive_seed(c.seed, 20);
    if (j.contains("model")) {
      check_keys(j.at("model"), "model", {"in_bands", "classes", "depth", "base_channels", "batchnorm", "seed"});
      j.at("model").get_to(c.model);
    }

    c.train.seed = derive_seed(c.seed, 30);
    if (j.contains("train")) {
      const auto& s = j.at("train");
      check_keys(s, "train", {"lr", "momentum", "epochs", "batch_size", "loss", "seed"});
      c.train.lr = s.value("lr", c.train.lr);
      c.train.momentum = s.value("momentum", c.train.momentum);
      c.train.epochs = s.value("epochs", c.train.epochs);
      c.train.batch_size = s.value("batch_size", c.train.batch_size);
      if (s.contains("loss")) c.train.loss = parse_loss(s.at("loss").get<std::string>());
      c.train.seed = s.value("seed", c.train.seed);
    }

    if (j.contains("predict")) {
      const auto& s = j.at("predict");
      check_keys(s, "predict", {"image", "tile", "overlap", "normalization"});
      c.predict.image = detail::opt_path(s, "image", base);
      c.predict.tile = s.value("tile", c.predict.tile);
      c.predict.overlap = s.value("overlap", c.predict.overlap);
      const std::string n = s.value("normalization", std::string("per_tile"));
      if (n == "per_tile") c.predict.normalization = TileNormalization::PerTile;
      else if (n == "none") c.predict.normalization = TileNormalization::None;
      else throw Error(ErrorKind::Config, "predict.normalization must be per_tile or none");
    }

    if (j.contains("fuse")) {
      const auto& s = j.at("fuse");
      check_keys(s, "fuse", {"l1", "l0", "neighborhood", "block", "prior", "evidence"});
      c.fuse.sensor.p_obs1_given_palm = s.value("l1", c.fuse.sensor.p_obs1_given_palm);
      c.fuse.sensor.p_obs1_given_not = s.value("l0", c.fuse.sensor.p_obs1_given_not);
      const std::string n = s.value("neighborhood", std::string("single"));
      if (n == "single") c.fuse.neighborhood = Neighborhood::Single;
      else if (n == "block") c.fuse.neighborhood = Neighborhood::Block;
      else throw Error(ErrorKind::Config, "fuse.neighborhood must be single or block");
      c.fuse.block = s.value("block", c.fuse.block);
      c.fuse.prior = detail::opt_path(s, "prior", base);
      if (s.contains("evidence"))
        for (const auto& e : s.at("evidence")) c.fuse.evidence.push_back(detail::resolve(base, e.get<std::string>()));
    }

    if (j.contains("evaluate")) {
      const auto& s = j.at("evaluate");
      check_keys(s, "evaluate", {"map", "points", "year"});
      c.evaluate.map = detail::opt_path(s, "map", base);
      c.evaluate.points = detail::opt_path(s, "points", base);
      c.evaluate.year = s.value("year", c.synth.years.empty() ? c.evaluate.year : c.synth.years.front());
    } else if (!c.synth.years.empty()) {
      c.evaluate.year = c.synth.years.front();
    }

    if (j.contains("transitions")) {
      const auto& s = j.at("transitions");
      check_keys(s, "transitions", {"from", "to", "classes", "pixel_area_m2"});
      c.transitions.from = detail::opt_path(s, "from", base);
      c.transitions.to = detail::opt_path(s, "to", base);
      if (s.contains("classes")) {
        c.transitions.classes.clear();
        for (const auto& k : s.at("classes")) {
          check_keys(k, "transitions.classes[]", {"code", "name"});
          c.transitions.classes.push_back({k.at("code").get<int>(), k.at("name").get<std::string>()});
        }
      }
      if (s.contains("pixel_area_m2")) c.transitions.pixel_area_m2 = s.at("pixel_area_m2").get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("invalid config: ") + e.what());
  }

  c.synth.landscape.validate();
  require(c.synth.coarsen_factor >= 1, ErrorKind::Config, "synth.coarsen_factor must be >= 1");
  require(c.synth.flip_r01 >= 0 && c.synth.flip_r01 < 0.5 && c.synth.flip_r10 >= 0 && c.synth.flip_r10 < 0.5,
          ErrorKind::Config, "synth flip rates must lie in [0, 0.5)");
  require(c.prepare.tile >= 1, ErrorKind::Config, "prepare.tile must be >= 1");
  require(c.prepare.split_ratio > 0 && c.prepare.split_ratio < 1, ErrorKind::Config,
          "prepare.split_ratio must lie in (0, 1)");
  c.model.validate();
  c.model.validate_tile(c.prepare.tile);
  c.model.validate_tile(c.predict.tile);
  c.train.validate();
  require(c.predict.overlap < c.predict.tile, ErrorKind::Config, "predict.overlap must be smaller than predict.tile");
  c.fuse.sensor.validate();
  require(c.fuse.block >= 1, ErrorKind::Config, "fuse.block must be >= 1");
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::Io, "config file not found", path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what(), path.string());
  }
  return parse_pipeline_config(j, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

namespace detail {

inline Raster read_input(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorKind::Io, "missing input", path.string());
  return read_raster(path);
}

}  // namespace detail

/// image.rst, truth.rst, noisy_labels.rst, points.csv
inline void run_synth(const PipelineConfig& c) {
  fs::create_directories(c.workdir);
  const Landscape land = generate(c.synth.landscape);
  const Raster noisy = flip_noise(coarsen_labels(land.truth, c.synth.coarsen_factor), c.synth.flip_r01,
                                  c.synth.flip_r10, derive_seed(c.seed, 11));
  write_raster(land.image, c.out("image.rst"));
  write_raster(land.truth, c.out("truth.rst"));
  write_raster(noisy, c.out("noisy_labels.rst"));
  write_points_csv(sample_points(land.truth, c.synth.points, derive_seed(c.seed, 12), c.synth.years), c.synth.years,
                   c.out("points.csv"));
}

/// patches/ and patches/manifest.json
inline void run_prepare(const PipelineConfig& c) {
  const Raster image = detail::read_input(c.prepare.image.value_or(c.out("image.rst")));
  const Raster labels = detail::read_input(c.prepare.labels.value_or(c.out("noisy_labels.rst")));
  auto patches = extract_patches(image, labels, c.prepare.tile);
  if (c.prepare.balance) patches = balance_undersample(patches, derive_seed(c.seed, 40));
  const SplitManifest manifest = split(patches, c.prepare.split_ratio, derive_seed(c.seed, 41));
  const fs::path dir = c.out("patches");
  fs::remove_all(dir);
  write_patches(patches, dir);
  write_manifest(manifest, dir / "manifest.json");
}

/// model.nnw (+ model.nnw.json) and history.csv
inline TrainResult run_train(const PipelineConfig& c) {
  const fs::path dir = c.out("patches");
  const SplitManifest manifest = read_manifest(dir / "manifest.json");
  PatchIndex patches;
  for (const auto* ids : {&manifest.train, &manifest.val})
    for (const auto& id : *ids) patches.emplace(id, read_patch(dir, id));
  UNet<float> model(c.model);
  const TrainResult result = train(c.train, model, manifest, patches);
  save_model(model, c.out("model.nnw"));
  write_history_csv(result.history, c.out("history.csv"));
  return result;
}

/// prob.rst and hard.rst
inline void run_predict(const PipelineConfig& c, std::size_t threads = threads_from_env()) {
  const fs::path ckpt = c.out("model.nnw");
  if (!fs::exists(ckpt)) throw Error(ErrorKind::Io, "missing input", ckpt.string());
  UNet<float> model = load_model<float>(ckpt);
  const Raster image = detail::read_input(c.predict.image.value_or(c.out("image.rst")));
  PredictOptions opt;
  opt.tile = c.predict.tile;
  opt.overlap = c.predict.overlap;
  opt.normalization = c.predict.normalization;
  opt.threads = threads;
  const Prediction p = predict_map(model, image, opt);
  write_raster(p.prob, c.out("prob.rst"));
  write_raster(p.hard, c.out("hard.rst"));
}

/// posterior.rst and posterior_hard.rst
inline void run_fuse(const PipelineConfig& c) {
  const Raster prior = detail::read_input(c.fuse.prior.value_or(c.out("prob.rst")));
  std::vector<fs::path> paths = c.fuse.evidence;
  if (paths.empty()) paths.push_back(c.out("noisy_labels.rst"));
  std::vector<Raster> layers;
  for (const auto& p : paths) layers.push_back(detail::read_input(p));
  std::vector<const Raster*> ptrs;
  for (const auto& l : layers) ptrs.push_back(&l);
  const Raster posterior = fuse(prior, ptrs, c.fuse.sensor, c.fuse.neighborhood, c.fuse.block);
  Raster hard = threshold(posterior);
  hard.set_classes({{0, "other"}, {1, "oil_palm"}});
  write_raster(posterior, c.out("posterior.rst"));
  write_raster(hard, c.out("posterior_hard.rst"));
}

/// report.json and report.txt
inline EvalReport run_evaluate(const PipelineConfig& c) {
  const fs::path map_path = c.evaluate.map.value_or(c.out("hard.rst"));
  const Raster map = detail::read_input(map_path);
  const fs::path pts = c.evaluate.points.value_or(c.out("points.csv"));
  if (!fs::exists(pts)) throw Error(ErrorKind::Io, "missing input", pts.string());
  const EvalReport report = metrics(confusion_at_points(map, read_points_csv(pts), c.evaluate.year));
  nlohmann::json j = to_json(report);
  j["map"] = map_path.filename().string();
  j["year"] = c.evaluate.year;
  fs::create_directories(c.workdir);
  detail::write_file(c.out("report.json"), j.dump(2) + "\n");
  detail::write_file(c.out("report.txt"), format_report_table({{map_path.filename().string(), report}}));
  return report;
}

/// flows.csv and matrix.json
inline TransitionMatrix run_transitions(const PipelineConfig& c) {
  const Raster a = detail::read_input(c.transitions.from.value_or(c.out("noisy_labels.rst")));
  const Raster b = detail::read_input(c.transitions.to.value_or(c.out("hard.rst")));
  const TransitionMatrix tm = transition_matrix(a, b, c.transitions.classes);
  fs::create_directories(c.workdir);
  std::optional<double> area = c.transitions.pixel_area_m2;
  if (!area) area = a.geo().pixel_area();
  export_flows(tm, c.out("flows.csv"), area);
  write_matrix_json(tm, c.out("matrix.json"));
  return tm;
}

}  // namespace noisemap
