// noisemap command-line driver.
//
//   noisemap <synth|prepare|train|predict|fuse|evaluate|transitions> --config <path> [flags]
//
// Errors are reported on stderr as {"error": {"kind", "message", "path"}} and
// the process exits with status 1 (2 for usage errors).

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "noisemap/pipeline.hpp"

namespace {

using nlohmann::json;

void report_error(std::string_view kind, const std::string& message, const std::string& path = {}) {
  json err = {{"kind", kind}, {"message", message}};
  if (!path.empty()) err["path"] = path;
  std::cerr << json{{"error", err}}.dump() << "\n";
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> workdir;
  std::optional<std::string> loss;
  std::optional<std::size_t> epochs;
  std::optional<double> l1, l0;
  std::optional<std::string> neighborhood;
  std::optional<std::size_t> block;
  std::optional<std::string> map;
};

json load_json(const std::string& path) {
  if (!std::filesystem::exists(path)) throw noisemap::Error(noisemap::ErrorKind::Io, "config file not found", path);
  try {
    return json::parse(noisemap::detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw noisemap::Error(noisemap::ErrorKind::Config, std::string("config is not valid JSON: ") + e.what(), path);
  }
}

void apply_overrides(json& j, const Overrides& o) {
  if (!j.is_object()) throw noisemap::Error(noisemap::ErrorKind::Config, "config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.workdir) j["workdir"] = *o.workdir;
  if (o.loss) j["train"]["loss"] = *o.loss;
  if (o.epochs) j["train"]["epochs"] = *o.epochs;
  if (o.l1) j["fuse"]["l1"] = *o.l1;
  if (o.l0) j["fuse"]["l0"] = *o.l0;
  if (o.neighborhood) j["fuse"]["neighborhood"] = *o.neighborhood;
  if (o.block) j["fuse"]["block"] = *o.block;
  if (o.map) j["evaluate"]["map"] = *o.map;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"noisemap: plantation mapping from noisy labels"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides o;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "pipeline config (JSON)")->required();
    sub->add_option("--workdir", o.workdir, "override the output directory");
    sub->add_option("--seed", o.seed, "override the root seed");
    return sub;
  };
  add("synth", "generate a synthetic landscape, noisy labels and validation points");
  add("prepare", "cut patches and write the train/val manifest");
  CLI::App* train = add("train", "train the segmentation model");
  train->add_option("--loss", o.loss, "dmi or bce")->check(CLI::IsMember({"dmi", "bce"}));
  train->add_option("--epochs", o.epochs, "number of epochs");
  add("predict", "tiled inference over the full image");
  CLI::App* fuse = add("fuse", "combine the probability map with ancillary evidence");
  fuse->add_option("--sensor-l1", o.l1, "p(observation = 1 | palm)");
  fuse->add_option("--sensor-l0", o.l0, "p(observation = 1 | not palm)");
  fuse->add_option("--neighborhood", o.neighborhood, "single or block")->check(CLI::IsMember({"single", "block"}));
  fuse->add_option("--block", o.block, "block size for the block neighborhood");
  CLI::App* evaluate = add("evaluate", "accuracy of a hard map at the validation points");
  evaluate->add_option("--map", o.map, "hard map to evaluate (default: hard.rst)");
  add("transitions", "transition matrix and flows between two categorical maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    json j = load_json(config_path);
    apply_overrides(j, o);
    const auto base = std::filesystem::absolute(config_path).parent_path();
    const noisemap::PipelineConfig cfg = noisemap::parse_pipeline_config(j, base);

    if (stage == "synth") {
      noisemap::run_synth(cfg);
    } else if (stage == "prepare") {
      noisemap::run_prepare(cfg);
    } else if (stage == "train") {
      const auto result = noisemap::run_train(cfg);
      const auto& last = result.history.back();
      std::cout << "epochs " << result.history.size() << " train_loss " << noisemap::format_double(last.train_loss)
                << " val_loss " << noisemap::format_double(last.val_loss) << "\n";
    } else if (stage == "predict") {
      noisemap::run_predict(cfg);
    } else if (stage == "fuse") {
      noisemap::run_fuse(cfg);
    } else if (stage == "evaluate") {
      const auto report = noisemap::run_evaluate(cfg);
      std::cout << noisemap::format_report_table({{"map", report}});
    } else if (stage == "transitions") {
      noisemap::run_transitions(cfg);
    }
  } catch (const noisemap::Error& e) {
    report_error(noisemap::to_string(e.kind()), e.what(), e.path());
    return 1;
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
