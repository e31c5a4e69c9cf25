// wfunet: synth | build | train | eval | predict over one output directory.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wfunet/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> run_id;
};

void record_config(const wfunet::RunConfig& cfg, const std::string& command) {
  wfunet::write_text(cfg.out / ("config_" + command + ".json"),
                     wfunet::to_json(cfg).dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Precipitation nowcasting with Core UNet and WF-UNet"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GlobalFlags g;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for generation, splits, initialization and dropout");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--run-id", g.run_id, "Run identifier recorded with the outputs");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic advection dataset");
  std::optional<std::size_t> height, width, length, episode;
  synth->add_option("--height", height, "Grid height");
  synth->add_option("--width", width, "Grid width");
  synth->add_option("--length", length, "Number of frames");
  synth->add_option("--episode-length", episode, "Frames per constant-wind episode");

  auto* build = app.add_subcommand("build", "Derive wind speed, crop, normalize, filter, split");
  std::optional<double> min_rain;
  std::optional<std::size_t> lag;
  std::vector<std::size_t> build_horizons;
  build->add_option("--min-rain-fraction", min_rain, "Keep targets with at least this rain share");
  build->add_option("--lag", lag, "Input frames per window");
  build->add_option("--horizons", build_horizons, "Lead times to build manifests for")
      ->delimiter(',');

  auto* train = app.add_subcommand("train", "Train one model for one horizon");
  wfunet::TrainOptionsCli topt;
  std::optional<std::size_t> epochs;
  train->add_option("--model", topt.model, "core-unet or wf-unet")
      ->check(CLI::IsMember({"core-unet", "wf-unet"}));
  train->add_option("--horizon", topt.horizon, "Lead time in steps");
  train->add_option("--epochs", epochs, "Maximum number of epochs");
  train->add_flag("--resume", topt.resume, "Continue from the saved training state");
  train->add_option("--stop-after", topt.stop_after, "Stop after this many epochs in this run");
  train->add_flag("--quiet", topt.quiet, "No per-epoch log lines");

  auto* eval = app.add_subcommand("eval", "Evaluate persistence and trained models");
  std::vector<std::size_t> eval_horizons;
  std::vector<std::string> models;
  bool no_persistence = false;
  std::optional<std::size_t> export_maps;
  eval->add_option("--horizons", eval_horizons, "Lead times to evaluate")->delimiter(',');
  eval->add_option("--models", models, "Trained models to include")->delimiter(',');
  eval->add_flag("--no-persistence", no_persistence, "Leave out the persistence baseline");
  eval->add_option("--export-stream-maps", export_maps,
                   "Export WF-UNet stream maps for this many test windows");

  auto* predict = app.add_subcommand("predict", "Single nowcast from a checkpoint");
  std::string checkpoint;
  std::size_t anchor = 0;
  std::optional<std::string> output;
  predict->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  predict->add_option("--anchor", anchor, "Index of the last input frame")->required();
  predict->add_option("--output", output, "Output RGS file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    wfunet::RunConfig cfg = g.config.empty() ? wfunet::RunConfig{} : wfunet::load_run_config(g.config);
    if (g.seed) cfg.seed = *g.seed;
    if (g.out) cfg.out = *g.out;
    if (g.run_id) cfg.run_id = *g.run_id;

    if (synth->parsed()) {
      if (height) cfg.synthetic.height = *height;
      if (width) cfg.synthetic.width = *width;
      if (length) cfg.synthetic.sequence_length = *length;
      if (episode) cfg.synthetic.episode_length = *episode;
      const auto r = wfunet::cmd_synth(cfg);
      record_config(cfg, "synth");
      std::cout << "wrote " << r.tp.string() << ", " << r.u.string() << ", " << r.v.string()
                << '\n';
    } else if (build->parsed()) {
      if (min_rain) cfg.filter.min_rain_fraction = *min_rain;
      if (lag) cfg.lag = *lag;
      if (!build_horizons.empty()) cfg.horizons = build_horizons;
      const auto r = wfunet::cmd_build(cfg);
      record_config(cfg, "build");
      for (const auto& [h, m] : r.manifests) {
        std::cout << "horizon " << h << ": train " << m.split("train").size() << ", val "
                  << m.split("val").size() << ", test " << m.split("test").size() << '\n';
      }
      std::cout << "norm_max tp " << r.tp_norm_max << ", ws " << r.ws_norm_max << '\n';
    } else if (train->parsed()) {
      if (epochs) cfg.train.max_epochs = *epochs;
      const auto r = wfunet::cmd_train(cfg, topt);
      record_config(cfg, "train");
      std::cout << topt.model << " h" << topt.horizon << ": "
                << wfunet::to_string(r.history.stop_reason) << " after "
                << r.history.epochs.size() << " epochs, best epoch " << r.history.best_epoch
                << " (val " << r.history.best_val_loss << "), checkpoint "
                << r.checkpoint.string() << '\n';
    } else if (eval->parsed()) {
      if (!eval_horizons.empty()) cfg.eval.horizons = eval_horizons;
      if (!models.empty()) cfg.eval_models = models;
      if (export_maps) cfg.export_stream_maps = *export_maps;
      const auto report = wfunet::cmd_eval(cfg, !no_persistence);
      record_config(cfg, "eval");
      std::cout << wfunet::report_table(report);
    } else if (predict->parsed()) {
      const auto r = wfunet::cmd_predict(
          cfg, checkpoint, anchor,
          output ? std::optional<std::filesystem::path>(*output) : std::nullopt);
      std::cout << "wrote " << r.path.string() << '\n';
    }
  } catch (const wfunet::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
