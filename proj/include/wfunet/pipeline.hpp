#pragma once

// Command implementations behind the `wfunet` tool. Every command reads a
// RunConfig plus its own options and writes plain files under `out`.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "wfunet/checkpoint.hpp"
#include "wfunet/dataset.hpp"
#include "wfunet/evaluation.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/model_core.hpp"
#include "wfunet/model_fusion.hpp"
#include "wfunet/synthetic.hpp"
#include "wfunet/training.hpp"

namespace wfunet {

struct CropConfig {
  bool enabled = true;
  std::size_t height = 96;
  std::size_t width = 96;
  /// Absent offsets centre the window.
  std::optional<std::size_t> top;
  std::optional<std::size_t> left;
};

struct DataSources {
  std::optional<std::filesystem::path> tp, u, v;
};

struct RunConfig {
  std::string run_id = "run";
  std::filesystem::path out = "out";
  std::uint64_t seed = 0;
  SyntheticConfig synthetic;
  DataSources data;
  CropConfig crop;
  FilterRule filter;
  std::size_t lag = 12;
  std::vector<std::size_t> horizons{1, 2, 3};
  SplitConfig split;
  CoreUNetConfig model;
  TrainConfig train;
  EvalConfig eval;
  /// Trained models to compare against persistence in `eval`.
  std::vector<std::string> eval_models;
  /// Number of test windows whose WF-UNet stream maps are exported.
  std::size_t export_stream_maps = 0;

  std::filesystem::path synth_dir() const { return out / "synth"; }
  std::filesystem::path data_dir() const { return out / "data"; }
  std::filesystem::path model_dir(const std::string& model, std::size_t horizon) const {
    return out / "models" / (model + "_h" + std::to_string(horizon));
  }
  std::filesystem::path eval_dir() const { return out / "eval"; }
  std::filesystem::path manifest_path(std::size_t horizon) const {
    return data_dir() / ("manifest_h" + std::to_string(horizon) + ".json");
  }
};

namespace cfgjson {

inline Range range(const nlohmann::json& j, Range r) {
  if (j.is_array() && j.size() == 2) return {j[0].get<double>(), j[1].get<double>()};
  if (j.is_number()) return {j.get<double>(), j.get<double>()};
  throw ConfigurationError("range must be a number or a [lo, hi] pair");
}

inline nlohmann::json range(Range r) { return nlohmann::json::array({r.lo, r.hi}); }

}  // namespace cfgjson

/// Overlays the keys present in `j` onto `base`.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  try {
    c.run_id = j.value("run_id", c.run_id);
    if (j.contains("out")) c.out = j["out"].get<std::string>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("synthetic")) {
      const auto& s = j["synthetic"];
      auto& g = c.synthetic;
      g.height = s.value("height", g.height);
      g.width = s.value("width", g.width);
      g.sequence_length = s.value("length", g.sequence_length);
      g.episode_length = s.value("episode_length", g.episode_length);
      g.n_blobs = s.value("n_blobs", g.n_blobs);
      if (s.contains("amplitude")) g.amplitude = cfgjson::range(s["amplitude"], g.amplitude);
      if (s.contains("sigma")) g.sigma = cfgjson::range(s["sigma"], g.sigma);
      if (s.contains("vx")) g.vx = cfgjson::range(s["vx"], g.vx);
      if (s.contains("vy")) g.vy = cfgjson::range(s["vy"], g.vy);
      g.noise_std = s.value("noise_std", g.noise_std);
      if (s.contains("start_time")) g.start_time = parse_iso8601(s["start_time"].get<std::string>());
      g.step_hours = s.value("step_hours", g.step_hours);
    }
    if (j.contains("data")) {
      for (auto [key, slot] : {std::pair{"tp", &c.data.tp}, std::pair{"u", &c.data.u},
                               std::pair{"v", &c.data.v}}) {
        if (j["data"].contains(key) && !j["data"][key].is_null())
          *slot = j["data"][key].get<std::string>();
      }
    }
    if (j.contains("crop")) {
      const auto& k = j["crop"];
      if (k.is_null() || k == false) {
        c.crop.enabled = false;
      } else {
        c.crop.enabled = k.value("enabled", true);
        c.crop.height = k.value("height", c.crop.height);
        c.crop.width = k.value("width", c.crop.width);
        if (k.contains("top")) c.crop.top = k["top"].get<std::size_t>();
        if (k.contains("left")) c.crop.left = k["left"].get<std::size_t>();
      }
    }
    if (j.contains("filter")) {
      c.filter.min_rain_fraction = j["filter"].value("min_rain_fraction", c.filter.min_rain_fraction);
      c.filter.rain_pixel_threshold =
          j["filter"].value("rain_pixel_threshold", c.filter.rain_pixel_threshold);
    }
    if (j.contains("window")) {
      c.lag = j["window"].value("lag", c.lag);
      c.horizons = j["window"].value("horizons", c.horizons);
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      c.split.train_years = s.value("train_years", c.split.train_years);
      c.split.test_year = s.value("test_year", c.split.test_year);
      c.split.validation_fraction = s.value("validation_fraction", c.split.validation_fraction);
    }
    if (j.contains("model")) c.model = core_config_from_json(j["model"], c.model);
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      c.eval.binarize_threshold = e.value("binarize_threshold", c.eval.binarize_threshold);
      c.eval.horizons = e.value("horizons", c.eval.horizons);
      c.eval_models = e.value("models", c.eval_models);
      c.export_stream_maps = e.value("export_stream_maps", c.export_stream_maps);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError(std::string("malformed run config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["run_id"] = c.run_id;
  j["out"] = c.out.string();
  j["seed"] = c.seed;
  const auto& g = c.synthetic;
  j["synthetic"] = {{"height", g.height},
                    {"width", g.width},
                    {"length", g.sequence_length},
                    {"episode_length", g.episode_length},
                    {"n_blobs", g.n_blobs},
                    {"amplitude", cfgjson::range(g.amplitude)},
                    {"sigma", cfgjson::range(g.sigma)},
                    {"vx", cfgjson::range(g.vx)},
                    {"vy", cfgjson::range(g.vy)},
                    {"noise_std", g.noise_std},
                    {"start_time", format_iso8601(g.start_time)},
                    {"step_hours", g.step_hours}};
  auto path_or_null = [](const std::optional<std::filesystem::path>& p) {
    return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr);
  };
  j["data"] = {{"tp", path_or_null(c.data.tp)},
               {"u", path_or_null(c.data.u)},
               {"v", path_or_null(c.data.v)}};
  j["crop"] = {{"enabled", c.crop.enabled}, {"height", c.crop.height}, {"width", c.crop.width}};
  if (c.crop.top) j["crop"]["top"] = *c.crop.top;
  if (c.crop.left) j["crop"]["left"] = *c.crop.left;
  j["filter"] = {{"min_rain_fraction", c.filter.min_rain_fraction},
                 {"rain_pixel_threshold", c.filter.rain_pixel_threshold}};
  j["window"] = {{"lag", c.lag}, {"horizons", c.horizons}};
  j["split"] = {{"train_years", c.split.train_years},
                {"test_year", c.split.test_year},
                {"validation_fraction", c.split.validation_fraction}};
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["eval"] = {{"binarize_threshold", c.eval.binarize_threshold},
               {"horizons", c.eval.horizons},
               {"models", c.eval_models},
               {"export_stream_maps", c.export_stream_maps}};
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigurationError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigurationError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------

struct SynthResult {
  std::filesystem::path tp, u, v;
};

inline SynthResult cmd_synth(const RunConfig& cfg) {
  if (cfg.synthetic.height == 0 || cfg.synthetic.width == 0)
    throw ConfigurationError("synth needs a grid size (--height and --width)");
  if (cfg.synthetic.sequence_length == 0)
    throw ConfigurationError("synth needs a sequence length (--length)");
  auto g = cfg.synthetic;
  g.seed = cfg.seed;
  const auto s = generate(g);
  SynthResult r{cfg.synth_dir() / "tp.rgs", cfg.synth_dir() / "u.rgs", cfg.synth_dir() / "v.rgs"};
  write_series(s.tp, r.tp);
  write_series(s.u, r.u);
  write_series(s.v, r.v);
  return r;
}

struct BuildResult {
  std::map<std::size_t, DatasetManifest> manifests;
  double tp_norm_max = 0;
  double ws_norm_max = 0;
};

/// Source files: explicit `data` paths, else the output of `synth`.
inline std::array<VariableSeries, 3> load_sources(const RunConfig& cfg) {
  auto pick = [&](const std::optional<std::filesystem::path>& p, const char* name) {
    const auto path = p ? *p : cfg.synth_dir() / (std::string(name) + ".rgs");
    if (!std::filesystem::exists(path))
      throw ConfigurationError("input '" + path.string() + "' not found (run synth or set data." +
                               name + ")");
    return read_series(path);
  };
  return {pick(cfg.data.tp, "tp"), pick(cfg.data.u, "u"), pick(cfg.data.v, "v")};
}

inline BuildResult cmd_build(const RunConfig& cfg) {
  auto [tp_raw, u, v] = load_sources(cfg);
  auto ws = wind_speed(u, v);
  if (ws.length() != tp_raw.length() || ws.height() != tp_raw.height() ||
      ws.width() != tp_raw.width())
    throw AlignmentError("wind and precipitation grids differ");

  VariableSeries tp = tp_raw;
  if (cfg.crop.enabled) {
    CropSpec spec = CropSpec::centered(tp.height(), tp.width(), cfg.crop.height, cfg.crop.width);
    if (cfg.crop.top) spec.top = *cfg.crop.top;
    if (cfg.crop.left) spec.left = *cfg.crop.left;
    tp = crop(tp, spec);
    ws = crop(ws, spec);
  }

  // Normalization maxima come from training-year frames only.
  std::set<int> train_years(cfg.split.train_years.begin(), cfg.split.train_years.end());
  std::vector<std::size_t> train_frames;
  for (std::size_t t = 0; t < tp.length(); ++t)
    if (train_years.count(year_of(tp.timestamp(t)))) train_frames.push_back(t);
  if (train_frames.empty()) throw ConfigurationError("no frames fall in the training years");

  BuildResult r;
  r.tp_norm_max = fit_norm_max(tp, train_frames);
  r.ws_norm_max = fit_norm_max(ws, train_frames);

  auto split = cfg.split;
  split.seed = cfg.seed;
  for (std::size_t h : cfg.horizons) {
    const WindowSpec window{cfg.lag, h};
    auto anchors = filter_targets(tp, cfg.filter, window);
    auto m = split_by_year(tp, std::move(anchors), cfg.filter, window, split);
    m.sources = {"tp.rgs", "ws.rgs"};
    m.norm_max = {{"tp", r.tp_norm_max}, {"ws", r.ws_norm_max}};
    write_text(cfg.manifest_path(h), to_json(m).dump(2) + "\n");
    r.manifests.emplace(h, std::move(m));
  }
  write_series(normalize(tp, r.tp_norm_max), cfg.data_dir() / "tp.rgs");
  write_series(normalize(ws, r.ws_norm_max), cfg.data_dir() / "ws.rgs");
  return r;
}

/// Normalized series written by `build`, keyed by variable name.
inline std::map<std::string, VariableSeries> load_variables(const RunConfig& cfg) {
  std::map<std::string, VariableSeries> vars;
  for (const char* name : {"tp", "ws"}) {
    const auto path = cfg.data_dir() / (std::string(name) + ".rgs");
    if (!std::filesystem::exists(path))
      throw ConfigurationError("'" + path.string() + "' not found (run build first)");
    vars.emplace(name, read_series(path));
  }
  return vars;
}

inline DatasetManifest load_manifest(const RunConfig& cfg, std::size_t horizon) {
  const auto path = cfg.manifest_path(horizon);
  if (!std::filesystem::exists(path))
    throw ConfigurationError("no manifest for horizon " + std::to_string(horizon) + " at '" +
                             path.string() + "' (run build with this horizon)");
  return manifest_from_json(read_json(path));
}

struct TrainOptionsCli {
  std::string model = "wf-unet";
  std::size_t horizon = 1;
  bool resume = false;
  /// Stop after this many epochs in this invocation (0 = run to completion).
  std::size_t stop_after = 0;
  bool quiet = false;
};

struct TrainCmdResult {
  std::filesystem::path checkpoint;
  TrainHistory history;
};

namespace detail {

template <typename Model>
TrainCmdResult run_training(const RunConfig& cfg, const TrainOptionsCli& opt,
                            const DatasetManifest& manifest,
                            const std::map<std::string, VariableSeries>& vars) {
  CoreUNetConfig mc = cfg.model;
  mc.input_lag = manifest.window.lag;
  mc.height = vars.at("tp").height();
  mc.width = vars.at("tp").width();
  mc.validate();

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.horizon = opt.horizon;

  const auto dir = cfg.model_dir(opt.model, opt.horizon);
  std::filesystem::create_directories(dir);
  TrainOptions to;
  to.state_dir = dir / "state";
  to.resume = opt.resume;
  to.stop_after_epochs = opt.stop_after;
  if (!opt.quiet) {
    to.on_epoch = [&](const EpochRecord& e) {
      std::clog << opt.model << " h" << opt.horizon << " epoch " << e.epoch << " lr " << e.lr
                << " train " << e.train_loss << " val " << e.val_loss << '\n';
    };
  }
  auto result = train(Model(mc, cfg.seed), manifest, vars, tc, to);

  TrainCmdResult r;
  r.checkpoint = dir / "checkpoint";
  r.history = result.history;
  save_checkpoint(result.best_model, r.checkpoint,
                  {{"horizon", opt.horizon},
                   {"lag", manifest.window.lag},
                   {"norm_max", manifest.norm_max.at("tp")},
                   {"best_epoch", result.history.best_epoch},
                   {"best_val_loss", result.history.best_val_loss}});
  write_text(dir / "history.csv", result.history.to_csv());
  write_text(dir / "history.json", result.history.to_json().dump(2) + "\n");
  return r;
}

}  // namespace detail

inline TrainCmdResult cmd_train(const RunConfig& cfg, const TrainOptionsCli& opt) {
  const auto manifest = load_manifest(cfg, opt.horizon);
  const auto vars = load_variables(cfg);
  if (opt.model == CoreUNet<float>::kTypeName)
    return detail::run_training<CoreUNet<float>>(cfg, opt, manifest, vars);
  if (opt.model == WFUNet<float>::kTypeName)
    return detail::run_training<WFUNet<float>>(cfg, opt, manifest, vars);
  throw ConfigurationError("unknown model '" + opt.model + "' (expected core-unet or wf-unet)");
}

inline MetricsReport cmd_eval(const RunConfig& cfg, bool include_persistence = true) {
  const auto vars = load_variables(cfg);
  std::map<std::size_t, std::vector<SampleWindow<double>>> test;
  std::optional<double> norm_max;
  for (std::size_t h : cfg.eval.horizons) {
    const auto m = load_manifest(cfg, h);
    const double nm = m.norm_max.at("tp");
    if (norm_max && *norm_max != nm)
      throw ConsistencyError("manifests disagree on the precipitation maximum");
    norm_max = nm;
    test[h] = materialize<double>(m, "test", vars, {"tp", "ws"});
  }
  if (!norm_max) throw ConfigurationError("no evaluation horizons requested");

  // Models are kept alive here; forecasters refer to them.
  std::map<std::pair<std::string, std::size_t>, AnyModel<float>> loaded;
  std::vector<ModelEntry> entries;
  for (const auto& name : cfg.eval_models) {
    ModelEntry entry{name, {}};
    for (std::size_t h : cfg.eval.horizons) {
      const auto dir = cfg.model_dir(name, h) / "checkpoint";
      if (!std::filesystem::exists(dir / "meta.json"))
        throw ConfigurationError("missing checkpoint '" + dir.string() + "'");
      auto [it, _] = loaded.emplace(std::pair{name, h}, load_any_checkpoint<float>(dir));
      entry.by_horizon[h] =
          std::visit([](const auto& model) { return make_forecaster(model); }, it->second);
    }
    entries.push_back(std::move(entry));
  }

  auto report = build_report(entries, test, *norm_max, cfg.eval, include_persistence);
  write_report(report, cfg.eval_dir());

  if (cfg.export_stream_maps > 0) {
    for (const auto& [key, model] : loaded) {
      if (const auto* wf = std::get_if<WFUNet<float>>(&model)) {
        const auto& windows = test.at(key.second);
        const std::size_t n = std::min(cfg.export_stream_maps, windows.size());
        std::vector<SampleWindow<double>> pick(windows.begin(), windows.begin() + n);
        export_stream_maps(*wf, pick, vars.at("tp").meta(),
                           cfg.eval_dir() / "stream_maps" / (key.first + "_h" +
                                                             std::to_string(key.second)));
      }
    }
  }
  return report;
}

struct PredictResult {
  std::filesystem::path path;
  VariableSeries frame;
};

/// Nowcast from the `lag` frames ending at `anchor`, written as a one-frame
/// series in normalized units (norm_max recorded in the sidecar).
inline PredictResult cmd_predict(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                 std::size_t anchor,
                                 std::optional<std::filesystem::path> output = std::nullopt) {
  const auto info = read_checkpoint_info(checkpoint);
  const auto vars = load_variables(cfg);
  const auto& tp = vars.at("tp");
  const std::size_t horizon = info.extra.value("horizon", std::size_t{1});
  const WindowSpec spec{info.config.input_lag, 0};
  if (anchor + 1 < spec.lag || anchor >= tp.length() ||
      tp.segment_of(anchor + 1 - spec.lag) != tp.segment_of(anchor))
    throw BoundsError("anchor " + std::to_string(anchor) + " has no complete lag-" +
                      std::to_string(spec.lag) + " window in " + std::to_string(tp.length()) +
                      " frames");
  const auto window = make_window<float>(vars, {"tp", "ws"}, spec, anchor);
  const auto model = load_any_checkpoint<float>(checkpoint);
  const GridFrame frame = std::visit(
      [&](const auto& m) { return m.predict(window).template cast<double>(); }, model);

  SeriesMeta meta = tp.meta();
  meta.variable_name = "tp_forecast";
  meta.start_time = tp.timestamp(anchor) + std::chrono::hours{static_cast<long>(tp.meta().step_hours) * static_cast<long>(horizon)};
  meta.segment_length = 0;
  PredictResult r{output ? *output
                         : cfg.out / "predict" /
                               (info.model_type + "_h" + std::to_string(horizon) + "_a" +
                                std::to_string(anchor) + ".rgs"),
                  VariableSeries(meta, {frame})};
  write_series(r.frame, r.path);
  return r;
}

}  // namespace wfunet
