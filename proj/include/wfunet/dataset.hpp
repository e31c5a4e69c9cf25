#pragma once

// Rain-coverage filtering, year splits, and sliding-window sample assembly.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "wfunet/error.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/tensor.hpp"

namespace wfunet {

struct FilterRule {
  double min_rain_fraction = 0.0;
  /// A pixel is rainy iff its denormalized value is strictly above this.
  double rain_pixel_threshold = 0.0;

  void validate() const {
    if (!(min_rain_fraction >= 0.0 && min_rain_fraction <= 1.0))
      throw ConfigurationError("min_rain_fraction must lie in [0, 1]");
    if (!(rain_pixel_threshold >= 0.0))
      throw ConfigurationError("rain_pixel_threshold must be non-negative");
  }
};

struct WindowSpec {
  std::size_t lag = 12;
  std::size_t horizon = 1;

  void validate() const {
    if (lag < 1) throw ConfigurationError("lag must be at least 1");
    if (horizon < 1) throw ConfigurationError("horizon must be at least 1");
  }
};

/// One supervised example. Input blocks are (1, lag, H, W) so they feed
/// straight into the first convolution.
template <typename S>
struct SampleWindow {
  std::map<std::string, FeatureBlock<S>> inputs;
  BasicFrame<S> target;
  std::size_t anchor = 0;
  Timestamp anchor_time{};

  const FeatureBlock<S>& input(const std::string& name) const {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw ConfigurationError("window has no input '" + name + "'");
    return it->second;
  }

  template <typename T>
  SampleWindow<T> cast() const {
    SampleWindow<T> out;
    for (const auto& [k, v] : inputs) out.inputs.emplace(k, v.template cast<T>());
    out.target = target.template cast<T>();
    out.anchor = anchor;
    out.anchor_time = anchor_time;
    return out;
  }
};

struct DatasetManifest {
  FilterRule filter;
  WindowSpec window;
  std::map<std::string, std::vector<std::size_t>> splits;
  std::vector<std::string> sources;
  std::uint64_t validation_seed = 0;
  /// Training-split maxima used to normalize each variable.
  std::map<std::string, double> norm_max;

  const std::vector<std::size_t>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw ManifestError("manifest has no split '" + name + "'");
    return it->second;
  }

  bool operator==(const DatasetManifest& o) const {
    return filter.min_rain_fraction == o.filter.min_rain_fraction &&
           filter.rain_pixel_threshold == o.filter.rain_pixel_threshold &&
           window.lag == o.window.lag && window.horizon == o.window.horizon &&
           splits == o.splits && sources == o.sources && validation_seed == o.validation_seed &&
           norm_max == o.norm_max;
  }
};

inline double rain_fraction(const GridFrame& frame, double threshold) {
  std::size_t rainy = 0;
  for (double v : frame.values) rainy += v > threshold ? 1 : 0;
  return static_cast<double>(rainy) / static_cast<double>(frame.values.size());
}

/// True when frames [t-lag+1, t+horizon] exist and lie in one segment.
inline bool window_in_bounds(const VariableSeries& series, const WindowSpec& spec,
                             std::size_t anchor) {
  if (anchor + 1 < spec.lag) return false;
  const std::size_t first = anchor + 1 - spec.lag;
  const std::size_t last = anchor + spec.horizon;
  if (last >= series.length()) return false;
  return series.segment_of(first) == series.segment_of(last);
}

/// Anchors whose target frame (anchor + horizon) has at least
/// `min_rain_fraction` rainy pixels. Ascending order.
inline std::vector<std::size_t> filter_targets(const VariableSeries& tp, const FilterRule& rule,
                                               const WindowSpec& spec,
                                               std::vector<std::string>* warnings = nullptr) {
  rule.validate();
  spec.validate();
  std::vector<std::size_t> anchors;
  if (tp.length() < spec.lag + spec.horizon) {
    const std::string msg = "series '" + tp.variable_name() + "' has " +
                            std::to_string(tp.length()) + " frames, fewer than lag + horizon = " +
                            std::to_string(spec.lag + spec.horizon) + "; no windows";
    if (warnings) warnings->push_back(msg);
    std::clog << "warning: " << msg << '\n';
    return anchors;
  }
  // Thresholds are physical; a normalized series is compared in its own units.
  const double threshold = tp.normalized()
                               ? rule.rain_pixel_threshold / *tp.meta().norm_max
                               : rule.rain_pixel_threshold;
  for (std::size_t t = spec.lag - 1; t + spec.horizon < tp.length(); ++t) {
    if (!window_in_bounds(tp, spec, t)) continue;
    if (rain_fraction(tp.frame(t + spec.horizon), threshold) >= rule.min_rain_fraction) {
      anchors.push_back(t);
    }
  }
  return anchors;
}

struct SplitConfig {
  std::vector<int> train_years;
  int test_year = 0;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// Partitions anchors by the year of their target frame. A window is kept
/// only if every frame it touches belongs to the same split, so no lag
/// window reaches across a split boundary. Validation anchors are drawn
/// without replacement from the training-year anchors.
inline DatasetManifest split_by_year(const VariableSeries& tp, std::vector<std::size_t> anchors,
                                     const FilterRule& rule, const WindowSpec& spec,
                                     const SplitConfig& cfg) {
  if (!(cfg.validation_fraction >= 0.0 && cfg.validation_fraction < 1.0))
    throw ConfigurationError("validation_fraction must lie in [0, 1)");
  if (cfg.train_years.empty()) throw ConfigurationError("no training years requested");

  std::set<int> present;
  for (std::size_t t = 0; t < tp.length(); ++t) present.insert(year_of(tp.timestamp(t)));
  std::set<int> train_years(cfg.train_years.begin(), cfg.train_years.end());
  for (int y : train_years) {
    if (!present.count(y))
      throw ConfigurationError("training year " + std::to_string(y) + " absent from the data");
    if (y == cfg.test_year)
      throw ConfigurationError("year " + std::to_string(y) + " is both train and test");
  }
  if (!present.count(cfg.test_year))
    throw ConfigurationError("test year " + std::to_string(cfg.test_year) +
                             " absent from the data");

  enum class Side { kTrain, kTest, kNone };
  auto side_of = [&](std::size_t frame) {
    const int y = year_of(tp.timestamp(frame));
    if (train_years.count(y)) return Side::kTrain;
    if (y == cfg.test_year) return Side::kTest;
    return Side::kNone;
  };

  std::vector<std::size_t> train_pool, test;
  std::sort(anchors.begin(), anchors.end());
  for (auto t : anchors) {
    if (!window_in_bounds(tp, spec, t)) continue;
    const Side target_side = side_of(t + spec.horizon);
    if (target_side == Side::kNone) continue;
    bool contained = true;
    for (std::size_t f = t + 1 - spec.lag; f < t + spec.horizon; ++f) {
      if (side_of(f) != target_side) {
        contained = false;
        break;
      }
    }
    if (!contained) continue;
    (target_side == Side::kTrain ? train_pool : test).push_back(t);
  }

  const auto n_val = static_cast<std::size_t>(
      std::floor(cfg.validation_fraction * static_cast<double>(train_pool.size())));
  std::vector<std::size_t> order(train_pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  // Partial Fisher-Yates: the first n_val positions become the validation draw.
  for (std::size_t i = 0; i < n_val; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<char> is_val(train_pool.size(), 0);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = 1;

  DatasetManifest m;
  m.filter = rule;
  m.window = spec;
  m.validation_seed = cfg.seed;
  auto& train = m.splits["train"];
  auto& val = m.splits["val"];
  for (std::size_t i = 0; i < train_pool.size(); ++i)
    (is_val[i] ? val : train).push_back(train_pool[i]);
  m.splits["test"] = std::move(test);
  return m;
}

/// Checks disjointness and that every anchor yields an in-bounds window.
inline void validate_manifest(const DatasetManifest& manifest, const VariableSeries& tp) {
  std::set<std::size_t> seen;
  for (const auto& [name, list] : manifest.splits) {
    for (auto t : list) {
      if (!window_in_bounds(tp, manifest.window, t))
        throw ManifestError("split '" + name + "' anchor " + std::to_string(t) +
                            " does not yield an in-bounds window");
      if (!seen.insert(t).second)
        throw ManifestError("anchor " + std::to_string(t) + " appears in more than one split");
    }
  }
}

template <typename S = double>
SampleWindow<S> make_window(const std::map<std::string, VariableSeries>& variables,
                            const std::vector<std::string>& input_names,
                            const WindowSpec& spec, std::size_t anchor,
                            const std::string& target_name = "tp") {
  auto tp_it = variables.find(target_name);
  if (tp_it == variables.end())
    throw ConfigurationError("target variable '" + target_name + "' not provided");
  const auto& tp = tp_it->second;
  if (!window_in_bounds(tp, spec, anchor))
    throw ManifestError("anchor " + std::to_string(anchor) + " is out of bounds for lag " +
                        std::to_string(spec.lag) + ", horizon " + std::to_string(spec.horizon) +
                        " over " + std::to_string(tp.length()) + " frames");

  SampleWindow<S> w;
  w.anchor = anchor;
  w.anchor_time = tp.timestamp(anchor);
  const std::size_t first = anchor + 1 - spec.lag;
  for (const auto& name : input_names) {
    auto it = variables.find(name);
    if (it == variables.end()) throw ConfigurationError("variable '" + name + "' not provided");
    const auto& s = it->second;
    if (!s.normalized())
      throw StateError("variable '" + name + "' must be normalized before materializing");
    if (s.length() != tp.length() || s.height() != tp.height() || s.width() != tp.width())
      throw AlignmentError("variable '" + name + "' is not aligned with '" + target_name + "'");
    FeatureBlock<S> block(1, spec.lag, s.height(), s.width());
    for (std::size_t k = 0; k < spec.lag; ++k) {
      const auto& src = s.frame(first + k).values;
      std::copy(src.begin(), src.end(), block.values.begin() + k * block.plane());
    }
    w.inputs.emplace(name, std::move(block));
  }
  if (!tp.normalized())
    throw StateError("variable '" + target_name + "' must be normalized before materializing");
  w.target = tp.frame(anchor + spec.horizon).template cast<S>();
  return w;
}

/// Windows for one split, in manifest order.
template <typename S = double>
std::vector<SampleWindow<S>> materialize(const DatasetManifest& manifest,
                                         const std::string& split,
                                         const std::map<std::string, VariableSeries>& variables,
                                         const std::vector<std::string>& input_names) {
  std::vector<SampleWindow<S>> out;
  const auto& anchors = manifest.split(split);
  out.reserve(anchors.size());
  for (auto t : anchors) out.push_back(make_window<S>(variables, input_names, manifest.window, t));
  return out;
}

// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["filter"] = {{"min_rain_fraction", m.filter.min_rain_fraction},
                 {"rain_pixel_threshold", m.filter.rain_pixel_threshold}};
  j["window"] = {{"lag", m.window.lag}, {"horizon", m.window.horizon}};
  j["splits"] = nlohmann::json::object();
  for (const auto& [k, v] : m.splits) j["splits"][k] = v;
  j["sources"] = m.sources;
  j["validation_seed"] = m.validation_seed;
  j["norm_max"] = nlohmann::json::object();
  for (const auto& [k, v] : m.norm_max) j["norm_max"][k] = v;
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.filter.min_rain_fraction = j.at("filter").at("min_rain_fraction").get<double>();
    m.filter.rain_pixel_threshold = j.at("filter").at("rain_pixel_threshold").get<double>();
    m.window.lag = j.at("window").at("lag").get<std::size_t>();
    m.window.horizon = j.at("window").at("horizon").get<std::size_t>();
    for (const auto& [k, v] : j.at("splits").items())
      m.splits[k] = v.get<std::vector<std::size_t>>();
    m.sources = j.value("sources", std::vector<std::string>{});
    m.validation_seed = j.value("validation_seed", std::uint64_t{0});
    if (j.contains("norm_max"))
      for (const auto& [k, v] : j["norm_max"].items()) m.norm_max[k] = v.get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace wfunet
