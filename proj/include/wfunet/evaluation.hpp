#pragma once

// Verification: persistence baseline, denormalized MSE, binarized
// accuracy/precision/recall, and the report tables and charts.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wfunet/dataset.hpp"
#include "wfunet/error.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/model_fusion.hpp"

namespace wfunet {

struct EvalConfig {
  /// Normalized units; the EU-50 training mean.
  double binarize_threshold = 0.0047;
  std::vector<std::size_t> horizons{1, 2, 3};

  void validate() const {
    if (!(binarize_threshold >= 0)) throw ConfigurationError("binarize_threshold must be >= 0");
  }
};

/// Last observed precipitation frame, whatever the horizon.
template <typename S>
BasicFrame<S> persistence_forecast(const SampleWindow<S>& window) {
  const auto& block = window.input("tp");
  BasicFrame<S> out(block.height, block.width);
  const auto* last = block.values.data() + (block.time - 1) * block.plane();
  std::copy(last, last + block.plane(), out.values.begin());
  return out;
}

/// MSE in physical units over all pixels of all samples. Per-sample sums are
/// combined in sorted order, so the result does not depend on sample order.
inline double evaluate_mse(const std::vector<GridFrame>& outputs,
                           const std::vector<GridFrame>& targets, std::optional<double> norm_max) {
  if (!norm_max) throw StateError("evaluate_mse needs the normalization maximum");
  if (outputs.size() != targets.size())
    throw AlignmentError("evaluate_mse: " + std::to_string(outputs.size()) + " outputs vs " +
                         std::to_string(targets.size()) + " targets");
  const double m = *norm_max;
  std::vector<double> sums;
  sums.reserve(outputs.size());
  std::size_t pixels = 0;
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    const auto& o = outputs[s].values;
    const auto& t = targets[s].values;
    if (o.size() != t.size()) throw AlignmentError("evaluate_mse: frame shapes differ");
    double acc = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
      const double d = o[i] * m - t[i] * m;
      acc += d * d;
    }
    sums.push_back(acc);
    pixels += o.size();
  }
  if (pixels == 0) return 0.0;
  std::sort(sums.begin(), sums.end());
  double total = 0;
  for (double v : sums) total += v;
  return total / static_cast<double>(pixels);
}

/// 1 where value >= threshold, else 0.
template <typename S>
std::vector<std::uint8_t> binarize(const BasicFrame<S>& frame, double threshold) {
  std::vector<std::uint8_t> mask(frame.size());
  for (std::size_t i = 0; i < frame.size(); ++i)
    mask[i] = static_cast<double>(frame.values[i]) >= threshold ? 1 : 0;
  return mask;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Undefined ratios (zero denominators) are empty optionals.
struct ClassificationMetrics {
  double accuracy = 0;
  std::optional<double> precision;
  std::optional<double> recall;
  ConfusionCounts counts;

  static ClassificationMetrics from_counts(const ConfusionCounts& c) {
    ClassificationMetrics m;
    m.counts = c;
    const auto n = c.total();
    m.accuracy = n == 0 ? 0.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(n);
    if (c.tp + c.fp > 0)
      m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    return m;
  }
};

inline ConfusionCounts confusion_counts(const std::vector<std::uint8_t>& pred,
                                        const std::vector<std::uint8_t>& target) {
  if (pred.size() != target.size()) throw AlignmentError("masks differ in size");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = target[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline ClassificationMetrics classification_metrics(const std::vector<std::uint8_t>& pred,
                                                    const std::vector<std::uint8_t>& target) {
  return ClassificationMetrics::from_counts(confusion_counts(pred, target));
}

/// Mean over every pixel of the given (normalized) frames; all frames when
/// `frame_indices` is empty.
inline double compute_threshold(const VariableSeries& tp,
                                std::span<const std::size_t> frame_indices = {}) {
  if (!tp.normalized()) throw StateError("compute_threshold expects normalized precipitation");
  double sum = 0;
  std::size_t n = 0;
  auto add = [&](const GridFrame& f) {
    for (double v : f.values) sum += v;
    n += f.size();
  };
  if (frame_indices.empty()) {
    for (const auto& f : tp.frames()) add(f);
  } else {
    for (auto t : frame_indices) add(tp.frame(t));
  }
  if (n == 0) throw DegenerateScaleError("compute_threshold: no pixels");
  return sum / static_cast<double>(n);
}

struct MetricsRow {
  std::string model;
  std::size_t horizon = 0;
  double mse = 0;
  ClassificationMetrics metrics;
  std::size_t n_samples = 0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;

  const MetricsRow& row(const std::string& model, std::size_t horizon) const {
    for (const auto& r : rows)
      if (r.model == model && r.horizon == horizon) return r;
    throw ConfigurationError("report has no row for " + model + " at horizon " +
                             std::to_string(horizon));
  }

  std::vector<std::string> model_names() const {
    std::vector<std::string> names;
    for (const auto& r : rows)
      if (std::find(names.begin(), names.end(), r.model) == names.end()) names.push_back(r.model);
    return names;
  }

  /// Average MSE over the evaluated horizons, per model.
  std::map<std::string, double> average_mse() const {
    std::map<std::string, double> sum;
    std::map<std::string, std::size_t> n;
    for (const auto& r : rows) {
      sum[r.model] += r.mse;
      ++n[r.model];
    }
    for (auto& [k, v] : sum) v /= static_cast<double>(n[k]);
    return sum;
  }
};

using Forecaster = std::function<GridFrame(const SampleWindow<double>&)>;

template <typename Model>
Forecaster make_forecaster(const Model& model) {
  return [&model](const SampleWindow<double>& w) {
    using S = std::remove_cvref_t<decltype(model.parameters().tensors().front().values.front())>;
    if constexpr (std::is_same_v<S, double>) {
      return model.predict(w);
    } else {
      return model.predict(w.template cast<S>()).template cast<double>();
    }
  };
}

inline Forecaster persistence_forecaster() {
  return [](const SampleWindow<double>& w) { return persistence_forecast(w); };
}

inline MetricsRow evaluate_forecaster(const std::string& name, std::size_t horizon,
                                      const Forecaster& forecast,
                                      const std::vector<SampleWindow<double>>& windows,
                                      double norm_max, double threshold) {
  std::vector<GridFrame> outputs, targets;
  outputs.reserve(windows.size());
  targets.reserve(windows.size());
  ConfusionCounts counts;
  for (const auto& w : windows) {
    outputs.push_back(forecast(w));
    targets.push_back(w.target);
    counts += confusion_counts(binarize(outputs.back(), threshold), binarize(w.target, threshold));
  }
  MetricsRow row;
  row.model = name;
  row.horizon = horizon;
  row.mse = evaluate_mse(outputs, targets, norm_max);
  row.metrics = ClassificationMetrics::from_counts(counts);
  row.n_samples = windows.size();
  return row;
}

struct ModelEntry {
  std::string name;
  std::map<std::size_t, Forecaster> by_horizon;
};

/// Evaluates persistence (when requested) and every model at every horizon
/// it has a forecaster for, on the given per-horizon test windows.
inline MetricsReport build_report(const std::vector<ModelEntry>& models,
                                  const std::map<std::size_t, std::vector<SampleWindow<double>>>& test,
                                  double norm_max, const EvalConfig& cfg,
                                  bool include_persistence = true) {
  cfg.validate();
  MetricsReport report;
  for (std::size_t h : cfg.horizons) {
    auto it = test.find(h);
    if (it == test.end())
      throw ConfigurationError("no test windows for horizon " + std::to_string(h));
    if (include_persistence)
      report.rows.push_back(evaluate_forecaster("persistence", h, persistence_forecaster(),
                                                it->second, norm_max, cfg.binarize_threshold));
    for (const auto& m : models) {
      auto f = m.by_horizon.find(h);
      if (f == m.by_horizon.end())
        throw ConfigurationError("model '" + m.name + "' has no checkpoint for horizon " +
                                 std::to_string(h));
      report.rows.push_back(
          evaluate_forecaster(m.name, h, f->second, it->second, norm_max, cfg.binarize_threshold));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Emission

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : r.rows) {
    rows.push_back({{"model", x.model},
                    {"horizon", x.horizon},
                    {"mse", x.mse},
                    {"accuracy", x.metrics.accuracy},
                    {"precision", optional_json(x.metrics.precision)},
                    {"recall", optional_json(x.metrics.recall)},
                    {"tp", x.metrics.counts.tp},
                    {"fp", x.metrics.counts.fp},
                    {"tn", x.metrics.counts.tn},
                    {"fn", x.metrics.counts.fn},
                    {"n_samples", x.n_samples}});
  }
  return rows;
}

inline std::string fmt_double(double v, int precision = 6, bool scientific = false) {
  std::ostringstream os;
  if (scientific) os << std::scientific;
  os.precision(precision);
  os << v;
  return os.str();
}

inline std::string report_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "model,horizon,mse,accuracy,precision,recall,tp,fp,tn,fn,n_samples\n";
  for (const auto& x : r.rows) {
    os << x.model << ',' << x.horizon << ',' << fmt_double(x.mse, 17) << ','
       << fmt_double(x.metrics.accuracy, 17) << ','
       << (x.metrics.precision ? fmt_double(*x.metrics.precision, 17) : "") << ','
       << (x.metrics.recall ? fmt_double(*x.metrics.recall, 17) : "") << ',' << x.metrics.counts.tp
       << ',' << x.metrics.counts.fp << ',' << x.metrics.counts.tn << ',' << x.metrics.counts.fn
       << ',' << x.n_samples << '\n';
  }
  return os.str();
}

/// Plain-text table grouped by horizon.
inline std::string report_table(const MetricsReport& r) {
  std::vector<std::size_t> horizons;
  for (const auto& x : r.rows)
    if (std::find(horizons.begin(), horizons.end(), x.horizon) == horizons.end())
      horizons.push_back(x.horizon);
  std::ostringstream os;
  auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v, 3) : "n/a"; };
  for (auto h : horizons) {
    os << h << "-hour ahead prediction\n";
    os << "model                 MSE         Accuracy  Precision  Recall\n";
    for (const auto& x : r.rows) {
      if (x.horizon != h) continue;
      std::string name = x.model;
      name.resize(std::max<std::size_t>(name.size(), 20), ' ');
      os << name << "  " << fmt_double(x.mse, 2, true) << "    " << fmt_double(x.metrics.accuracy, 3)
         << "     " << opt(x.metrics.precision) << "      " << opt(x.metrics.recall) << '\n';
    }
    os << '\n';
  }
  return os.str();
}

inline std::string mse_by_horizon_csv(const MetricsReport& r) {
  std::ostringstream os;
  os << "model,horizon,mse\n";
  for (const auto& x : r.rows) os << x.model << ',' << x.horizon << ',' << fmt_double(x.mse, 17) << '\n';
  for (const auto& [name, avg] : r.average_mse())
    os << name << ",average," << fmt_double(avg, 17) << '\n';
  return os.str();
}

/// Horizon-vs-MSE line chart as SVG.
inline std::string mse_chart_svg(const MetricsReport& r) {
  const double W = 640, H = 400, L = 80, R = 160, T = 30, B = 50;
  std::size_t hmin = SIZE_MAX, hmax = 0;
  double ymax = 0;
  for (const auto& x : r.rows) {
    hmin = std::min(hmin, x.horizon);
    hmax = std::max(hmax, x.horizon);
    ymax = std::max(ymax, x.mse);
  }
  if (r.rows.empty()) hmin = hmax = 1;
  if (ymax <= 0) ymax = 1;
  auto px = [&](double h) {
    return hmax == hmin ? L + (W - L - R) / 2
                        : L + (h - static_cast<double>(hmin)) /
                                  static_cast<double>(hmax - hmin) * (W - L - R);
  };
  auto py = [&](double v) { return T + (1.0 - v / ymax) * (H - T - B); };
  static const char* colors[] = {"#444444", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (std::size_t h = hmin; h <= hmax; ++h)
    os << "<text x=\"" << px(static_cast<double>(h)) << "\" y=\"" << H - B + 18
       << "\" text-anchor=\"middle\">" << h << " h</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymax * k / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">"
       << fmt_double(v, 2, true) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
     << "\" text-anchor=\"middle\">lead time</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">test MSE</text>\n";
  std::size_t k = 0;
  for (const auto& name : r.model_names()) {
    const char* color = colors[k % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& x : r.rows)
      if (x.model == name) os << px(static_cast<double>(x.horizon)) << ',' << py(x.mse) << ' ';
    os << "\"/>\n";
    for (const auto& x : r.rows)
      if (x.model == name)
        os << "<circle cx=\"" << px(static_cast<double>(x.horizon)) << "\" cy=\"" << py(x.mse)
           << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << W - R + 12 << "\" y=\"" << T + 16 * (k + 1) << "\" fill=\"" << color
       << "\">" << name << "</text>\n";
    ++k;
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
}

/// report.json, report.csv, report.txt, mse_by_horizon.csv, mse_by_horizon.svg
/// and summary.json under `dir`.
inline void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
  write_text(dir / "report.csv", report_csv(r));
  write_text(dir / "report.txt", report_table(r));
  write_text(dir / "mse_by_horizon.csv", mse_by_horizon_csv(r));
  write_text(dir / "mse_by_horizon.svg", mse_chart_svg(r));
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& [name, avg] : r.average_mse())
    summary.push_back({{"model", name}, {"average_mse", avg}});
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

/// Writes the two pre-fusion stream maps of each window as single-frame RGS
/// series (normalized precipitation units).
template <typename S>
std::vector<std::filesystem::path> export_stream_maps(const WFUNet<S>& model,
                                                      const std::vector<SampleWindow<double>>& windows,
                                                      const SeriesMeta& tp_meta,
                                                      const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> written;
  for (const auto& w : windows) {
    const auto ws = w.template cast<S>();
    auto [p, wind] = model.stream_outputs(ws.input("tp"), ws.input("ws"));
    for (const auto& [label, frame] :
         {std::pair<std::string, const BasicFrame<S>*>{"stream_precip", &p},
          std::pair<std::string, const BasicFrame<S>*>{"stream_wind", &wind}}) {
      SeriesMeta meta = tp_meta;
      meta.variable_name = label;
      meta.start_time = w.anchor_time;
      meta.segment_length = 0;
      VariableSeries s(meta, {frame->template cast<double>()});
      const auto path = dir / (label + "_a" + std::to_string(w.anchor) + ".rgs");
      write_series(s, path);
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace wfunet
