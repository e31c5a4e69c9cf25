#pragma once

// Gridded weather variables: in-memory series, the RGS binary format with
// its JSON sidecar, and the derive/crop/normalize steps of the pipeline.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wfunet/error.hpp"
#include "wfunet/timeutil.hpp"

namespace wfunet {

/// A single 2D field stored row-major.
template <typename S>
struct BasicFrame {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<S> values;

  BasicFrame() = default;
  BasicFrame(std::size_t h, std::size_t w, S fill = S{0})
      : height(h), width(w), values(h * w, fill) {}
  BasicFrame(std::size_t h, std::size_t w, std::vector<S> v)
      : height(h), width(w), values(std::move(v)) {
    if (values.size() != h * w) {
      throw InvariantError("frame holds " + std::to_string(values.size()) +
                           " values, expected " + std::to_string(h * w));
    }
  }

  S& operator()(std::size_t row, std::size_t col) { return values[row * width + col]; }
  const S& operator()(std::size_t row, std::size_t col) const {
    return values[row * width + col];
  }
  std::size_t size() const noexcept { return values.size(); }

  template <typename T>
  BasicFrame<T> cast() const {
    return BasicFrame<T>(height, width, std::vector<T>(values.begin(), values.end()));
  }

  bool operator==(const BasicFrame&) const = default;
};

using GridFrame = BasicFrame<double>;

/// Where a cropped series came from, relative to the uncropped source grid.
struct CropRecord {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t source_height = 0;
  std::size_t source_width = 0;

  bool operator==(const CropRecord&) const = default;
};

struct CropSpec {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t out_height = 96;
  std::size_t out_width = 96;

  /// Centered window; for the 105x173 source grid this gives top=4, left=38.
  static CropSpec centered(std::size_t source_height, std::size_t source_width,
                           std::size_t out_height = 96, std::size_t out_width = 96) {
    if (out_height > source_height || out_width > source_width) {
      throw BoundsError("crop " + std::to_string(out_height) + "x" + std::to_string(out_width) +
                        " does not fit a " + std::to_string(source_height) + "x" +
                        std::to_string(source_width) + " grid");
    }
    return {(source_height - out_height) / 2, (source_width - out_width) / 2, out_height,
            out_width};
  }

  static CropSpec identity(std::size_t height, std::size_t width) {
    return {0, 0, height, width};
  }

  /// The crop equivalent to applying *this and then `inner` to the result.
  CropSpec then(const CropSpec& inner) const {
    if (inner.top + inner.out_height > out_height || inner.left + inner.out_width > out_width) {
      throw BoundsError("nested crop exceeds the outer crop window");
    }
    return {top + inner.top, left + inner.left, inner.out_height, inner.out_width};
  }

  bool operator==(const CropSpec&) const = default;
};

struct SeriesMeta {
  std::string variable_name;
  std::string units;
  Timestamp start_time{};
  int step_hours = 1;
  std::optional<double> norm_max;
  /// Frames per independent segment (0 = one continuous record). Windows never
  /// straddle a segment boundary.
  std::size_t segment_length = 0;
  std::optional<CropRecord> crop;
};

/// Time-ordered stack of frames for one weather variable. Immutable once
/// constructed; every transformation returns a new series.
class VariableSeries {
 public:
  VariableSeries(SeriesMeta meta, std::vector<GridFrame> frames)
      : meta_(std::move(meta)), frames_(std::move(frames)) {
    validate();
  }

  const SeriesMeta& meta() const noexcept { return meta_; }
  const std::string& variable_name() const noexcept { return meta_.variable_name; }
  const std::vector<GridFrame>& frames() const noexcept { return frames_; }
  const GridFrame& frame(std::size_t t) const { return frames_.at(t); }
  std::size_t length() const noexcept { return frames_.size(); }
  std::size_t height() const noexcept { return frames_.front().height; }
  std::size_t width() const noexcept { return frames_.front().width; }
  bool normalized() const noexcept { return meta_.norm_max.has_value(); }

  Timestamp timestamp(std::size_t t) const {
    return meta_.start_time + std::chrono::hours{static_cast<long>(meta_.step_hours) *
                                                 static_cast<long>(t)};
  }

  /// Segment index of frame t (always 0 for a continuous record).
  std::size_t segment_of(std::size_t t) const noexcept {
    return meta_.segment_length == 0 ? 0 : t / meta_.segment_length;
  }

  bool operator==(const VariableSeries& other) const {
    return meta_.variable_name == other.meta_.variable_name &&
           meta_.units == other.meta_.units && meta_.start_time == other.meta_.start_time &&
           meta_.step_hours == other.meta_.step_hours &&
           meta_.norm_max == other.meta_.norm_max &&
           meta_.segment_length == other.meta_.segment_length &&
           meta_.crop == other.meta_.crop && frames_ == other.frames_;
  }

 private:
  void validate() const {
    if (frames_.empty()) throw InvariantError("series '" + meta_.variable_name + "' has no frames");
    if (meta_.step_hours <= 0) throw InvariantError("step_hours must be positive");
    if (meta_.norm_max && !(std::isfinite(*meta_.norm_max) && *meta_.norm_max > 0)) {
      throw InvariantError("norm_max must be a positive finite scalar");
    }
    const auto h = frames_.front().height;
    const auto w = frames_.front().width;
    if (h == 0 || w == 0) throw InvariantError("frames must be non-empty");
    for (std::size_t t = 0; t < frames_.size(); ++t) {
      const auto& f = frames_[t];
      if (f.height != h || f.width != w || f.values.size() != h * w) {
        throw InvariantError("frame " + std::to_string(t) + " of '" + meta_.variable_name +
                             "' has a different shape");
      }
      for (std::size_t i = 0; i < f.values.size(); ++i) {
        if (!std::isfinite(f.values[i])) {
          throw InvariantError("non-finite value in '" + meta_.variable_name + "' at frame " +
                               std::to_string(t) + ", pixel " + std::to_string(i));
        }
      }
    }
  }

  SeriesMeta meta_;
  std::vector<GridFrame> frames_;
};

// ---------------------------------------------------------------------------
// RGS format: "RGS1", then T, H, W as uint32 LE, then T*H*W float32 LE values
// in [t][row][col] order. Metadata lives in a JSON sidecar next to the file.

namespace rgs {

inline constexpr std::array<char, 4> kMagic = {'R', 'G', 'S', '1'};
inline constexpr std::size_t kHeaderBytes = 16;

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p.replace_extension(".json");
  return p;
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  v = to_le(v);
  char b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return to_le(v);
}

}  // namespace rgs

inline nlohmann::json sidecar_json(const VariableSeries& series) {
  const auto& m = series.meta();
  nlohmann::json j;
  j["variable_name"] = m.variable_name;
  j["units"] = m.units;
  j["start_time"] = format_iso8601(m.start_time);
  j["step_hours"] = m.step_hours;
  j["norm_max"] = m.norm_max ? nlohmann::json(*m.norm_max) : nlohmann::json(nullptr);
  j["frames"] = series.length();
  j["height"] = series.height();
  j["width"] = series.width();
  j["segment_length"] = m.segment_length;
  if (m.crop) {
    j["crop"] = {{"top", m.crop->top},
                 {"left", m.crop->left},
                 {"source_height", m.crop->source_height},
                 {"source_width", m.crop->source_width}};
  } else {
    j["crop"] = nullptr;
  }
  return j;
}

/// Writes `<path>` and its sidecar. Values are narrowed to float32, so the
/// round trip is bit-exact for float-representable series.
inline void write_series(const VariableSeries& series, const std::filesystem::path& path) {
  const std::size_t T = series.length(), H = series.height(), W = series.width();
  std::vector<char> bytes;
  bytes.reserve(rgs::kHeaderBytes + 4 * T * H * W);
  bytes.insert(bytes.end(), rgs::kMagic.begin(), rgs::kMagic.end());
  rgs::put_u32(bytes, static_cast<std::uint32_t>(T));
  rgs::put_u32(bytes, static_cast<std::uint32_t>(H));
  rgs::put_u32(bytes, static_cast<std::uint32_t>(W));
  for (const auto& f : series.frames()) {
    for (double v : f.values) {
      rgs::put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }

  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");

  std::ofstream side(rgs::sidecar_path(path), std::ios::trunc);
  if (!side) throw IoError("cannot write sidecar for '" + path.string() + "'");
  side << sidecar_json(series).dump(2) << '\n';
}

inline VariableSeries read_series(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());

  if (bytes.size() < rgs::kHeaderBytes) {
    throw FormatError("'" + path.string() + "': header truncated at byte offset " +
                      std::to_string(bytes.size()) + " (need 16 bytes)");
  }
  if (!std::equal(rgs::kMagic.begin(), rgs::kMagic.end(), bytes.begin())) {
    throw FormatError("'" + path.string() + "': bad magic at byte offset 0, expected \"RGS1\"");
  }
  const std::size_t T = rgs::get_u32(bytes.data() + 4);
  const std::size_t H = rgs::get_u32(bytes.data() + 8);
  const std::size_t W = rgs::get_u32(bytes.data() + 12);
  const std::size_t expected = rgs::kHeaderBytes + 4 * T * H * W;
  if (bytes.size() < expected) {
    throw FormatError("'" + path.string() + "': payload truncated at byte offset " +
                      std::to_string(bytes.size()) + ", expected " + std::to_string(expected) +
                      " bytes");
  }
  if (bytes.size() > expected) {
    throw FormatError("'" + path.string() + "': trailing data at byte offset " +
                      std::to_string(expected));
  }

  const auto side_path = rgs::sidecar_path(path);
  std::ifstream side(side_path);
  if (!side) throw IoError("missing sidecar manifest '" + side_path.string() + "'");
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("sidecar '" + side_path.string() + "': " + e.what());
  }

  SeriesMeta meta;
  try {
    if (j.value("frames", T) != T || j.value("height", H) != H || j.value("width", W) != W) {
      throw ConsistencyError("'" + path.string() + "' holds " + std::to_string(T) + "x" +
                             std::to_string(H) + "x" + std::to_string(W) +
                             " values but the sidecar declares " +
                             std::to_string(j.value("frames", T)) + "x" +
                             std::to_string(j.value("height", H)) + "x" +
                             std::to_string(j.value("width", W)));
    }
    meta.variable_name = j.at("variable_name").get<std::string>();
    meta.units = j.value("units", std::string{});
    meta.start_time = parse_iso8601(j.at("start_time").get<std::string>());
    meta.step_hours = j.value("step_hours", 1);
    if (j.contains("norm_max") && !j["norm_max"].is_null()) {
      meta.norm_max = j["norm_max"].get<double>();
    }
    meta.segment_length = j.value("segment_length", std::size_t{0});
    if (j.contains("crop") && !j["crop"].is_null()) {
      const auto& c = j["crop"];
      meta.crop = CropRecord{c.at("top").get<std::size_t>(), c.at("left").get<std::size_t>(),
                             c.at("source_height").get<std::size_t>(),
                             c.at("source_width").get<std::size_t>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("sidecar '" + side_path.string() + "': " + e.what());
  }

  std::vector<GridFrame> frames;
  frames.reserve(T);
  const char* p = bytes.data() + rgs::kHeaderBytes;
  for (std::size_t t = 0; t < T; ++t) {
    GridFrame f(H, W);
    for (auto& v : f.values) {
      v = std::bit_cast<float>(rgs::get_u32(p));
      p += 4;
    }
    frames.push_back(std::move(f));
  }
  return VariableSeries(std::move(meta), std::move(frames));
}

// ---------------------------------------------------------------------------

inline VariableSeries wind_speed(const VariableSeries& u, const VariableSeries& v) {
  if (u.length() != v.length() || u.height() != v.height() || u.width() != v.width()) {
    throw AlignmentError("u and v series differ in shape");
  }
  if (u.meta().start_time != v.meta().start_time || u.meta().step_hours != v.meta().step_hours) {
    throw AlignmentError("u and v series have different timestamps");
  }
  if (u.normalized() || v.normalized()) {
    throw StateError("wind components must be denormalized before deriving wind speed");
  }
  std::vector<GridFrame> frames;
  frames.reserve(u.length());
  for (std::size_t t = 0; t < u.length(); ++t) {
    const auto& fu = u.frame(t);
    const auto& fv = v.frame(t);
    GridFrame out(fu.height, fu.width);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
      out.values[i] = std::sqrt(fu.values[i] * fu.values[i] + fv.values[i] * fv.values[i]);
    }
    frames.push_back(std::move(out));
  }
  SeriesMeta meta = u.meta();
  meta.variable_name = "ws";
  meta.units = "m s-1";
  return VariableSeries(std::move(meta), std::move(frames));
}

inline VariableSeries crop(const VariableSeries& series, const CropSpec& spec) {
  if (spec.out_height == 0 || spec.out_width == 0 ||
      spec.top + spec.out_height > series.height() ||
      spec.left + spec.out_width > series.width()) {
    throw BoundsError("crop [" + std::to_string(spec.top) + "+" + std::to_string(spec.out_height) +
                      ", " + std::to_string(spec.left) + "+" + std::to_string(spec.out_width) +
                      "] exceeds " + std::to_string(series.height()) + "x" +
                      std::to_string(series.width()));
  }
  std::vector<GridFrame> frames;
  frames.reserve(series.length());
  for (const auto& f : series.frames()) {
    GridFrame out(spec.out_height, spec.out_width);
    for (std::size_t r = 0; r < spec.out_height; ++r) {
      const auto* src = f.values.data() + (spec.top + r) * f.width + spec.left;
      std::copy(src, src + spec.out_width, out.values.data() + r * spec.out_width);
    }
    frames.push_back(std::move(out));
  }
  SeriesMeta meta = series.meta();
  if (meta.crop) {
    meta.crop->top += spec.top;
    meta.crop->left += spec.left;
  } else {
    meta.crop = CropRecord{spec.top, spec.left, series.height(), series.width()};
  }
  return VariableSeries(std::move(meta), std::move(frames));
}

/// Largest value over the given frames (all frames when `frame_indices` is empty).
inline double fit_norm_max(const VariableSeries& training,
                           std::span<const std::size_t> frame_indices = {}) {
  if (training.normalized()) {
    throw StateError("fit_norm_max expects a denormalized series");
  }
  double best = 0.0;
  bool any = false;
  auto scan = [&](const GridFrame& f) {
    for (double v : f.values) {
      if (!any || v > best) best = v;
      any = true;
    }
  };
  if (frame_indices.empty()) {
    for (const auto& f : training.frames()) scan(f);
  } else {
    for (auto t : frame_indices) scan(training.frame(t));
  }
  if (!any || !(best > 0.0)) {
    throw DegenerateScaleError("training maximum of '" + training.variable_name() +
                               "' is not positive; cannot normalize");
  }
  return best;
}

/// Divides by `norm_max`. Values above the training maximum are kept (> 1).
inline VariableSeries normalize(const VariableSeries& series, double norm_max) {
  if (series.normalized()) {
    throw StateError("series '" + series.variable_name() + "' is already normalized");
  }
  if (!(std::isfinite(norm_max) && norm_max > 0)) {
    throw DegenerateScaleError("norm_max must be positive and finite");
  }
  std::vector<GridFrame> frames = series.frames();
  for (auto& f : frames) {
    for (auto& v : f.values) v /= norm_max;
  }
  SeriesMeta meta = series.meta();
  meta.norm_max = norm_max;
  return VariableSeries(std::move(meta), std::move(frames));
}

inline VariableSeries denormalize(const VariableSeries& series) {
  if (!series.normalized()) {
    throw StateError("series '" + series.variable_name() + "' is not normalized");
  }
  const double m = *series.meta().norm_max;
  std::vector<GridFrame> frames = series.frames();
  for (auto& f : frames) {
    for (auto& v : f.values) v *= m;
  }
  SeriesMeta meta = series.meta();
  meta.norm_max.reset();
  return VariableSeries(std::move(meta), std::move(frames));
}

}  // namespace wfunet
