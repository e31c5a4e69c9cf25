#pragma once

// Seeded wind-driven advection sequences: Gaussian rain cells carried across
// a toroidal grid by a per-episode constant wind.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "wfunet/error.hpp"
#include "wfunet/grid_io.hpp"

namespace wfunet {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct SyntheticConfig {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t sequence_length = 0;
  /// Frames per episode; each episode draws fresh cells and wind. 0 means a
  /// single episode spanning the whole sequence.
  std::size_t episode_length = 0;
  std::size_t n_blobs = 4;
  Range amplitude{0.5, 2.0};
  Range sigma{1.5, 3.0};
  Range vx{-1.0, 1.0};
  Range vy{-1.0, 1.0};
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  Timestamp start_time = parse_iso8601("2016-01-01T00:00:00Z");
  int step_hours = 1;

  void validate() const {
    if (height < 8 || width < 8) throw ConfigurationError("synthetic grid must be at least 8x8");
    if (sequence_length < 1) throw ConfigurationError("sequence_length must be positive");
    if (!(sigma.lo > 0 && sigma.hi >= sigma.lo)) throw ConfigurationError("sigma must be > 0");
    if (!(amplitude.hi >= amplitude.lo)) throw ConfigurationError("amplitude range is empty");
    if (!(vx.hi >= vx.lo) || !(vy.hi >= vy.lo))
      throw ConfigurationError("wind velocity range is empty");
    if (!(noise_std >= 0)) throw ConfigurationError("noise_std must be non-negative");
    if (step_hours <= 0) throw ConfigurationError("step_hours must be positive");
  }
};

struct Velocity {
  double vx = 0.0;
  double vy = 0.0;
};

struct SyntheticSeries {
  VariableSeries tp;
  VariableSeries u;
  VariableSeries v;
  std::vector<Velocity> episode_velocity;
};

namespace detail {

// Positions and velocities live on a 2^-16 lattice so that advancing a cell
// by an integer velocity shifts it by whole pixels with no rounding drift.
inline double quantize(double x) { return std::round(x * 65536.0) / 65536.0; }

struct Cell {
  double cx, cy, amplitude, sigma;
};

/// Periodic Gaussian profile along one axis: out[x] for a centre at `centre`.
inline void periodic_profile(double centre, double sigma, std::size_t n, std::vector<double>& out) {
  const double fl = std::floor(centre);
  const double frac = centre - fl;
  const auto n_int = static_cast<long>(n);
  const long shift = ((static_cast<long>(fl) % n_int) + n_int) % n_int;
  const long images = static_cast<long>(std::ceil(6.0 * sigma / static_cast<double>(n))) + 1;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> table(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (long k = -images; k <= images; ++k) {
      const double d = static_cast<double>(j) - frac + static_cast<double>(k * n_int);
      acc += std::exp(-d * d * inv);
    }
    table[j] = acc;
  }
  out.resize(n);
  for (std::size_t x = 0; x < n; ++x) {
    const long j = ((static_cast<long>(x) - shift) % n_int + n_int) % n_int;
    out[x] = table[static_cast<std::size_t>(j)];
  }
}

}  // namespace detail

inline SyntheticSeries generate(const SyntheticConfig& cfg) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;
  const std::size_t episode = cfg.episode_length == 0 ? cfg.sequence_length : cfg.episode_length;

  std::mt19937_64 rng(cfg.seed);
  auto uniform = [&](Range r) {
    return r.hi > r.lo ? std::uniform_real_distribution<double>(r.lo, r.hi)(rng) : r.lo;
  };
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0 ? cfg.noise_std : 1.0);

  std::vector<GridFrame> tp, u, v;
  tp.reserve(cfg.sequence_length);
  u.reserve(cfg.sequence_length);
  v.reserve(cfg.sequence_length);
  std::vector<Velocity> velocities;
  std::vector<detail::Cell> cells;
  Velocity vel;
  std::vector<std::vector<double>> gx(cfg.n_blobs), gy(cfg.n_blobs);

  for (std::size_t t = 0; t < cfg.sequence_length; ++t) {
    const std::size_t tau = t % episode;
    if (tau == 0) {
      vel = {detail::quantize(uniform(cfg.vx)), detail::quantize(uniform(cfg.vy))};
      velocities.push_back(vel);
      cells.clear();
      for (std::size_t b = 0; b < cfg.n_blobs; ++b) {
        detail::Cell c;
        c.cx = detail::quantize(uniform({0.0, static_cast<double>(W)}));
        c.cy = detail::quantize(uniform({0.0, static_cast<double>(H)}));
        c.amplitude = uniform(cfg.amplitude);
        c.sigma = uniform(cfg.sigma);
        cells.push_back(c);
      }
    }
    for (std::size_t b = 0; b < cells.size(); ++b) {
      const double step = static_cast<double>(tau);
      detail::periodic_profile(cells[b].cx + step * vel.vx, cells[b].sigma, W, gx[b]);
      detail::periodic_profile(cells[b].cy + step * vel.vy, cells[b].sigma, H, gy[b]);
    }
    GridFrame frame(H, W);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        double value = 0.0;
        for (std::size_t b = 0; b < cells.size(); ++b)
          value += cells[b].amplitude * gy[b][r] * gx[b][c];
        if (cfg.noise_std > 0) value = std::max(0.0, value + noise(rng));
        frame(r, c) = static_cast<float>(value);
      }
    }
    tp.push_back(std::move(frame));
    u.emplace_back(H, W, static_cast<double>(static_cast<float>(vel.vx)));
    v.emplace_back(H, W, static_cast<double>(static_cast<float>(vel.vy)));
  }

  SeriesMeta meta;
  meta.start_time = cfg.start_time;
  meta.step_hours = cfg.step_hours;
  meta.segment_length = cfg.episode_length;
  SeriesMeta tp_meta = meta, u_meta = meta, v_meta = meta;
  tp_meta.variable_name = "tp";
  tp_meta.units = "m";
  u_meta.variable_name = "u100";
  u_meta.units = "m s-1";
  v_meta.variable_name = "v100";
  v_meta.units = "m s-1";
  return {VariableSeries(tp_meta, std::move(tp)), VariableSeries(u_meta, std::move(u)),
          VariableSeries(v_meta, std::move(v)), std::move(velocities)};
}

}  // namespace wfunet
