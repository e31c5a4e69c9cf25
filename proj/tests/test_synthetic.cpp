#include <gtest/gtest.h>

#include <cmath>

#include "wfunet/grid_io.hpp"
#include "wfunet/synthetic.hpp"

using namespace wfunet;

namespace {

SyntheticConfig base_config() {
  SyntheticConfig c;
  c.height = 24;
  c.width = 32;
  c.sequence_length = 20;
  c.seed = 11;
  return c;
}

double mass(const GridFrame& f) {
  double s = 0;
  for (double v : f.values) s += v;
  return s;
}

}  // namespace

TEST(Synthetic, StillAirKeepsFramesIdentical) {
  auto c = base_config();
  c.vx = {0, 0};
  c.vy = {0, 0};
  const auto s = generate(c);
  for (std::size_t t = 1; t < s.tp.length(); ++t) EXPECT_EQ(s.tp.frame(t), s.tp.frame(0));
}

TEST(Synthetic, UnitEastwardWindShiftsOneColumn) {
  auto c = base_config();
  c.vx = {1, 1};
  c.vy = {0, 0};
  const auto s = generate(c);
  for (std::size_t t = 0; t + 1 < s.tp.length(); ++t) {
    const auto& a = s.tp.frame(t);
    const auto& b = s.tp.frame(t + 1);
    double max_diff = 0;
    for (std::size_t r = 0; r < a.height; ++r)
      for (std::size_t col = 0; col < a.width; ++col)
        max_diff = std::max(max_diff, std::abs(b(r, (col + 1) % a.width) - a(r, col)));
    EXPECT_EQ(max_diff, 0.0) << "t=" << t;
  }
}

TEST(Synthetic, DiagonalIntegerWindShiftsExactly) {
  auto c = base_config();
  c.vx = {-2, -2};
  c.vy = {1, 1};
  const auto s = generate(c);
  const auto& a = s.tp.frame(3);
  const auto& b = s.tp.frame(4);
  for (std::size_t r = 0; r < a.height; ++r)
    for (std::size_t col = 0; col < a.width; ++col)
      EXPECT_EQ(b((r + 1) % a.height, (col + a.width - 2) % a.width), a(r, col));
}

TEST(Synthetic, MassIsConservedWithoutNoise) {
  auto c = base_config();
  c.sequence_length = 60;
  c.vx = {-1.7, 1.3};
  c.vy = {-0.9, 1.1};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    c.seed = seed;
    const auto s = generate(c);
    const double m0 = mass(s.tp.frame(0));
    for (const auto& f : s.tp.frames()) EXPECT_NEAR(mass(f), m0, 1e-6 * m0);
  }
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  auto c = base_config();
  c.noise_std = 0.1;
  const auto a = generate(c);
  const auto b = generate(c);
  EXPECT_EQ(a.tp, b.tp);
  EXPECT_EQ(a.u, b.u);
  EXPECT_EQ(a.v, b.v);
  c.seed += 1;
  EXPECT_NE(generate(c).tp, a.tp);
}

TEST(Synthetic, NoiseIsClippedAtZero) {
  auto c = base_config();
  c.noise_std = 0.5;
  const auto s = generate(c);
  for (const auto& f : s.tp.frames())
    for (double v : f.values) EXPECT_GE(v, 0.0);
}

TEST(Synthetic, WindComponentsAreConstantAndExactSpeed) {
  auto c = base_config();
  c.sequence_length = 50;
  c.episode_length = 10;
  c.vx = {-1.5, 1.5};
  c.vy = {-1.5, 1.5};
  const auto s = generate(c);
  ASSERT_EQ(s.episode_velocity.size(), 5u);
  const auto ws = wind_speed(s.u, s.v);
  for (std::size_t t = 0; t < s.tp.length(); ++t) {
    const auto vel = s.episode_velocity[t / 10];
    const double expect = std::sqrt(vel.vx * vel.vx + vel.vy * vel.vy);
    for (std::size_t i = 0; i < s.u.frame(t).size(); ++i) {
      EXPECT_EQ(s.u.frame(t).values[i], vel.vx);
      EXPECT_EQ(s.v.frame(t).values[i], vel.vy);
      EXPECT_EQ(ws.frame(t).values[i], expect);
    }
  }
  EXPECT_EQ(s.tp.meta().segment_length, 10u);
  EXPECT_EQ(s.u.variable_name(), "u100");
  EXPECT_EQ(s.v.variable_name(), "v100");
}

TEST(Synthetic, PersistenceErrorGrowsWithWindSpeed) {
  auto c = base_config();
  c.height = 32;
  c.width = 32;
  c.n_blobs = 1;
  c.sigma = {2.0, 2.0};
  c.sequence_length = 4;
  for (auto [dx, dy] : {std::pair{1.0, 0.0}, std::pair{0.0, 1.0}, std::pair{0.6, 0.8}}) {
    for (std::size_t h : {1u, 2u}) {
      double last = -1;
      for (double speed = 0.0; speed <= 3.0; speed += 0.25) {
        c.vx = {speed * dx, speed * dx};
        c.vy = {speed * dy, speed * dy};
        const auto s = generate(c);
        double err = 0;
        for (std::size_t i = 0; i < 32 * 32; ++i) {
          const double d = s.tp.frame(h).values[i] - s.tp.frame(0).values[i];
          err += d * d;
        }
        EXPECT_GT(err, last) << "speed " << speed << " h " << h;
        last = err;
      }
    }
  }
}

TEST(Synthetic, ConfigValidation) {
  auto c = base_config();
  c.height = 7;
  EXPECT_THROW(generate(c), ConfigurationError);
  c = base_config();
  c.sigma = {0, 1};
  EXPECT_THROW(generate(c), ConfigurationError);
  c = base_config();
  c.noise_std = -1;
  EXPECT_THROW(generate(c), ConfigurationError);
}
