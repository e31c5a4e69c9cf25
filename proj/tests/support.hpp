#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "wfunet/grid_io.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "wfunet") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline wfunet::SeriesMeta meta(const std::string& name, const std::string& start = "2016-01-01T00:00:00Z") {
  wfunet::SeriesMeta m;
  m.variable_name = name;
  m.units = "m";
  m.start_time = wfunet::parse_iso8601(start);
  return m;
}

/// Series of float-representable uniform values in [lo, hi).
inline wfunet::VariableSeries random_series(const std::string& name, std::size_t T, std::size_t H,
                                            std::size_t W, std::uint64_t seed, double lo = 0.0,
                                            double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<wfunet::GridFrame> frames;
  for (std::size_t t = 0; t < T; ++t) {
    wfunet::GridFrame f(H, W);
    for (auto& v : f.values) v = static_cast<float>(d(rng));
    frames.push_back(std::move(f));
  }
  return wfunet::VariableSeries(meta(name), std::move(frames));
}

inline std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace testing_support
