#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wfunet/error.hpp"

namespace wfunet {

/// Storage for arrays handed to Eigen. A fixed base alignment keeps the
/// vectorized reductions' summation order independent of where the heap
/// places a buffer, so reruns and resumed runs agree bit for bit.
template <typename S>
using AlignedVector = std::vector<S, Eigen::aligned_allocator<S>>;

/// Dense (channels, time, height, width) array, row-major.
template <typename S>
struct FeatureBlock {
  std::size_t channels = 0;
  std::size_t time = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  AlignedVector<S> values;

  FeatureBlock() = default;
  FeatureBlock(std::size_t c, std::size_t t, std::size_t h, std::size_t w, S fill = S{0})
      : channels(c), time(t), height(h), width(w), values(c * t * h * w, fill) {}

  std::size_t plane() const noexcept { return height * width; }
  std::size_t channel_stride() const noexcept { return time * height * width; }
  std::size_t size() const noexcept { return values.size(); }

  S& operator()(std::size_t c, std::size_t t, std::size_t h, std::size_t w) {
    return values[((c * time + t) * height + h) * width + w];
  }
  const S& operator()(std::size_t c, std::size_t t, std::size_t h, std::size_t w) const {
    return values[((c * time + t) * height + h) * width + w];
  }

  S* channel_data(std::size_t c) { return values.data() + c * channel_stride(); }
  const S* channel_data(std::size_t c) const { return values.data() + c * channel_stride(); }

  bool same_shape(const FeatureBlock& o) const noexcept {
    return channels == o.channels && time == o.time && height == o.height && width == o.width;
  }

  std::string shape_string() const {
    return "(" + std::to_string(channels) + "," + std::to_string(time) + "," +
           std::to_string(height) + "," + std::to_string(width) + ")";
  }

  template <typename T>
  FeatureBlock<T> cast() const {
    FeatureBlock<T> out;
    out.channels = channels;
    out.time = time;
    out.height = height;
    out.width = width;
    out.values.assign(values.begin(), values.end());
    return out;
  }

  bool operator==(const FeatureBlock&) const = default;
};

/// One named parameter array; `shape` follows (out, in, kt, kh, kw) for
/// convolution kernels and (out) for biases.
template <typename S>
struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  AlignedVector<S> values;

  std::size_t count() const noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }
};

/// Ordered collection of named parameter arrays. Order is the declaration
/// order and is what checkpoints serialize.
template <typename S>
class ParameterSet {
 public:
  ParamTensor<S>& add(std::string name, std::vector<std::size_t> shape) {
    if (index_.count(name)) throw ConfigurationError("duplicate parameter '" + name + "'");
    ParamTensor<S> t{name, std::move(shape), {}};
    t.values.assign(t.count(), S{0});
    index_.emplace(t.name, tensors_.size());
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  ParamTensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigurationError("unknown parameter '" + name + "'");
    return tensors_[it->second];
  }
  const ParamTensor<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigurationError("unknown parameter '" + name + "'");
    return tensors_[it->second];
  }

  std::vector<ParamTensor<S>>& tensors() noexcept { return tensors_; }
  const std::vector<ParamTensor<S>>& tensors() const noexcept { return tensors_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.count();
    return n;
  }

  /// Same names and shapes, all values zero.
  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& t : tensors_) out.add(t.name, t.shape);
    return out;
  }

  void fill(S value) {
    for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), value);
  }

  double l2_norm() const {
    double s = 0;
    for (const auto& t : tensors_)
      for (S v : t.values) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const auto& t : tensors_)
      for (S v : t.values)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename T>
  ParameterSet<T> cast() const {
    ParameterSet<T> out;
    for (const auto& t : tensors_) {
      auto& dst = out.add(t.name, t.shape);
      std::copy(t.values.begin(), t.values.end(), dst.values.begin());
    }
    return out;
  }

  bool same_layout(const ParameterSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (tensors_[i].name != other.tensors_[i].name ||
          tensors_[i].shape != other.tensors_[i].shape)
        return false;
    }
    return true;
  }

  bool operator==(const ParameterSet& o) const {
    if (!same_layout(o)) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
      if (tensors_[i].values != o.tensors_[i].values) return false;
    return true;
  }

 private:
  std::vector<ParamTensor<S>> tensors_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace wfunet
