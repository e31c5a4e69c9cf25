#pragma once

// Core 3D-UNet: an encoder-decoder over (time, height, width) blocks with
// skip connections, collapsing time in a final full-depth projection.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "wfunet/dataset.hpp"
#include "wfunet/error.hpp"
#include "wfunet/grid_io.hpp"
#include "wfunet/layers.hpp"
#include "wfunet/tensor.hpp"

namespace wfunet {

struct CoreUNetConfig {
  std::size_t levels = 5;
  std::size_t base_channels = 64;
  std::size_t input_lag = 12;
  std::size_t height = 96;
  std::size_t width = 96;
  double dropout_rate = 0.5;

  /// Five levels, 64 base channels, lag 12 over 96x96 frames.
  static CoreUNetConfig full() { return {}; }
  /// Three levels, 4 base channels, lag 4 over 32x32 frames.
  static CoreUNetConfig desk() { return {3, 4, 4, 32, 32, 0.5}; }

  std::size_t channels(std::size_t level) const { return base_channels << level; }

  void validate() const {
    if (levels < 1) throw ConfigurationError("levels must be at least 1");
    if (base_channels < 1) throw ConfigurationError("base_channels must be at least 1");
    if (input_lag < 1) throw ConfigurationError("input_lag must be at least 1");
    const std::size_t div = std::size_t{1} << (levels - 1);
    if (height == 0 || width == 0 || height % div != 0 || width % div != 0)
      throw ConfigurationError("spatial size " + std::to_string(height) + "x" +
                               std::to_string(width) + " is not divisible by 2^(levels-1) = " +
                               std::to_string(div));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigurationError("dropout_rate must lie in [0, 1)");
  }

  bool operator==(const CoreUNetConfig&) const = default;
};

inline nlohmann::json to_json(const CoreUNetConfig& c) {
  return {{"levels", c.levels},       {"base_channels", c.base_channels},
          {"input_lag", c.input_lag}, {"height", c.height},
          {"width", c.width},         {"dropout_rate", c.dropout_rate}};
}

inline CoreUNetConfig core_config_from_json(const nlohmann::json& j,
                                            CoreUNetConfig base = CoreUNetConfig{}) {
  base.levels = j.value("levels", base.levels);
  base.base_channels = j.value("base_channels", base.base_channels);
  base.input_lag = j.value("input_lag", base.input_lag);
  base.height = j.value("height", base.height);
  base.width = j.value("width", base.width);
  base.dropout_rate = j.value("dropout_rate", base.dropout_rate);
  return base;
}

/// Closed-form parameter count: sum over convolution layers of
/// k^3 * cin * cout + cout, plus the (lag, 1, 1) projection.
inline std::size_t count_parameters(const CoreUNetConfig& cfg) {
  cfg.validate();
  auto double_conv = [](std::size_t cin, std::size_t cout) {
    return 27 * cin * cout + cout + 27 * cout * cout + cout;
  };
  const std::size_t L = cfg.levels;
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < L; ++i)
    n += double_conv(i == 0 ? 1 : cfg.channels(i - 1), cfg.channels(i));
  n += double_conv(L == 1 ? 1 : cfg.channels(L - 2), cfg.channels(L - 1));
  for (std::size_t i = 0; i + 1 < L; ++i)
    n += double_conv(cfg.channels(i) + cfg.channels(i + 1), cfg.channels(i));
  n += cfg.channels(0) * cfg.input_lag + 1;
  return n;
}

/// Training mode enables dropout; the seed makes the masks reproducible.
struct RunMode {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  return layers::splitmix64(seed ^ layers::splitmix64(salt));
}

template <typename S>
struct DoubleConvTape {
  FeatureBlock<S> input, mid, out;
};

namespace core {

inline std::string weight_name(const std::string& layer) { return layer + ".weight"; }
inline std::string bias_name(const std::string& layer) { return layer + ".bias"; }

template <typename S>
void declare_conv(ParameterSet<S>& p, const std::string& layer, std::size_t cin, std::size_t cout) {
  p.add(weight_name(layer), {cout, cin, 3, 3, 3});
  p.add(bias_name(layer), {cout});
}

/// Two 3x3x3 same-padded convolutions, each followed by a rectifier.
/// Parameters are `<name>.conv1.*` and `<name>.conv2.*`.
template <typename S>
FeatureBlock<S> double_conv(const FeatureBlock<S>& block, const ParameterSet<S>& params,
                            const std::string& name, std::size_t out_channels,
                            DoubleConvTape<S>* tape = nullptr) {
  const auto& w1 = params.at(weight_name(name + ".conv1"));
  const auto& b1 = params.at(bias_name(name + ".conv1"));
  const auto& w2 = params.at(weight_name(name + ".conv2"));
  const auto& b2 = params.at(bias_name(name + ".conv2"));
  if (w1.shape.size() != 5 || w1.shape[0] != out_channels || w1.shape[1] != block.channels ||
      w2.shape[0] != out_channels || w2.shape[1] != out_channels)
    throw ConfigurationError("double_conv '" + name + "': kernels do not map " +
                             std::to_string(block.channels) + " -> " +
                             std::to_string(out_channels) + " channels");
  auto mid = layers::conv3d<S>(block, w1.values, b1.values, out_channels);
  layers::relu_inplace(mid);
  auto out = layers::conv3d<S>(mid, w2.values, b2.values, out_channels);
  layers::relu_inplace(out);
  if (tape) {
    tape->input = block;
    tape->mid = mid;
    tape->out = out;
  }
  return out;
}

template <typename S>
FeatureBlock<S> double_conv_backward(const DoubleConvTape<S>& tape, const ParameterSet<S>& params,
                                     const std::string& name, FeatureBlock<S> grad_out,
                                     ParameterSet<S>& grads, bool want_input_grad) {
  const auto& w1 = params.at(weight_name(name + ".conv1"));
  const auto& w2 = params.at(weight_name(name + ".conv2"));
  layers::relu_backward_inplace(tape.out, grad_out);
  auto g_mid = layers::conv3d_backward<S>(tape.mid, w2.values, grad_out,
                                          grads.at(weight_name(name + ".conv2")).values,
                                          grads.at(bias_name(name + ".conv2")).values, true);
  layers::relu_backward_inplace(tape.mid, g_mid);
  return layers::conv3d_backward<S>(tape.input, w1.values, g_mid,
                                    grads.at(weight_name(name + ".conv1")).values,
                                    grads.at(bias_name(name + ".conv1")).values, want_input_grad);
}

/// Dropout (training only) followed by 1x2x2 max pooling. Time is untouched.
template <typename S>
FeatureBlock<S> down(const FeatureBlock<S>& block, double dropout_rate, const RunMode& mode,
                     std::vector<S>* mask_out = nullptr,
                     std::vector<std::uint8_t>* argmax_out = nullptr) {
  if (block.height % 2 != 0 || block.width % 2 != 0)
    throw ConfigurationError("down: odd spatial size " + block.shape_string());
  std::vector<std::uint8_t> argmax;
  FeatureBlock<S> pooled;
  if (mode.training && dropout_rate > 0.0) {
    auto mask = layers::dropout_mask<S>(block.size(), dropout_rate, mode.dropout_seed);
    FeatureBlock<S> dropped = block;
    for (std::size_t i = 0; i < dropped.size(); ++i) dropped.values[i] *= mask[i];
    pooled = layers::maxpool_spatial(dropped, argmax);
    if (mask_out) *mask_out = std::move(mask);
  } else {
    pooled = layers::maxpool_spatial(block, argmax);
    if (mask_out) mask_out->clear();
  }
  if (argmax_out) *argmax_out = std::move(argmax);
  return pooled;
}

/// Nearest-neighbour x2 upsampling, channel concatenation with the skip
/// (skip channels first), then a double convolution to `out_channels`.
template <typename S>
FeatureBlock<S> up_and_concat(const FeatureBlock<S>& block, const FeatureBlock<S>& skip,
                              const ParameterSet<S>& params, const std::string& name,
                              std::size_t out_channels, DoubleConvTape<S>* tape = nullptr) {
  if (skip.height != 2 * block.height || skip.width != 2 * block.width ||
      skip.time != block.time)
    throw ConfigurationError("up_and_concat '" + name + "': skip " + skip.shape_string() +
                             " is not twice the spatial size of " + block.shape_string());
  auto merged = layers::concat_channels(skip, layers::upsample_spatial(block));
  return double_conv(merged, params, name, out_channels, tape);
}

/// Full-depth (lag, 1, 1) linear projection to a single (H, W) map.
template <typename S>
BasicFrame<S> final_projection(const FeatureBlock<S>& block, const ParameterSet<S>& params,
                               const std::string& name) {
  const auto& w = params.at(weight_name(name));
  const auto& b = params.at(bias_name(name));
  if (w.shape.size() != 5 || w.shape[1] != block.channels || w.shape[2] != block.time)
    throw ConfigurationError("final projection '" + name + "' expects (" +
                             std::to_string(w.shape.size() == 5 ? w.shape[1] : 0) + " channels, " +
                             std::to_string(w.shape.size() == 5 ? w.shape[2] : 0) +
                             " steps), got " + block.shape_string());
  return BasicFrame<S>(block.height, block.width,
                       layers::temporal_projection<S>(block, w.values, b.values[0]));
}

}  // namespace core

template <typename S>
struct CoreTape {
  std::vector<DoubleConvTape<S>> encoder;
  std::vector<std::vector<S>> dropout_masks;
  std::vector<std::vector<std::uint8_t>> pool_argmax;
  DoubleConvTape<S> bottleneck;
  std::vector<DoubleConvTape<S>> decoder;  // indexed by level
};

/// One Core UNet bound to a parameter-name prefix, so several can share a
/// ParameterSet (as the two streams of WF-UNet do).
template <typename S>
class CoreUNetStream {
 public:
  CoreUNetStream(CoreUNetConfig config, std::string prefix)
      : config_(config), prefix_(std::move(prefix)) {
    config_.validate();
  }

  const CoreUNetConfig& config() const noexcept { return config_; }
  const std::string& prefix() const noexcept { return prefix_; }

  std::string encoder_name(std::size_t level) const { return prefix_ + "enc" + std::to_string(level); }
  std::string decoder_name(std::size_t level) const { return prefix_ + "dec" + std::to_string(level); }
  std::string bottleneck_name() const { return prefix_ + "bottleneck"; }
  std::string final_name() const { return prefix_ + "final"; }

  /// Appends this stream's tensors in forward order.
  void declare(ParameterSet<S>& p) const {
    const std::size_t L = config_.levels;
    for (std::size_t i = 0; i + 1 < L; ++i) {
      const std::size_t cin = i == 0 ? 1 : config_.channels(i - 1);
      core::declare_conv(p, encoder_name(i) + ".conv1", cin, config_.channels(i));
      core::declare_conv(p, encoder_name(i) + ".conv2", config_.channels(i), config_.channels(i));
    }
    const std::size_t bin = L == 1 ? 1 : config_.channels(L - 2);
    core::declare_conv(p, bottleneck_name() + ".conv1", bin, config_.channels(L - 1));
    core::declare_conv(p, bottleneck_name() + ".conv2", config_.channels(L - 1),
                       config_.channels(L - 1));
    for (std::size_t i = L - 1; i-- > 0;) {
      const std::size_t cin = config_.channels(i) + config_.channels(i + 1);
      core::declare_conv(p, decoder_name(i) + ".conv1", cin, config_.channels(i));
      core::declare_conv(p, decoder_name(i) + ".conv2", config_.channels(i), config_.channels(i));
    }
    p.add(core::weight_name(final_name()), {1, config_.channels(0), config_.input_lag, 1, 1});
    p.add(core::bias_name(final_name()), {1});
  }

  BasicFrame<S> forward(const ParameterSet<S>& p, const FeatureBlock<S>& x, const RunMode& mode,
                        CoreTape<S>* tape = nullptr) const {
    if (x.channels != 1 || x.time != config_.input_lag || x.height != config_.height ||
        x.width != config_.width)
      throw ConfigurationError("input " + x.shape_string() + " does not match (1," +
                               std::to_string(config_.input_lag) + "," +
                               std::to_string(config_.height) + "," +
                               std::to_string(config_.width) + ")");
    const std::size_t L = config_.levels;
    if (tape) {
      tape->encoder.assign(L - 1, {});
      tape->dropout_masks.assign(L - 1, {});
      tape->pool_argmax.assign(L - 1, {});
      tape->decoder.assign(L - 1, {});
    }
    std::vector<FeatureBlock<S>> skips;
    FeatureBlock<S> h = x;
    std::size_t level = 0;
    try {
      for (level = 0; level + 1 < L; ++level) {
        auto skip = core::double_conv(h, p, encoder_name(level), config_.channels(level),
                                      tape ? &tape->encoder[level] : nullptr);
        RunMode m = mode;
        m.dropout_seed = derive_seed(mode.dropout_seed, level + 1);
        h = core::down(skip, config_.dropout_rate, m, tape ? &tape->dropout_masks[level] : nullptr,
                       tape ? &tape->pool_argmax[level] : nullptr);
        skips.push_back(std::move(skip));
      }
      level = L - 1;
      h = core::double_conv(h, p, bottleneck_name(), config_.channels(L - 1),
                            tape ? &tape->bottleneck : nullptr);
      for (level = L - 1; level-- > 0;) {
        h = core::up_and_concat(h, skips[level], p, decoder_name(level), config_.channels(level),
                                tape ? &tape->decoder[level] : nullptr);
      }
      level = 0;
      return core::final_projection(h, p, final_name());
    } catch (const ConfigurationError& e) {
      throw ConfigurationError("level " + std::to_string(level) + ": " + e.what());
    }
  }

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
  void backward(const ParameterSet<S>& p, const CoreTape<S>& tape, const BasicFrame<S>& grad_out,
                ParameterSet<S>& grads) const {
    const std::size_t L = config_.levels;
    const auto& final_in = L == 1 ? tape.bottleneck.out : tape.decoder[0].out;
    auto& gb = grads.at(core::bias_name(final_name())).values[0];
    FeatureBlock<S> g = layers::temporal_projection_backward<S>(
        final_in, p.at(core::weight_name(final_name())).values, grad_out.values,
        grads.at(core::weight_name(final_name())).values, gb);

    std::vector<FeatureBlock<S>> skip_grads(L > 0 ? L - 1 : 0);
    for (std::size_t i = 0; i + 1 < L; ++i) {
      auto g_cat = core::double_conv_backward(tape.decoder[i], p, decoder_name(i), std::move(g),
                                              grads, true);
      auto [g_skip, g_up] = layers::split_channels(g_cat, config_.channels(i));
      skip_grads[i] = std::move(g_skip);
      g = layers::upsample_spatial_backward(g_up);
    }
    g = core::double_conv_backward(tape.bottleneck, p, bottleneck_name(), std::move(g), grads,
                                   L > 1);
    for (std::size_t i = L - 1; i-- > 0;) {
      const auto& skip = tape.encoder[i].out;
      auto g_drop = layers::maxpool_spatial_backward(g, tape.pool_argmax[i], skip.height, skip.width);
      const auto& mask = tape.dropout_masks[i];
      if (!mask.empty())
        for (std::size_t k = 0; k < g_drop.size(); ++k) g_drop.values[k] *= mask[k];
      for (std::size_t k = 0; k < g_drop.size(); ++k) g_drop.values[k] += skip_grads[i].values[k];
      g = core::double_conv_backward(tape.encoder[i], p, encoder_name(i), std::move(g_drop), grads,
                                     i > 0);
    }
  }

 private:
  CoreUNetConfig config_;
  std::string prefix_;
};

/// Fan-in scaled normal initialization: std sqrt(2/fan_in) ahead of a
/// rectifier, sqrt(1/fan_in) for the linear output layers. Biases start at 0.
template <typename S>
void initialize_parameters(ParameterSet<S>& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& t : params.tensors()) {
    const bool is_weight = t.name.size() > 7 && t.name.ends_with(".weight");
    if (!is_weight) {
      std::fill(t.values.begin(), t.values.end(), S{0});
      continue;
    }
    std::size_t fan_in = 1;
    for (std::size_t k = 1; k < t.shape.size(); ++k) fan_in *= t.shape[k];
    const bool linear = t.name.ends_with("final.weight") || t.name.starts_with("fusion/");
    const double stddev = std::sqrt((linear ? 1.0 : 2.0) / static_cast<double>(fan_in));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.values) v = static_cast<S>(dist(rng));
  }
}

/// Precipitation-only Core UNet model.
template <typename S>
class CoreUNet {
 public:
  static constexpr const char* kTypeName = "core-unet";

  explicit CoreUNet(CoreUNetConfig config, std::uint64_t seed = 0)
      : stream_(config, ""), seed_(seed) {
    stream_.declare(params_);
    initialize_parameters(params_, seed);
  }

  const CoreUNetConfig& config() const noexcept { return stream_.config(); }
  const CoreUNetStream<S>& stream() const noexcept { return stream_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ParameterSet<S>& parameters() noexcept { return params_; }
  const ParameterSet<S>& parameters() const noexcept { return params_; }
  static std::vector<std::string> input_names() { return {"tp"}; }
  std::size_t lag() const noexcept { return config().input_lag; }

  BasicFrame<S> forward(const FeatureBlock<S>& window, const RunMode& mode = {}) const {
    return stream_.forward(params_, window, mode);
  }

  BasicFrame<S> predict(const SampleWindow<S>& w, const RunMode& mode = {}) const {
    return forward(w.input("tp"), mode);
  }

  /// Adds scale * d(MSE)/d(params) for one window to `grads`; returns the MSE.
  S accumulate_gradient(const SampleWindow<S>& w, const RunMode& mode, ParameterSet<S>& grads,
                        S scale) const {
    CoreTape<S> tape;
    auto pred = stream_.forward(params_, w.input("tp"), mode, &tape);
    BasicFrame<S> g(pred.height, pred.width);
    const S n = static_cast<S>(pred.size());
    S loss{0};
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const S d = pred.values[i] - w.target.values[i];
      loss += d * d;
      g.values[i] = scale * S{2} * d / n;
    }
    stream_.backward(params_, tape, g, grads);
    return loss / n;
  }

 private:
  CoreUNetStream<S> stream_;
  ParameterSet<S> params_;
  std::uint64_t seed_ = 0;
};

}  // namespace wfunet
