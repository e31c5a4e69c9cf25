#pragma once

// WF-UNet: two independent Core UNet streams (precipitation, wind speed)
// whose single-map outputs are stacked and fused by a linear 1x1 convolution.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wfunet/model_core.hpp"

namespace wfunet {

template <typename S>
struct FusionTape {
  CoreTape<S> precip, wind;
  BasicFrame<S> precip_out, wind_out;
};

template <typename S>
class WFUNet {
 public:
  static constexpr const char* kTypeName = "wf-unet";
  static inline const std::string kFusionWeight = "fusion/weight";
  static inline const std::string kFusionBias = "fusion/bias";

  explicit WFUNet(CoreUNetConfig stream_config, std::uint64_t seed = 0)
      : precip_(stream_config, "stream_precip/"), wind_(stream_config, "stream_wind/"), seed_(seed) {
    precip_.declare(params_);
    wind_.declare(params_);
    // Stacked (precip, wind) maps treated as 2 input channels, 1 output.
    params_.add(kFusionWeight, {1, 2, 1, 1, 1});
    params_.add(kFusionBias, {1});
    initialize_parameters(params_, seed);
  }

  const CoreUNetConfig& config() const noexcept { return precip_.config(); }
  const CoreUNetStream<S>& precip_stream() const noexcept { return precip_; }
  const CoreUNetStream<S>& wind_stream() const noexcept { return wind_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ParameterSet<S>& parameters() noexcept { return params_; }
  const ParameterSet<S>& parameters() const noexcept { return params_; }
  static std::vector<std::string> input_names() { return {"tp", "ws"}; }
  std::size_t lag() const noexcept { return config().input_lag; }

  /// Pre-fusion maps of both streams, for inspection and export.
  std::pair<BasicFrame<S>, BasicFrame<S>> stream_outputs(const FeatureBlock<S>& precip_window,
                                                         const FeatureBlock<S>& wind_window,
                                                         const RunMode& mode = {}) const {
    check_alignment(precip_window, wind_window);
    return {precip_.forward(params_, precip_window, stream_mode(mode, 1)),
            wind_.forward(params_, wind_window, stream_mode(mode, 2))};
  }

  /// Per-pixel w0 * precip + w1 * wind + b.
  BasicFrame<S> fuse(const BasicFrame<S>& precip_map, const BasicFrame<S>& wind_map) const {
    const auto& w = params_.at(kFusionWeight).values;
    const S b = params_.at(kFusionBias).values[0];
    BasicFrame<S> out(precip_map.height, precip_map.width);
    for (std::size_t i = 0; i < out.size(); ++i)
      out.values[i] = (w[0] * precip_map.values[i] + w[1] * wind_map.values[i]) + b;
    return out;
  }

  BasicFrame<S> forward(const FeatureBlock<S>& precip_window, const FeatureBlock<S>& wind_window,
                        const RunMode& mode = {}) const {
    auto [p, w] = stream_outputs(precip_window, wind_window, mode);
    return fuse(p, w);
  }

  BasicFrame<S> predict(const SampleWindow<S>& win, const RunMode& mode = {}) const {
    return forward(win.input("tp"), win.input("ws"), mode);
  }

  S accumulate_gradient(const SampleWindow<S>& win, const RunMode& mode, ParameterSet<S>& grads,
                        S scale) const {
    const auto& xp = win.input("tp");
    const auto& xw = win.input("ws");
    check_alignment(xp, xw);
    FusionTape<S> tape;
    tape.precip_out = precip_.forward(params_, xp, stream_mode(mode, 1), &tape.precip);
    tape.wind_out = wind_.forward(params_, xw, stream_mode(mode, 2), &tape.wind);
    const auto pred = fuse(tape.precip_out, tape.wind_out);

    const S n = static_cast<S>(pred.size());
    BasicFrame<S> g(pred.height, pred.width);
    S loss{0};
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const S d = pred.values[i] - win.target.values[i];
      loss += d * d;
      g.values[i] = scale * S{2} * d / n;
    }
    backward(tape, g, grads);
    return loss / n;
  }

  void backward(const FusionTape<S>& tape, const BasicFrame<S>& grad_out,
                ParameterSet<S>& grads) const {
    const auto& w = params_.at(kFusionWeight).values;
    auto& gw = grads.at(kFusionWeight).values;
    auto& gb = grads.at(kFusionBias).values;
    BasicFrame<S> gp(grad_out.height, grad_out.width), gwind(grad_out.height, grad_out.width);
    S acc_p{0}, acc_w{0}, acc_b{0};
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
      const S g = grad_out.values[i];
      acc_p += g * tape.precip_out.values[i];
      acc_w += g * tape.wind_out.values[i];
      acc_b += g;
      gp.values[i] = w[0] * g;
      gwind.values[i] = w[1] * g;
    }
    gw[0] += acc_p;
    gw[1] += acc_w;
    gb[0] += acc_b;
    precip_.backward(params_, tape.precip, gp, grads);
    wind_.backward(params_, tape.wind, gwind, grads);
  }

 private:
  static RunMode stream_mode(const RunMode& mode, std::uint64_t salt) {
    return {mode.training, derive_seed(mode.dropout_seed, 1000 + salt)};
  }

  static void check_alignment(const FeatureBlock<S>& a, const FeatureBlock<S>& b) {
    if (!a.same_shape(b))
      throw AlignmentError("precipitation window " + a.shape_string() +
                           " and wind window " + b.shape_string() + " differ");
  }

  CoreUNetStream<S> precip_;
  CoreUNetStream<S> wind_;
  ParameterSet<S> params_;
  std::uint64_t seed_ = 0;
};

/// Closed-form parameter count of WF-UNet: two streams plus the 2->1 fusion.
inline std::size_t count_fusion_parameters(const CoreUNetConfig& cfg) {
  return 2 * count_parameters(cfg) + 3;
}

}  // namespace wfunet
