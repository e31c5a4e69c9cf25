#pragma once

#include <cmath>
#include <random>
#include <string>

#include "wfunet/dataset.hpp"
#include "wfunet/model_core.hpp"
#include "wfunet/tensor.hpp"

namespace testing_support {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t failures = 0;
  double worst_abs = 0;
  double worst_rel = 0;
  std::string worst_name;
};

/// Central finite differences on every parameter of a double-precision model.
/// A coordinate passes when |a - n| <= abs_tol or |a - n| <= rel_tol * max(|a|, |n|).
template <typename Model>
GradCheckResult gradient_check(Model& model, const wfunet::SampleWindow<double>& window,
                               const wfunet::RunMode& mode, double step = 1e-6,
                               double rel_tol = 1e-4, double abs_tol = 1e-6) {
  auto grads = model.parameters().zeros_like();
  model.accumulate_gradient(window, mode, grads, 1.0);
  auto loss = [&] {
    auto scratch = model.parameters().zeros_like();
    return model.accumulate_gradient(window, mode, scratch, 1.0);
  };
  GradCheckResult r;
  auto& params = model.parameters().tensors();
  const auto& gt = grads.tensors();
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].values.size(); ++i) {
      double& p = params[k].values[i];
      const double saved = p;
      p = saved + step;
      const double up = loss();
      p = saved - step;
      const double down = loss();
      p = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = gt[k].values[i];
      const double err = std::abs(analytic - numeric);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      const double rel = scale > 0 ? err / scale : 0.0;
      ++r.checked;
      if (!(err <= abs_tol || err <= rel_tol * scale)) {
        ++r.failures;
        if (err > r.worst_abs) r.worst_name = params[k].name + "[" + std::to_string(i) + "]";
      }
      r.worst_abs = std::max(r.worst_abs, err);
      if (err > abs_tol) r.worst_rel = std::max(r.worst_rel, rel);
    }
  }
  return r;
}

/// Zero-initialized biases put ReLU inputs from dead neighbourhoods exactly
/// on the kink, where one-sided derivatives differ. Small random biases move
/// the check to a point where the loss is differentiable.
template <typename Model>
void randomize_biases(Model& model, std::uint64_t seed, double scale = 0.05) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& t : model.parameters().tensors())
    if (t.name.ends_with("bias"))
      for (auto& v : t.values) v = u(rng);
}

/// Random normalized-looking window with the given inputs.
inline wfunet::SampleWindow<double> random_window(const std::vector<std::string>& names,
                                                  std::size_t lag, std::size_t h, std::size_t w,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  wfunet::SampleWindow<double> win;
  for (const auto& n : names) {
    wfunet::FeatureBlock<double> b(1, lag, h, w);
    for (auto& v : b.values) v = u(rng);
    win.inputs.emplace(n, std::move(b));
  }
  win.target = wfunet::GridFrame(h, w);
  for (auto& v : win.target.values) v = u(rng);
  return win;
}

}  // namespace testing_support
