#pragma once

// Mini-batch Adam training with validation-driven learning-rate halving,
// early stopping, best-parameter retention and resumable state.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wfunet/checkpoint.hpp"
#include "wfunet/dataset.hpp"
#include "wfunet/error.hpp"

namespace wfunet {

template <typename S>
S mse_loss(const BasicFrame<S>& pred, const BasicFrame<S>& target) {
  if (pred.height != target.height || pred.width != target.width)
    throw AlignmentError("mse_loss: prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs target " +
                         std::to_string(target.height) + "x" + std::to_string(target.width));
  S acc{0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const S d = pred.values[i] - target.values[i];
    acc += d * d;
  }
  return acc / static_cast<S>(pred.size());
}

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 2;
  std::size_t max_epochs = 200;
  std::size_t early_stop_patience = 15;
  std::size_t lr_halving_patience = 4;
  double lr_factor = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  std::size_t horizon = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigurationError("learning_rate must be positive");
    if (batch_size == 0 || max_epochs == 0 || early_stop_patience == 0 ||
        lr_halving_patience == 0)
      throw ConfigurationError("batch size, epoch cap and patience values must be positive");
    if (!(lr_factor > 0 && lr_factor < 1)) throw ConfigurationError("lr_factor must be in (0, 1)");
    if (horizon == 0) throw ConfigurationError("horizon must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"lr_halving_patience", c.lr_halving_patience},
          {"lr_factor", c.lr_factor},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"seed", c.seed},
          {"horizon", c.horizon}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.lr_halving_patience = j.value("lr_halving_patience", c.lr_halving_patience);
  c.lr_factor = j.value("lr_factor", c.lr_factor);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.seed = j.value("seed", c.seed);
  c.horizon = j.value("horizon", c.horizon);
  return c;
}

/// Adaptive-moment optimizer with bias-corrected first and second moments.
template <typename S>
class Adam {
 public:
  Adam(const ParameterSet<S>& like, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8)
      : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2),
        epsilon_(epsilon) {}

  void step(ParameterSet<S>& params, const ParameterSet<S>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    const S step_size = static_cast<S>(lr / c1);
    const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(epsilon_);
    auto& pt = params.tensors();
    const auto& gt = grads.tensors();
    auto& mt = m_.tensors();
    auto& vt = v_.tensors();
    for (std::size_t k = 0; k < pt.size(); ++k) {
      auto& p = pt[k].values;
      const auto& g = gt[k].values;
      auto& m = mt[k].values;
      auto& v = vt[k].values;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (S{1} - b1) * g[i];
        v[i] = b2 * v[i] + (S{1} - b2) * g[i] * g[i];
        p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_c2 + eps);
      }
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  ParameterSet<S>& first_moment() noexcept { return m_; }
  ParameterSet<S>& second_moment() noexcept { return v_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }

 private:
  ParameterSet<S> m_, v_;
  double beta1_, beta2_, epsilon_;
  std::uint64_t t_ = 0;
};

/// Validation-loss bookkeeping. Improvement means strictly below the best
/// loss so far. The halving counter also restarts after each halving.
class PlateauScheduler {
 public:
  struct Event {
    bool improved = false;
    bool lr_halved = false;
    bool stop = false;
  };

  PlateauScheduler(double initial_lr, std::size_t lr_patience, std::size_t stop_patience,
                   double factor = 0.5)
      : lr_(initial_lr), lr_patience_(lr_patience), stop_patience_(stop_patience),
        factor_(factor) {}

  Event observe(double val_loss) {
    Event e;
    if (val_loss < best_) {
      best_ = val_loss;
      since_improvement_ = 0;
      lr_counter_ = 0;
      e.improved = true;
      return e;
    }
    ++since_improvement_;
    ++lr_counter_;
    if (lr_counter_ >= lr_patience_) {
      lr_ *= factor_;
      lr_counter_ = 0;
      e.lr_halved = true;
    }
    if (since_improvement_ >= stop_patience_) e.stop = true;
    return e;
  }

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }

  nlohmann::json state() const {
    return {{"lr", lr_},
            {"best", std::isfinite(best_) ? nlohmann::json(best_) : nlohmann::json(nullptr)},
            {"since_improvement", since_improvement_},
            {"lr_counter", lr_counter_}};
  }

  void restore(const nlohmann::json& j) {
    lr_ = j.at("lr").get<double>();
    best_ = j.at("best").is_null() ? std::numeric_limits<double>::infinity()
                                   : j.at("best").get<double>();
    since_improvement_ = j.at("since_improvement").get<std::size_t>();
    lr_counter_ = j.at("lr_counter").get<std::size_t>();
  }

 private:
  double lr_;
  std::size_t lr_patience_, stop_patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_improvement_ = 0;
  std::size_t lr_counter_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;  // rate used during the epoch
  double seconds = 0;
};

enum class StopReason { kEarlyStop, kMaxEpochs, kInterrupted };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::kEarlyStop: return "early-stop";
    case StopReason::kMaxEpochs: return "max-epochs";
    case StopReason::kInterrupted: return "interrupted";
  }
  return "?";
}

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  StopReason stop_reason = StopReason::kMaxEpochs;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,train_loss,val_loss,lr,seconds\n";
    for (const auto& e : epochs)
      os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << ',' << e.seconds
         << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs)
      j["epochs"].push_back({{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"val_loss", e.val_loss},
                             {"lr", e.lr},
                             {"seconds", e.seconds}});
    j["stop_reason"] = to_string(stop_reason);
    j["best_epoch"] = best_epoch;
    j["best_val_loss"] = std::isfinite(best_val_loss) ? nlohmann::json(best_val_loss)
                                                      : nlohmann::json(nullptr);
    return j;
  }

  static TrainHistory from_json(const nlohmann::json& j) {
    TrainHistory h;
    for (const auto& e : j.at("epochs"))
      h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                          e.at("val_loss").get<double>(), e.at("lr").get<double>(),
                          e.at("seconds").get<double>()});
    const auto reason = j.at("stop_reason").get<std::string>();
    h.stop_reason = reason == "early-stop"    ? StopReason::kEarlyStop
                    : reason == "interrupted" ? StopReason::kInterrupted
                                              : StopReason::kMaxEpochs;
    h.best_epoch = j.at("best_epoch").get<std::size_t>();
    h.best_val_loss = j.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                      : j.at("best_val_loss").get<double>();
    return h;
  }
};

struct TrainOptions {
  /// When set, full training state is written here after every epoch.
  std::optional<std::filesystem::path> state_dir;
  /// Continue from `state_dir` if it holds a state.
  bool resume = false;
  /// Stop after this many epochs in this session (0 = no limit); the run can
  /// later be resumed from `state_dir`.
  std::size_t stop_after_epochs = 0;
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename Model>
struct TrainResult {
  Model best_model;
  TrainHistory history;
};

template <typename Model, typename S>
double mean_loss(const Model& model, const std::vector<SampleWindow<S>>& windows) {
  double acc = 0;
  for (const auto& w : windows) acc += static_cast<double>(mse_loss(model.predict(w), w.target));
  return windows.empty() ? 0.0 : acc / static_cast<double>(windows.size());
}

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, 0x5EED0000ull + epoch));
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

template <typename Model, typename S>
void save_state(const std::filesystem::path& dir, const Model& current, const Model& best,
                Adam<S>& adam, const PlateauScheduler& sched, const TrainHistory& history,
                std::size_t epochs_done, bool finished) {
  ckpt::write_directory_atomically(dir, [&](const std::filesystem::path& tmp) {
    save_checkpoint(current, tmp / "current");
    save_checkpoint(best, tmp / "best");
    ckpt::write_params(adam.first_moment(), tmp / "adam_m.bin");
    ckpt::write_params(adam.second_moment(), tmp / "adam_v.bin");
    nlohmann::json s;
    s["epochs_done"] = epochs_done;
    s["adam_steps"] = adam.steps();
    s["scheduler"] = sched.state();
    s["history"] = history.to_json();
    s["finished"] = finished;
    std::ofstream out(tmp / "state.json");
    out << s.dump(2) << '\n';
  });
}

}  // namespace detail

/// Trains `model` on `train` windows, selecting on mean `val` loss. Returns
/// the parameters with the lowest validation loss seen.
template <typename Model, typename S>
TrainResult<Model> train(Model model, const std::vector<SampleWindow<S>>& train_set,
                         const std::vector<SampleWindow<S>>& val_set, const TrainConfig& cfg,
                         const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw ConfigurationError("training split is empty");
  if (val_set.empty()) throw ConfigurationError("validation split is empty");

  Adam<S> adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.epsilon);
  PlateauScheduler sched(cfg.learning_rate, cfg.lr_halving_patience, cfg.early_stop_patience,
                         cfg.lr_factor);
  TrainHistory history;
  Model best = model;
  std::size_t start_epoch = 1;

  if (opts.resume && opts.state_dir && std::filesystem::exists(*opts.state_dir / "state.json")) {
    const auto& dir = *opts.state_dir;
    std::ifstream in(dir / "state.json");
    nlohmann::json s;
    in >> s;
    model = load_checkpoint<Model>(dir / "current");
    best = load_checkpoint<Model>(dir / "best");
    ckpt::read_params(adam.first_moment(), dir / "adam_m.bin");
    ckpt::read_params(adam.second_moment(), dir / "adam_v.bin");
    adam.set_steps(s.at("adam_steps").get<std::uint64_t>());
    sched.restore(s.at("scheduler"));
    history = TrainHistory::from_json(s.at("history"));
    start_epoch = s.at("epochs_done").get<std::size_t>() + 1;
    if (s.value("finished", false)) return {std::move(best), std::move(history)};
  }

  auto grads = model.parameters().zeros_like();
  std::size_t session_epochs = 0;
  history.stop_reason = StopReason::kMaxEpochs;

  for (std::size_t epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = sched.lr();
    const auto order = detail::epoch_order(train_set.size(), cfg.seed, epoch);
    double loss_sum = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      grads.fill(S{0});
      double batch_loss = 0;
      const S scale = S{1} / static_cast<S>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        RunMode mode{true, derive_seed(cfg.seed, (static_cast<std::uint64_t>(epoch) << 32) + k)};
        batch_loss += static_cast<double>(
            model.accumulate_gradient(train_set[order[k]], mode, grads, scale));
      }
      if (!std::isfinite(batch_loss) || !grads.all_finite()) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + " (parameter norm " +
                             std::to_string(model.parameters().l2_norm()) + ", gradient norm " +
                             std::to_string(grads.l2_norm()) + ")");
      }
      loss_sum += batch_loss;
      adam.step(model.parameters(), grads, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_loss = mean_loss(model, val_set);
    if (!std::isfinite(rec.val_loss))
      throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch) +
                           " (parameter norm " + std::to_string(model.parameters().l2_norm()) +
                           ")");
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);

    const auto ev = sched.observe(rec.val_loss);
    if (ev.improved) {
      best = model;
      history.best_epoch = epoch;
      history.best_val_loss = rec.val_loss;
    }
    if (opts.on_epoch) opts.on_epoch(rec);

    const bool finished = ev.stop || epoch == cfg.max_epochs;
    if (ev.stop) history.stop_reason = StopReason::kEarlyStop;
    if (opts.state_dir)
      detail::save_state(*opts.state_dir, model, best, adam, sched, history, epoch, finished);
    if (ev.stop) break;

    ++session_epochs;
    if (opts.stop_after_epochs != 0 && session_epochs >= opts.stop_after_epochs &&
        epoch < cfg.max_epochs) {
      history.stop_reason = StopReason::kInterrupted;
      break;
    }
  }
  return {std::move(best), std::move(history)};
}

/// Materializes the manifest's train/val splits and trains on them.
template <typename Model>
TrainResult<Model> train(Model model, const DatasetManifest& manifest,
                         const std::map<std::string, VariableSeries>& variables,
                         const TrainConfig& cfg, const TrainOptions& opts = {}) {
  using S = std::remove_cvref_t<decltype(model.parameters().tensors().front().values.front())>;
  if (manifest.window.lag != model.lag())
    throw ConfigurationError("manifest lag " + std::to_string(manifest.window.lag) +
                             " does not match model lag " + std::to_string(model.lag()));
  const auto names = Model::input_names();
  auto tr = materialize<S>(manifest, "train", variables, names);
  auto va = materialize<S>(manifest, "val", variables, names);
  return train(std::move(model), tr, va, cfg, opts);
}

}  // namespace wfunet
