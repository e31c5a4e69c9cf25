#include <gtest/gtest.h>

#include <fstream>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "support.hpp"
#include "wfunet/checkpoint.hpp"
#include "wfunet/training.hpp"

using namespace wfunet;
using testing_support::TempDir;

namespace {

CoreUNetConfig small() { return {2, 2, 3, 8, 8, 0.5}; }

std::vector<SampleWindow<float>> windows(const std::vector<std::string>& names, std::size_t n,
                                         std::uint64_t seed) {
  std::vector<SampleWindow<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto w = testing_support::random_window(names, 3, 8, 8, seed + i).cast<float>();
    w.anchor = i;
    out.push_back(std::move(w));
  }
  return out;
}

/// Independent restatement of the plateau rules, one epoch at a time.
struct ReferencePlateau {
  std::vector<std::size_t> halvings;
  std::size_t stop_epoch = 0;

  ReferencePlateau(const std::vector<double>& losses, std::size_t lr_patience,
                   std::size_t stop_patience) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0, last_event = 0;
    for (std::size_t e = 1; e <= losses.size(); ++e) {
      if (losses[e - 1] < best) {
        best = losses[e - 1];
        best_epoch = e;
        last_event = e;
        continue;
      }
      if (e - last_event == lr_patience) {
        halvings.push_back(e);
        last_event = e;
      }
      if (e - best_epoch == stop_patience) {
        stop_epoch = e;
        return;
      }
    }
  }
};

struct Trace {
  std::vector<std::size_t> halvings;
  std::size_t stop_epoch = 0;
  std::vector<double> lrs;
};

Trace run_scheduler(const std::vector<double>& losses, std::size_t lr_patience = 4,
                    std::size_t stop_patience = 15) {
  PlateauScheduler s(1e-4, lr_patience, stop_patience, 0.5);
  Trace t;
  for (std::size_t e = 1; e <= losses.size(); ++e) {
    t.lrs.push_back(s.lr());
    const auto ev = s.observe(losses[e - 1]);
    if (ev.lr_halved) t.halvings.push_back(e);
    if (ev.stop) {
      t.stop_epoch = e;
      break;
    }
  }
  return t;
}

}  // namespace

TEST(Training, MseLoss) {
  BasicFrame<double> a(1, 2), b(1, 2);
  EXPECT_EQ(mse_loss(a, b), 0.0);
  a.values = {1, 2};
  EXPECT_EQ(mse_loss(a, b), 2.5);
  EXPECT_THROW(mse_loss(a, BasicFrame<double>(2, 1)), AlignmentError);
}

TEST(Training, SchedulerHandTrace) {
  std::vector<double> losses{5, 4};
  losses.resize(30, 4.0);
  const auto t = run_scheduler(losses);
  EXPECT_EQ(t.halvings, (std::vector<std::size_t>{6, 10, 14}));
  EXPECT_EQ(t.stop_epoch, 17u);
  EXPECT_EQ(t.lrs[5], 1e-4);
  EXPECT_EQ(t.lrs[6], 5e-5);
  EXPECT_EQ(t.lrs[10], 2.5e-5);
}

TEST(Training, SchedulerEqualLossIsNotImprovement) {
  const auto t = run_scheduler(std::vector<double>(20, 1.0));
  EXPECT_EQ(t.halvings, (std::vector<std::size_t>{5, 9, 13}));
  EXPECT_EQ(t.stop_epoch, 16u);
}

TEST(Training, SchedulerImprovementResetsBothCounters) {
  // 3 flat epochs, an improvement, then flat again.
  std::vector<double> losses{3, 3, 3, 3, 2};
  losses.resize(40, 2.0);
  const auto t = run_scheduler(losses);
  EXPECT_EQ(t.halvings, (std::vector<std::size_t>{9, 13, 17}));
  EXPECT_EQ(t.stop_epoch, 20u);
}

TEST(Training, SchedulerMatchesReferenceOnRandomTraces) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> losses;
    double level = 1.0;
    for (int e = 0; e < 80; ++e) {
      if (u(rng) < 0.15) level *= 0.9;
      losses.push_back(u(rng) < 0.5 ? level : level * (1 + u(rng)));
    }
    const std::size_t lp = 1 + trial % 6, sp = 3 + trial % 17;
    const ReferencePlateau ref(losses, lp, sp);
    const auto t = run_scheduler(losses, lp, sp);
    EXPECT_EQ(t.halvings, ref.halvings) << trial;
    EXPECT_EQ(t.stop_epoch, ref.stop_epoch) << trial;
  }
}

TEST(Training, SchedulerStateRoundTrips) {
  PlateauScheduler a(1e-3, 4, 15);
  for (double l : {3.0, 2.0, 2.5, 2.5}) a.observe(l);
  PlateauScheduler b(1.0, 4, 15);
  b.restore(nlohmann::json::parse(a.state().dump()));
  for (double l : {2.5, 2.5, 1.0, 1.5}) {
    const auto ea = a.observe(l), eb = b.observe(l);
    EXPECT_EQ(ea.lr_halved, eb.lr_halved);
    EXPECT_EQ(a.lr(), b.lr());
  }
}

TEST(Training, AdamMovesExactlyTheParametersWithGradient) {
  ParameterSet<double> p;
  p.add("a", {3}).values = {1.0, 2.0, 3.0};
  p.add("b", {1}).values = {4.0};
  auto g = p.zeros_like();
  g.at("a").values = {0.5, 0.0, -2.0};
  Adam<double> adam(p);
  const auto before = p;
  adam.step(p, g, 0.01);
  EXPECT_NEAR(p.at("a").values[0], 1.0 - 0.01, 1e-9);
  EXPECT_EQ(p.at("a").values[1], 2.0);
  EXPECT_NEAR(p.at("a").values[2], 3.0 + 0.01, 1e-9);
  EXPECT_EQ(p.at("b").values, before.at("b").values);
}

TEST(Training, AdamMatchesTextbookRecurrence) {
  ParameterSet<double> p;
  p.add("x", {1}).values = {0.3};
  auto g = p.zeros_like();
  Adam<double> adam(p, 0.9, 0.999, 1e-8);
  double x = 0.3, m = 0, v = 0;
  for (int t = 1; t <= 20; ++t) {
    const double grad = std::sin(t) + 2 * x;
    g.at("x").values = {grad};
    adam.step(p, g, 0.05);
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p.at("x").values[0], x, 1e-12) << t;
  }
}

TEST(Training, CheckpointRoundTrip) {
  TempDir dir;
  WFUNet<float> m(small(), 3);
  save_checkpoint(m, dir / "ck", {{"horizon", 2}});
  const auto back = load_checkpoint<WFUNet<float>>(dir / "ck");
  EXPECT_EQ(back.parameters(), m.parameters());
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(read_checkpoint_info(dir / "ck").extra.at("horizon"), 2);
  const auto any = load_any_checkpoint<float>(dir / "ck");
  EXPECT_TRUE(std::holds_alternative<WFUNet<float>>(any));
  EXPECT_FALSE(std::filesystem::exists(dir / "ck.tmp"));
}

TEST(Training, CheckpointTypeMismatch) {
  TempDir dir;
  save_checkpoint(CoreUNet<float>(small()), dir / "ck");
  EXPECT_THROW(load_checkpoint<WFUNet<float>>(dir / "ck"), ModelTypeError);
}

TEST(Training, TruncatedCheckpointNamesLayer) {
  TempDir dir;
  CoreUNet<float> m(small());
  save_checkpoint(m, dir / "ck");
  const auto size = std::filesystem::file_size(dir / "ck" / "params.bin");
  std::filesystem::resize_file(dir / "ck" / "params.bin", size - 8);
  try {
    load_checkpoint<CoreUNet<float>>(dir / "ck");
    FAIL();
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("final.weight"), std::string::npos) << e.what();
  }
}

TEST(Training, CheckpointShapeTableMismatch) {
  TempDir dir;
  save_checkpoint(CoreUNet<float>(small()), dir / "ck");
  std::ifstream in(dir / "ck" / "meta.json");
  auto j = nlohmann::json::parse(in);
  in.close();
  j["layers"][0]["shape"][0] = 7;
  std::ofstream(dir / "ck" / "meta.json") << j.dump();
  EXPECT_THROW(load_checkpoint<CoreUNet<float>>(dir / "ck"), CorruptionError);
}

TEST(Training, LossDecreasesOnTinyProblem) {
  auto cfg = small();
  cfg.dropout_rate = 0.0;
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.max_epochs = 30;
  tc.batch_size = 1;
  // Learnable target: the last input frame.
  auto tr = windows({"tp"}, 4, 100);
  for (auto& w : tr) {
    const auto& b = w.input("tp");
    std::copy(b.values.end() - 64, b.values.end(), w.target.values.begin());
  }
  const auto res = train(CoreUNet<float>(cfg, 1), tr, tr, tc);
  EXPECT_LT(res.history.epochs.back().train_loss, 0.5 * res.history.epochs.front().train_loss);
}

TEST(Training, BestModelHasLowestValidationLoss) {
  TrainConfig tc;
  tc.learning_rate = 2e-2;
  tc.max_epochs = 12;
  const auto tr = windows({"tp"}, 6, 200), va = windows({"tp"}, 3, 300);
  const auto res = train(CoreUNet<float>(small(), 2), tr, va, tc);
  std::size_t argmin = 0;
  for (std::size_t i = 0; i < res.history.epochs.size(); ++i)
    if (res.history.epochs[i].val_loss < res.history.epochs[argmin].val_loss) argmin = i;
  EXPECT_EQ(res.history.best_epoch, argmin + 1);
  EXPECT_EQ(mean_loss(res.best_model, va), res.history.epochs[argmin].val_loss);
}

TEST(Training, ResumeReproducesUninterruptedRun) {
  TempDir dir;
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.max_epochs = 6;
  tc.seed = 5;
  const auto tr = windows({"tp", "ws"}, 5, 400), va = windows({"tp", "ws"}, 2, 500);
  const auto straight = train(WFUNet<float>(small(), 4), tr, va, tc);

  TrainOptions first;
  first.state_dir = dir / "state";
  first.stop_after_epochs = 2;
  const auto partial = train(WFUNet<float>(small(), 4), tr, va, tc, first);
  EXPECT_EQ(partial.history.stop_reason, StopReason::kInterrupted);
  EXPECT_EQ(partial.history.epochs.size(), 2u);

  TrainOptions second;
  second.state_dir = dir / "state";
  second.resume = true;
  const auto resumed = train(WFUNet<float>(small(), 4), tr, va, tc, second);
  ASSERT_EQ(resumed.history.epochs.size(), straight.history.epochs.size());
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(resumed.history.epochs[i].train_loss, straight.history.epochs[i].train_loss);
    EXPECT_EQ(resumed.history.epochs[i].val_loss, straight.history.epochs[i].val_loss);
    EXPECT_EQ(resumed.history.epochs[i].lr, straight.history.epochs[i].lr);
  }
  EXPECT_EQ(resumed.best_model.parameters(), straight.best_model.parameters());
  EXPECT_EQ(resumed.history.stop_reason, StopReason::kMaxEpochs);
}

TEST(Training, DivergenceIsNumericalError) {
  auto tr = windows({"tp"}, 2, 600);
  tr[1].target.values[0] = 1e30f;
  TrainConfig tc;
  tc.max_epochs = 2;
  try {
    train(CoreUNet<float>(small()), tr, tr, tc);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(Training, EmptySplitsAndBadConfig) {
  const auto tr = windows({"tp"}, 2, 1);
  TrainConfig tc;
  EXPECT_THROW(train(CoreUNet<float>(small()), tr, {}, tc), ConfigurationError);
  tc.learning_rate = 0;
  EXPECT_THROW(train(CoreUNet<float>(small()), tr, tr, tc), ConfigurationError);
}

TEST(Training, HistoryJsonRoundTrip) {
  TrainHistory h;
  h.epochs = {{1, 0.5, 0.4, 1e-4, 1.0}, {2, 0.3, 0.35, 1e-4, 1.1}};
  h.best_epoch = 2;
  h.best_val_loss = 0.35;
  h.stop_reason = StopReason::kEarlyStop;
  const auto back = TrainHistory::from_json(nlohmann::json::parse(h.to_json().dump()));
  EXPECT_EQ(back.to_json(), h.to_json());
  EXPECT_EQ(h.to_csv().substr(0, 37), "epoch,train_loss,val_loss,lr,seconds\n");
}
