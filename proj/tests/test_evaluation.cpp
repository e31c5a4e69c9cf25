#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "support.hpp"
#include "wfunet/evaluation.hpp"

using namespace wfunet;
using testing_support::TempDir;

namespace {

std::vector<std::uint8_t> random_mask(std::mt19937_64& rng, std::size_t n, double p) {
  std::bernoulli_distribution b(p);
  std::vector<std::uint8_t> m(n);
  for (auto& v : m) v = b(rng);
  return m;
}

GridFrame random_frame(std::mt19937_64& rng, std::size_t h, std::size_t w, double scale = 1.0) {
  std::uniform_real_distribution<double> u(0.0, scale);
  GridFrame f(h, w);
  for (auto& v : f.values) v = u(rng);
  return f;
}

SampleWindow<double> window_with_last(const GridFrame& last, const GridFrame& target,
                                      std::size_t lag = 3) {
  SampleWindow<double> w;
  FeatureBlock<double> b(1, lag, last.height, last.width, 0.5);
  std::copy(last.values.begin(), last.values.end(), b.values.end() - static_cast<long>(last.size()));
  w.inputs.emplace("tp", b);
  w.target = target;
  return w;
}

}  // namespace

TEST(Evaluation, BinarizeBoundaryIsInclusive) {
  GridFrame f(1, 3);
  f.values = {0.0046, 0.0047, 0.0048};
  EXPECT_EQ(binarize(f, 0.0047), (std::vector<std::uint8_t>{0, 1, 1}));
}

TEST(Evaluation, BinarizeZeroThresholdAndMonotonicity) {
  std::mt19937_64 rng(1);
  const auto f = random_frame(rng, 8, 8);
  for (auto v : binarize(f, 0.0)) EXPECT_EQ(v, 1);
  auto prev = binarize(f, 0.0);
  for (double t = 0.05; t <= 1.0; t += 0.05) {
    const auto cur = binarize(f, t);
    for (std::size_t i = 0; i < cur.size(); ++i) {
      EXPECT_LE(cur[i], prev[i]);
      EXPECT_EQ(cur[i], f.values[i] >= t ? 1 : 0);
    }
    prev = cur;
  }
}

TEST(Evaluation, TwoByTwoConfusion) {
  const auto m = classification_metrics({1, 1, 0, 0}, {1, 0, 1, 0});
  EXPECT_EQ(m.counts, (ConfusionCounts{1, 1, 1, 1}));
  EXPECT_EQ(m.accuracy, 0.5);
  EXPECT_EQ(*m.precision, 0.5);
  EXPECT_EQ(*m.recall, 0.5);
}

TEST(Evaluation, PerfectAndDegenerateMasks) {
  const auto ones = classification_metrics({1, 1, 1}, {1, 1, 1});
  EXPECT_EQ(ones.accuracy, 1.0);
  EXPECT_EQ(*ones.precision, 1.0);
  EXPECT_EQ(*ones.recall, 1.0);
  const auto zeros = classification_metrics({0, 0, 0, 0}, {0, 0, 0, 0});
  EXPECT_EQ(zeros.accuracy, 1.0);
  EXPECT_FALSE(zeros.precision.has_value());
  EXPECT_FALSE(zeros.recall.has_value());
  EXPECT_EQ(zeros.counts.tn, 4u);
  EXPECT_THROW(confusion_counts({1}, {1, 0}), AlignmentError);
}

TEST(Evaluation, RandomMasksMatchBruteForce) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const double p = (trial % 10) / 9.0;
    const auto pred = random_mask(rng, 64, p), target = random_mask(rng, 64, 1 - p);
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const int a = pred[r * 8 + c], b = target[r * 8 + c];
        tp += a && b;
        fp += a && !b;
        tn += !a && !b;
        fn += !a && b;
      }
    const auto m = classification_metrics(pred, target);
    EXPECT_EQ(m.counts, (ConfusionCounts{tp, fp, tn, fn}));
    EXPECT_EQ(m.accuracy, static_cast<double>(tp + tn) / 64.0);
    if (tp + fp) {
      EXPECT_EQ(*m.precision, static_cast<double>(tp) / static_cast<double>(tp + fp));
    } else {
      EXPECT_FALSE(m.precision);
    }
    if (tp + fn) {
      EXPECT_EQ(*m.recall, static_cast<double>(tp) / static_cast<double>(tp + fn));
    } else {
      EXPECT_FALSE(m.recall);
    }
  }
}

TEST(Evaluation, MseBasics) {
  std::mt19937_64 rng(3);
  std::vector<GridFrame> out, tgt;
  for (int i = 0; i < 5; ++i) {
    out.push_back(random_frame(rng, 4, 6));
    tgt.push_back(random_frame(rng, 4, 6));
  }
  EXPECT_EQ(evaluate_mse(tgt, tgt, 2.0), 0.0);
  double acc = 0;
  for (int i = 0; i < 5; ++i)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c) {
        const double d = out[i](r, c) - tgt[i](r, c);
        acc += d * d;
      }
  const double e = acc / (5 * 24);
  EXPECT_NEAR(evaluate_mse(out, tgt, 1.0), e, 1e-15);
  EXPECT_NEAR(evaluate_mse(out, tgt, 0.02), e * 0.02 * 0.02, 1e-18);
  EXPECT_THROW(evaluate_mse(out, tgt, std::nullopt), StateError);
}

TEST(Evaluation, MseIsInvariantToSampleOrder) {
  std::mt19937_64 rng(4);
  std::vector<GridFrame> out, tgt;
  for (int i = 0; i < 50; ++i) {
    out.push_back(random_frame(rng, 5, 5, std::pow(10.0, i % 7 - 3)));
    tgt.push_back(random_frame(rng, 5, 5));
  }
  const double base = evaluate_mse(out, tgt, 3.0);
  std::vector<std::size_t> idx(50);
  std::iota(idx.begin(), idx.end(), 0);
  for (int k = 0; k < 10; ++k) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<GridFrame> o2, t2;
    for (auto i : idx) {
      o2.push_back(out[i]);
      t2.push_back(tgt[i]);
    }
    EXPECT_EQ(evaluate_mse(o2, t2, 3.0), base);
  }
}

TEST(Evaluation, PersistenceIsLastFrameAtEveryHorizon) {
  std::mt19937_64 rng(5);
  const auto last = random_frame(rng, 4, 4);
  const auto w1 = window_with_last(last, random_frame(rng, 4, 4));
  const auto w3 = window_with_last(last, random_frame(rng, 4, 4));
  EXPECT_EQ(persistence_forecast(w1), last);
  EXPECT_EQ(persistence_forecast(w1), persistence_forecast(w3));
}

TEST(Evaluation, ComputeThreshold) {
  std::vector<GridFrame> frames(4, GridFrame(3, 3, 0.25));
  auto m = testing_support::meta("tp");
  m.norm_max = 8.0;
  EXPECT_EQ(compute_threshold(VariableSeries(m, frames)), 0.25);

  const auto s = normalize(testing_support::random_series("tp", 30, 7, 9, 6), 1.0);
  const std::vector<std::size_t> idx{2, 5, 11, 29};
  double mean = 0;
  std::size_t n = 0;
  for (auto t : idx)
    for (double v : s.frame(t).values) mean += (v - mean) / static_cast<double>(++n);
  EXPECT_NEAR(compute_threshold(s, idx), mean, 1e-12);
  EXPECT_THROW(compute_threshold(denormalize(s)), StateError);
}

TEST(Evaluation, ReportCellsEqualIndependentRecomputation) {
  std::mt19937_64 rng(7);
  std::map<std::size_t, std::vector<SampleWindow<double>>> test;
  for (std::size_t h : {1u, 2u}) {
    for (int i = 0; i < 6; ++i)
      test[h].push_back(window_with_last(random_frame(rng, 4, 4, 0.01), random_frame(rng, 4, 4, 0.01)));
  }
  Forecaster half = [](const SampleWindow<double>& w) {
    auto f = persistence_forecast(w);
    for (auto& v : f.values) v *= 0.5;
    return f;
  };
  EvalConfig cfg;
  cfg.horizons = {1, 2};
  const double norm_max = 0.7;
  const auto report = build_report({{"half", {{1, half}, {2, half}}}}, test, norm_max, cfg);
  ASSERT_EQ(report.rows.size(), 4u);
  EXPECT_EQ(report.model_names(), (std::vector<std::string>{"persistence", "half"}));
  for (std::size_t h : {1u, 2u}) {
    std::vector<GridFrame> outs, tgts;
    ConfusionCounts counts;
    for (const auto& w : test[h]) {
      outs.push_back(half(w));
      tgts.push_back(w.target);
      counts += confusion_counts(binarize(outs.back(), cfg.binarize_threshold),
                                 binarize(w.target, cfg.binarize_threshold));
    }
    const auto& row = report.row("half", h);
    EXPECT_EQ(row.mse, evaluate_mse(outs, tgts, norm_max));
    EXPECT_EQ(row.metrics.counts, counts);
    EXPECT_EQ(row.n_samples, 6u);
    const auto& c = row.metrics.counts;
    EXPECT_EQ(row.metrics.accuracy * static_cast<double>(c.total()), static_cast<double>(c.tp + c.tn));
    if (row.metrics.precision)
      EXPECT_NEAR(*row.metrics.precision * static_cast<double>(c.tp + c.fp), static_cast<double>(c.tp), 1e-9);
  }
  const auto avg = report.average_mse();
  EXPECT_DOUBLE_EQ(avg.at("half"), (report.row("half", 1).mse + report.row("half", 2).mse) / 2);
}

TEST(Evaluation, SingleModelSingleHorizonReport) {
  std::mt19937_64 rng(8);
  std::map<std::size_t, std::vector<SampleWindow<double>>> test;
  test[1].push_back(window_with_last(random_frame(rng, 2, 2), random_frame(rng, 2, 2)));
  EvalConfig cfg;
  cfg.horizons = {1};
  const auto r = build_report({}, test, 1.0, cfg);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].model, "persistence");
  EXPECT_THROW(build_report({{"m", {}}}, test, 1.0, cfg), ConfigurationError);
  cfg.horizons = {2};
  EXPECT_THROW(build_report({}, test, 1.0, cfg), ConfigurationError);
}

TEST(Evaluation, ReportArtifacts) {
  TempDir dir;
  MetricsReport r;
  MetricsRow a;
  a.model = "persistence";
  a.horizon = 1;
  a.mse = 2.5e-4;
  a.metrics = ClassificationMetrics::from_counts({0, 0, 4, 0});
  a.n_samples = 1;
  r.rows.push_back(a);
  write_report(r, dir.path());
  for (const char* f : {"report.json", "report.csv", "report.txt", "mse_by_horizon.csv",
                        "mse_by_horizon.svg", "summary.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto j = to_json(r);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_TRUE(j[0]["precision"].is_null());
  EXPECT_EQ(j[0]["tn"], 4);
  for (const char* key : {"model", "horizon", "mse", "accuracy", "precision", "recall", "tp", "fp",
                          "tn", "fn", "n_samples"})
    EXPECT_TRUE(j[0].contains(key)) << key;
  const auto csv = mse_by_horizon_csv(r);
  EXPECT_EQ(csv.substr(0, 18), "model,horizon,mse\n");
}
