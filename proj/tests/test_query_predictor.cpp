// Copyright 2026 The AsyncSpade Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "asyncspade/attention.hpp"
#include "asyncspade/query_predictor.hpp"
#include "asyncspade/random.hpp"
#include "oracles/oracles.hpp"

namespace {

using namespace asyncspade;

// Window of `len` single-head steps drawn from an AR(1) process.
QueryWindow ar_window(std::size_t len, std::size_t dim, std::uint64_t seed, std::size_t heads = 1) {
  Rng rng(seed);
  QueryWindow w(len, 1, heads, dim);
  std::vector<double> state(heads * dim);
  for (double& s : state) s = rng.normal();
  for (std::size_t t = 0; t < len + 20; ++t) {
    std::vector<float> q(heads * dim);
    for (std::size_t i = 0; i < q.size(); ++i) {
      state[i] = 0.95 * state[i] + 0.05 * rng.normal();
      q[i] = static_cast<float>(state[i]);
    }
    w.push(q);
  }
  return w;
}

oracle::Mat rows_of(const QueryWindow& w, std::size_t b = 0, std::size_t h = 0) {
  oracle::Mat rows;
  for (std::size_t i = 0; i < w.length(); ++i) {
    auto e = w.entry(b, h, i);
    rows.emplace_back(e.begin(), e.end());
  }
  return rows;
}

TEST(QueryWindow, EvictsOldestAndChecksShape) {
  QueryWindow w(3, 1, 1, 2);
  for (int t = 0; t < 5; ++t) w.push(std::vector<float>{float(t), float(-t)});
  EXPECT_EQ(w.length(), 3u);
  EXPECT_EQ(w.entry(0, 0, 0)[0], 2.0f);
  EXPECT_EQ(w.newest(0, 0)[1], -4.0f);
  EXPECT_THROW(w.push(std::vector<float>{1.0f}), ShapeError);
  EXPECT_THROW(QueryWindow(0, 1, 1, 2), ValidationError);
}

TEST(RidgeWeights, SatisfyNormalEquations) {
  Rng rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t k = 1 + rng.below(16), d = 4 + rng.below(60);
    std::vector<double> data(k * d), target(d);
    for (double& x : data) x = rng.normal();
    for (double& x : target) x = rng.normal();
    DenseMatrix<double> h(k, d, data);
    const double eps = 0.3;
    auto w = solve_ridge_weights(h, target, eps);
    oracle::Mat rows(k, oracle::Vec(d));
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < d; ++j) rows[i][j] = h(i, j);
    }
    auto want = oracle::ridge(rows, target, eps);
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(w[i], want[i], 1e-9 * (1 + std::abs(want[i])));
  }
}

TEST(RidgeWeights, RejectBadInputs) {
  DenseMatrix<double> h(2, 3, {1, 0, 0, 0, 1, 0});
  std::vector<double> t{1, 1, 1};
  EXPECT_THROW(solve_ridge_weights(h, t, 0.0), ValidationError);
  EXPECT_THROW(solve_ridge_weights(h, std::vector<double>{1, 1}, 1.0), ShapeError);
  EXPECT_THROW(solve_ridge_weights(DenseMatrix<double>(0, 3), t, 1.0), InsufficientHistoryError);
}

TEST(RelativeEpsilon, ScalesWithHistoryAndHasFloor) {
  RegressionConfig cfg;
  DenseMatrix<double> h(2, 2, {3, 4, 0, 0});
  EXPECT_DOUBLE_EQ(resolve_epsilon(h, cfg), 1e-2 * 25.0 / 2.0);
  EXPECT_EQ(resolve_epsilon(DenseMatrix<double>(2, 2), cfg), 1e-12);
  cfg.epsilon_mode = EpsilonMode::kAbsolute;
  cfg.epsilon = 0.7;
  EXPECT_EQ(resolve_epsilon(h, cfg), 0.7);
}

TEST(NormalizeWeights, SignConventions) {
  std::vector<double> raw{0.5, -1.0, 2.0};
  auto pos = normalize_weights(raw, WeightSign::kPositive);
  auto neg = normalize_weights(raw, WeightSign::kNegated);
  EXPECT_GT(pos[2], pos[0]);
  EXPECT_GT(neg[1], neg[0]);
  EXPECT_NEAR(neg[0] + neg[1] + neg[2], 1.0, 1e-15);
}

TEST(Predict, ConstantWindowIsExact) {
  QueryWindow w(8, 2, 3, 5);
  std::vector<float> q(2 * 3 * 5);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = 0.125f * static_cast<float>(i) - 0.7f;
  for (int t = 0; t < 8; ++t) w.push(q);
  RegressionConfig cfg;
  EXPECT_EQ(predict_assembled(w, cfg).data, q);
  EXPECT_EQ(predict_single_window(w, cfg).data, q);
  cfg.assembly_mode = AssemblyMode::kPerWindow;
  EXPECT_EQ(predict_assembled(w, cfg).data, q);
}

TEST(Predict, HugeEpsilonGivesWindowMean) {
  QueryWindow w = ar_window(6, 8, 12);
  RegressionConfig cfg;
  cfg.epsilon_mode = EpsilonMode::kAbsolute;
  cfg.epsilon = 1e9;
  auto rows = rows_of(w);
  const std::size_t m = rows.size() - 1;
  // uniform weights over the shifted window
  auto single = predict_single_window(w, cfg);
  for (std::size_t d = 0; d < 8; ++d) {
    double mean = 0;
    for (std::size_t i = 1; i <= m; ++i) mean += rows[i][d] / m;
    EXPECT_NEAR(single.data[d], mean, 1e-6);
  }
  // assembled: mean over k of the mean of the k newest rows
  auto assembled = predict_assembled(w, cfg);
  for (std::size_t d = 0; d < 8; ++d) {
    double acc = 0;
    for (std::size_t k = 1; k <= m; ++k) {
      double s = 0;
      for (std::size_t i = m - k + 1; i <= m; ++i) s += rows[i][d];
      acc += s / k / m;
    }
    EXPECT_NEAR(assembled.data[d], acc, 1e-6);
  }
}

TEST(Predict, MaskedSharedEqualsPerWindowAtTwo) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    QueryWindow w = ar_window(2, 16, seed, 3);
    RegressionConfig shared, per;
    per.assembly_mode = AssemblyMode::kPerWindow;
    auto a = predict_assembled(w, shared);
    auto b = predict_assembled(w, per);
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-9);
  }
}

TEST(Predict, PerWindowMatchesOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    QueryWindow w = ar_window(2 + seed, 12, 100 + seed);
    RegressionConfig cfg;
    cfg.assembly_mode = AssemblyMode::kPerWindow;
    auto got = predict_assembled(w, cfg);
    auto want = oracle::assembled(rows_of(w), cfg.epsilon);
    for (std::size_t d = 0; d < want.size(); ++d) EXPECT_NEAR(got.data[d], want[d], 1e-5);
  }
}

TEST(Predict, SingleWindowMatchesOracle) {
  QueryWindow w = ar_window(9, 10, 77);
  auto rows = rows_of(w);
  const std::size_t m = rows.size() - 1;
  oracle::Mat hist(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(m));
  auto weights = oracle::softmax(oracle::ridge(hist, rows[m], oracle::relative_eps(hist, 1e-2)));
  auto want = oracle::combine(rows, 1, weights);
  auto got = predict_single_window(w, RegressionConfig{});
  EXPECT_EQ(got.provenance, Provenance::kSingleWindow);
  for (std::size_t d = 0; d < want.size(); ++d) EXPECT_NEAR(got.data[d], want[d], 1e-5);
}

TEST(Predict, UnshiftedAppliesWeightsToHistory) {
  QueryWindow w = ar_window(5, 6, 8);
  auto rows = rows_of(w);
  oracle::Mat hist(rows.begin(), rows.begin() + 4);
  auto weights = oracle::softmax(oracle::ridge(hist, rows[4], oracle::relative_eps(hist, 1e-2)));
  auto want = oracle::combine(rows, 0, weights);
  auto got = reconstruct_unshifted(w, RegressionConfig{});
  EXPECT_EQ(got.provenance, Provenance::kReconstruction);
  for (std::size_t d = 0; d < want.size(); ++d) EXPECT_NEAR(got.data[d], want[d], 1e-5);
}

TEST(Predict, StaysInsideShiftedWindowHull) {
  // A convex combination of window rows never leaves their coordinate range.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    QueryWindow w = ar_window(16, 32, seed);
    auto rows = rows_of(w);
    auto p = predict_assembled(w, RegressionConfig{});
    for (std::size_t d = 0; d < 32; ++d) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 1; i < rows.size(); ++i) {
        lo = std::min(lo, rows[i][d]);
        hi = std::max(hi, rows[i][d]);
      }
      EXPECT_GE(p.data[d], lo - 1e-6);
      EXPECT_LE(p.data[d], hi + 1e-6);
    }
  }
}

TEST(Predict, TracksTheNextQueryOnAutoregressiveTraces) {
  const AttentionLayout lay{2, 2, 64};
  DecodeTrace tr = generate_trace(lay, 1, 400, 0.95, 0.05, 3);
  RegressionConfig cfg;
  double cos_sum = 0;
  int n = 0;
  for (std::size_t t = 100; t + 1 < 400; t += 7) {
    QueryWindow w(16, 1, 2, 64);
    for (std::size_t s = t - 15; s <= t; ++s) w.push(tr.query_at(s));
    auto p = predict_assembled(w, cfg);
    auto next = tr.query_at(t + 1);
    for (std::size_t h = 0; h < 2; ++h) {
      double dot = 0, a = 0, b = 0;
      for (std::size_t d = 0; d < 64; ++d) {
        dot += p.head(0, h)[d] * next[h * 64 + d];
        a += p.head(0, h)[d] * p.head(0, h)[d];
        b += next[h * 64 + d] * next[h * 64 + d];
      }
      cos_sum += dot / std::sqrt(a * b);
      ++n;
    }
  }
  EXPECT_GT(cos_sum / n, 0.7);
}

TEST(PredictNextQuery, WarmupPassesNewestThrough) {
  QueryWindow w(4, 1, 2, 3);
  RegressionConfig cfg;
  EXPECT_THROW(predict_next_query(w, cfg), InsufficientHistoryError);
  std::vector<float> q{1, 2, 3, 4, 5, 6};
  w.push(q);
  auto p = predict_next_query(w, cfg);
  EXPECT_EQ(p.provenance, Provenance::kPassthrough);
  EXPECT_EQ(p.data, q);
  EXPECT_THROW(predict_assembled(w, cfg), InsufficientHistoryError);
  w.push(q);
  EXPECT_EQ(predict_next_query(w, cfg).provenance, Provenance::kAssembled);
  EXPECT_EQ(predict_next_query(w, cfg, PredictorKind::kSingleWindow).provenance, Provenance::kSingleWindow);
}

TEST(RegressionConfig, Validation) {
  RegressionConfig cfg;
  cfg.window = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = {};
  cfg.epsilon_mode = EpsilonMode::kAbsolute;
  cfg.epsilon = 0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg.epsilon = -1;
  cfg.epsilon_mode = EpsilonMode::kRelative;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Predict, DeterministicAcrossCalls) {
  QueryWindow w = ar_window(16, 64, 5, 4);
  auto a = predict_assembled(w, RegressionConfig{});
  auto b = predict_assembled(w, RegressionConfig{});
  EXPECT_EQ(a.data, b.data);
}

}  // namespace
