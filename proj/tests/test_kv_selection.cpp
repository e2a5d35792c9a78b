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

#include <vector>

#include "asyncspade/kv_selection.hpp"
#include "asyncspade/random.hpp"
#include "oracles/oracles.hpp"

namespace {

using namespace asyncspade;

std::vector<float> normals(Rng& rng, std::size_t n) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(rng.normal());
  return v;
}

KvCache random_cache(Rng& rng, const AttentionLayout& lay, std::size_t batch, std::size_t tokens, std::size_t layers = 1) {
  KvCache c(layers, batch, lay);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t t = 0; t < tokens; ++t) {
      c.append(l, normals(rng, batch * lay.n_kv_heads * lay.head_dim), normals(rng, batch * lay.n_kv_heads * lay.head_dim));
    }
  }
  return c;
}

TEST(AttentionLayout, Validation) {
  EXPECT_NO_THROW((AttentionLayout{8, 2, 4}.validate()));
  EXPECT_EQ((AttentionLayout{8, 2, 4}.group_size()), 4u);
  EXPECT_THROW((AttentionLayout{6, 4, 4}.validate()), Error);
  EXPECT_THROW((AttentionLayout{0, 0, 4}.validate()), Error);
}

TEST(KvCache, AppendAndRead) {
  KvCache c(2, 2, {2, 2, 3});
  std::vector<float> k(12), v(12);
  for (std::size_t i = 0; i < 12; ++i) {
    k[i] = static_cast<float>(i);
    v[i] = -static_cast<float>(i);
  }
  c.append(1, k, v);
  c.append(1, v, k);
  EXPECT_EQ(c.token_count(1), 2u);
  EXPECT_EQ(c.token_count(0), 0u);
  // batch 1, head 0 starts at offset (1*2+0)*3 = 6
  EXPECT_EQ(c.key(1, 1, 0, 0)[0], 6.0f);
  EXPECT_EQ(c.key(1, 1, 0, 1)[0], -6.0f);
  EXPECT_EQ(c.values(1, 0, 1).size(), 6u);
  EXPECT_THROW(c.append(2, k, v), BoundError);
  EXPECT_THROW(c.append(0, std::vector<float>(5), v), ShapeError);
}

TEST(CriticalityScores, MatchPerHeadLoop) {
  Rng rng(2);
  for (const AttentionLayout lay : {AttentionLayout{4, 4, 8}, AttentionLayout{8, 2, 8}, AttentionLayout{4, 1, 16}}) {
    for (bool use_max : {true, false}) {
      const std::size_t batch = 2, n = 37;
      KvCache cache = random_cache(rng, lay, batch, n);
      auto q = normals(rng, batch * lay.n_query_heads * lay.head_dim);
      auto got = criticality_scores(q, cache, 0, use_max ? Aggregation::kMax : Aggregation::kSum);
      const std::size_t g = lay.group_size();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < lay.n_kv_heads; ++h) {
          std::vector<const float*> heads;
          for (std::size_t i = 0; i < g; ++i) heads.push_back(q.data() + (b * lay.n_query_heads + h * g + i) * lay.head_dim);
          auto want = oracle::group_scores(heads, cache.keys(0, b, h).data(), n, lay.head_dim, use_max);
          ASSERT_EQ(got.at(b, h).size(), n);
          for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(got.at(b, h)[j], want[j], 1e-9);
        }
      }
    }
  }
}

TEST(CriticalityScores, TokenLimitAndShapeErrors) {
  Rng rng(3);
  const AttentionLayout lay{2, 1, 4};
  KvCache cache = random_cache(rng, lay, 1, 10);
  auto q = normals(rng, 8);
  EXPECT_EQ(criticality_scores(q, cache, 0, Aggregation::kMax, 4).at(0, 0).size(), 4u);
  EXPECT_THROW(criticality_scores(normals(rng, 7), cache, 0), ShapeError);
}

TEST(SelectTokens, MatchesBruteForceWithProtection) {
  Rng rng(4);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 1 + rng.below(300);
    std::vector<double> s(n);
    for (double& x : s) x = rep % 3 == 0 ? static_cast<double>(rng.below(3)) : rng.normal();
    const std::size_t budget = rng.below(n + 5) + 1;
    const std::size_t sinks = std::min<std::size_t>(rng.below(4), budget);
    const std::size_t recents = std::min<std::size_t>(rng.below(4), budget - sinks);
    auto got = select_tokens(s, budget, {sinks, recents});
    EXPECT_EQ(got.indices, oracle::select(s, budget, sinks, recents));
    EXPECT_EQ(got.degraded, budget > n);
  }
}

TEST(SelectTokens, SelectsEverythingWhenBudgetCoversCache) {
  std::vector<double> s{0.1, 0.2, 0.3};
  auto exact = select_tokens(s, 3);
  EXPECT_EQ(exact.indices, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_FALSE(exact.degraded);
  EXPECT_TRUE(select_tokens(s, 10).degraded);
  EXPECT_THROW(select_tokens(s, 2, {2, 1}), ValidationError);
}

TEST(SelectTokens, PositiveScaleInvariant) {
  Rng rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> s(100);
    for (double& x : s) x = static_cast<double>(rng.below(20));
    std::vector<double> scaled = s;
    const double a = 0.5 + 4.0 * rng.uniform();
    for (double& x : scaled) x *= a;
    EXPECT_EQ(select_tokens(s, 13).indices, select_tokens(scaled, 13).indices);
  }
}

TEST(GatherFiltered, CopiesRowsAndValidates) {
  Rng rng(6);
  const AttentionLayout lay{2, 2, 3};
  KvCache cache = random_cache(rng, lay, 1, 6);
  auto sel = gather_filtered(cache, 0, {{1, 4}, {0, 5}});
  EXPECT_EQ(sel.source_tokens, 6u);
  for (std::size_t x = 0; x < 3; ++x) {
    EXPECT_EQ(sel.at(0, 0).keys[3 + x], cache.key(0, 0, 0, 4)[x]);
    EXPECT_EQ(sel.at(0, 1).values[x], cache.value(0, 0, 1, 0)[x]);
  }
  EXPECT_THROW(gather_filtered(cache, 0, {{1, 6}, {0, 1}}), BoundError);
  EXPECT_THROW(gather_filtered(cache, 0, {{2, 1}, {0, 1}}), ContractError);
  EXPECT_THROW(gather_filtered(cache, 0, {{1}}), ShapeError);
}

TEST(SelectAndGather, UsesAggregatedScores) {
  Rng rng(7);
  const AttentionLayout lay{4, 2, 8};
  KvCache cache = random_cache(rng, lay, 2, 50);
  auto q = normals(rng, 2 * 4 * 8);
  auto sel = select_and_gather(q, cache, 0, 10);
  auto scores = criticality_scores(q, cache, 0);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(sel.at(b, h).indices, oracle::top_k(scores.at(b, h), 10));
  }
}

TEST(OverlapRatio, Properties) {
  std::vector<std::size_t> a{1, 3, 5, 7}, b{3, 4, 5, 6}, c{0, 2, 4, 6};
  EXPECT_EQ(overlap_ratio(a, a), 1.0);
  EXPECT_EQ(overlap_ratio(a, b), 0.5);
  EXPECT_EQ(overlap_ratio(b, a), 0.5);
  EXPECT_EQ(overlap_ratio(a, c), 0.0);
  EXPECT_THROW(overlap_ratio(a, std::vector<std::size_t>{1}), ContractError);
  EXPECT_THROW(overlap_ratio(std::vector<std::size_t>{}, std::vector<std::size_t>{}), ContractError);
}

}  // namespace
