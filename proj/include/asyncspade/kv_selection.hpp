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

#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "asyncspade/errors.hpp"
#include "asyncspade/linalg.hpp"
#include "asyncspade/query_predictor.hpp"

namespace asyncspade {

/// Query/key-value head arrangement. MHA has group size 1, MQA a single kv head.
struct AttentionLayout {
  std::size_t n_query_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;

  std::size_t group_size() const noexcept { return n_query_heads / n_kv_heads; }

  void validate() const {
    if (n_query_heads == 0 || n_kv_heads == 0 || head_dim == 0) {
      throw ValidationError("AttentionLayout: head counts and head_dim must be positive");
    }
    if (n_query_heads % n_kv_heads != 0) {
      throw ValidationError("AttentionLayout: " + std::to_string(n_query_heads) + " query heads not divisible by " +
                            std::to_string(n_kv_heads) + " kv heads");
    }
  }

  bool operator==(const AttentionLayout&) const = default;
};

/// Append-only key/value store, one growable block per (layer, batch, kv head).
class KvCache {
 public:
  KvCache(std::size_t layers, std::size_t batch, AttentionLayout layout)
      : layers_(layers), batch_(batch), layout_(layout), counts_(layers, 0) {
    layout_.validate();
    const std::size_t slots = batch * layout.n_kv_heads;
    keys_.assign(layers, std::vector<std::vector<float>>(slots));
    values_.assign(layers, std::vector<std::vector<float>>(slots));
  }

  /// k and v are (batch, kv head, dim) for one token.
  void append(std::size_t layer, std::span<const float> k, std::span<const float> v) {
    check_layer(layer);
    const std::size_t expect = batch_ * layout_.n_kv_heads * layout_.head_dim;
    if (k.size() != expect || v.size() != expect) {
      throw ShapeError("KvCache::append: expected " + std::to_string(expect) + " values per tensor");
    }
    const std::size_t d = layout_.head_dim;
    for (std::size_t s = 0; s < batch_ * layout_.n_kv_heads; ++s) {
      keys_[layer][s].insert(keys_[layer][s].end(), k.begin() + s * d, k.begin() + (s + 1) * d);
      values_[layer][s].insert(values_[layer][s].end(), v.begin() + s * d, v.begin() + (s + 1) * d);
    }
    ++counts_[layer];
  }

  std::size_t token_count(std::size_t layer) const {
    check_layer(layer);
    return counts_[layer];
  }

  /// All keys of one (layer, batch, kv head) as a token-major block.
  std::span<const float> keys(std::size_t layer, std::size_t b, std::size_t h) const {
    check_layer(layer);
    return keys_[layer][b * layout_.n_kv_heads + h];
  }
  std::span<const float> values(std::size_t layer, std::size_t b, std::size_t h) const {
    check_layer(layer);
    return values_[layer][b * layout_.n_kv_heads + h];
  }
  std::span<const float> key(std::size_t layer, std::size_t b, std::size_t h, std::size_t token) const {
    return keys(layer, b, h).subspan(token * layout_.head_dim, layout_.head_dim);
  }
  std::span<const float> value(std::size_t layer, std::size_t b, std::size_t h, std::size_t token) const {
    return values(layer, b, h).subspan(token * layout_.head_dim, layout_.head_dim);
  }

  std::size_t layers() const noexcept { return layers_; }
  std::size_t batch() const noexcept { return batch_; }
  const AttentionLayout& layout() const noexcept { return layout_; }

 private:
  void check_layer(std::size_t layer) const {
    if (layer >= layers_) {
      throw BoundError("KvCache: layer " + std::to_string(layer) + " out of range (" + std::to_string(layers_) + ")");
    }
  }

  std::size_t layers_;
  std::size_t batch_;
  AttentionLayout layout_;
  std::vector<std::size_t> counts_;
  std::vector<std::vector<std::vector<float>>> keys_;
  std::vector<std::vector<std::vector<float>>> values_;
};

inline void append_kv(KvCache& cache, std::size_t layer, std::span<const float> k, std::span<const float> v) {
  cache.append(layer, k, v);
}

enum class Aggregation { kMax, kSum };

/// One score row per (batch, kv head).
struct CriticalityScores {
  std::size_t batch = 0;
  std::size_t kv_heads = 0;
  std::vector<std::vector<double>> rows;

  const std::vector<double>& at(std::size_t b, std::size_t h) const { return rows[b * kv_heads + h]; }
};

/// Raw dot-product scores <q_h, K_j> reduced over the query heads that share a kv head.
/// queries is laid out (batch, query head, dim). Only the first token_limit tokens are scored.
inline CriticalityScores criticality_scores(std::span<const float> queries, const KvCache& cache, std::size_t layer,
                                            Aggregation aggregation = Aggregation::kMax,
                                            std::size_t token_limit = std::numeric_limits<std::size_t>::max()) {
  const AttentionLayout& lay = cache.layout();
  const std::size_t d = lay.head_dim;
  const std::size_t g = lay.group_size();
  if (queries.size() != cache.batch() * lay.n_query_heads * d) {
    throw ShapeError("criticality_scores: query tensor does not match the cache layout");
  }
  const std::size_t n = std::min(token_limit, cache.token_count(layer));
  CriticalityScores out{cache.batch(), lay.n_kv_heads, {}};
  out.rows.reserve(cache.batch() * lay.n_kv_heads);
  std::vector<double> logits(g * n);
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    for (std::size_t h = 0; h < lay.n_kv_heads; ++h) {
      // (g x D) . (D x N_t): the query heads of one group against the group's keys.
      auto q_block = queries.subspan((b * lay.n_query_heads + h * g) * d, g * d);
      multiply_abt(q_block, g, d, cache.keys(layer, b, h), n, logits);
      std::vector<double> row(logits.begin(), logits.begin() + static_cast<std::ptrdiff_t>(n));
      for (std::size_t i = 1; i < g; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const double s = logits[i * n + j];
          row[j] = aggregation == Aggregation::kMax ? std::max(row[j], s) : row[j] + s;
        }
      }
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

inline CriticalityScores criticality_scores(const PredictedQuery& q_hat, const KvCache& cache, std::size_t layer,
                                            Aggregation aggregation = Aggregation::kMax,
                                            std::size_t token_limit = std::numeric_limits<std::size_t>::max()) {
  const AttentionLayout& lay = cache.layout();
  if (q_hat.batch != cache.batch() || q_hat.heads != lay.n_query_heads || q_hat.head_dim != lay.head_dim) {
    throw ShapeError("criticality_scores: prediction dims do not match the cache layout");
  }
  return criticality_scores(q_hat.data, cache, layer, aggregation, token_limit);
}

/// Tokens that are always kept: the first sink_count and the last recent_count.
struct ProtectedTokens {
  std::size_t sink_count = 0;
  std::size_t recent_count = 0;
};

struct TokenSelection {
  std::vector<std::size_t> indices;
  // Set when the budget exceeded the cache and every token was selected.
  bool degraded = false;
};

inline TokenSelection select_tokens(std::span<const double> scores, std::size_t budget, ProtectedTokens protect = {}) {
  const std::size_t n = scores.size();
  if (protect.sink_count + protect.recent_count > budget) {
    throw ValidationError("select_tokens: protected tokens exceed the budget");
  }
  TokenSelection out;
  if (budget >= n) {
    out.indices.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.indices[i] = i;
    out.degraded = budget > n;
    return out;
  }
  if (protect.sink_count == 0 && protect.recent_count == 0) {
    out.indices = top_k(scores, budget);
    return out;
  }
  std::vector<bool> keep(n, false);
  for (std::size_t i = 0; i < std::min(protect.sink_count, n); ++i) keep[i] = true;
  for (std::size_t i = n - std::min(protect.recent_count, n); i < n; ++i) keep[i] = true;
  std::vector<std::size_t> rest_index;
  std::vector<double> rest_score;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) {
      ++kept;
    } else {
      rest_index.push_back(i);
      rest_score.push_back(scores[i]);
    }
  }
  for (std::size_t r : top_k(rest_score, budget - kept)) keep[rest_index[r]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) out.indices.push_back(i);
  }
  return out;
}

struct HeadSelection {
  std::vector<std::size_t> indices;
  std::vector<float> keys;    // indices.size() x head_dim
  std::vector<float> values;  // indices.size() x head_dim
};

/// Filtered cache for one layer: a sorted token set plus the gathered rows, per (batch, kv head).
struct SelectionResult {
  std::size_t batch = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t source_tokens = 0;
  bool degraded = false;
  std::vector<HeadSelection> heads;

  const HeadSelection& at(std::size_t b, std::size_t h) const { return heads[b * kv_heads + h]; }
  HeadSelection& at(std::size_t b, std::size_t h) { return heads[b * kv_heads + h]; }
};

/// Copies the selected rows into contiguous blocks. indices has one sorted list per (batch, kv head).
inline SelectionResult gather_filtered(const KvCache& cache, std::size_t layer,
                                       const std::vector<std::vector<std::size_t>>& indices) {
  const AttentionLayout& lay = cache.layout();
  const std::size_t n = cache.token_count(layer);
  if (indices.size() != cache.batch() * lay.n_kv_heads) {
    throw ShapeError("gather_filtered: expected one index list per (batch, kv head)");
  }
  SelectionResult out{cache.batch(), lay.n_kv_heads, lay.head_dim, n, false, {}};
  out.heads.resize(indices.size());
  const std::size_t d = lay.head_dim;
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    for (std::size_t h = 0; h < lay.n_kv_heads; ++h) {
      const auto& idx = indices[b * lay.n_kv_heads + h];
      HeadSelection& sel = out.at(b, h);
      sel.indices = idx;
      sel.keys.resize(idx.size() * d);
      sel.values.resize(idx.size() * d);
      auto keys = cache.keys(layer, b, h);
      auto values = cache.values(layer, b, h);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= n) throw BoundError("gather_filtered: token " + std::to_string(idx[i]) + " out of range");
        if (i > 0 && idx[i] <= idx[i - 1]) throw ContractError("gather_filtered: indices must be strictly increasing");
        std::copy_n(keys.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, sel.keys.begin() + static_cast<std::ptrdiff_t>(i * d));
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, sel.values.begin() + static_cast<std::ptrdiff_t>(i * d));
      }
    }
  }
  return out;
}

/// Score, select and gather for one layer.
inline SelectionResult select_and_gather(std::span<const float> queries, const KvCache& cache, std::size_t layer,
                                         std::size_t budget, ProtectedTokens protect = {},
                                         Aggregation aggregation = Aggregation::kMax) {
  CriticalityScores scores = criticality_scores(queries, cache, layer, aggregation);
  std::vector<std::vector<std::size_t>> idx;
  idx.reserve(scores.rows.size());
  bool degraded = false;
  for (const auto& row : scores.rows) {
    TokenSelection s = select_tokens(row, budget, protect);
    degraded = degraded || s.degraded;
    idx.push_back(std::move(s.indices));
  }
  SelectionResult out = gather_filtered(cache, layer, idx);
  out.degraded = degraded;
  return out;
}

/// |A intersect B| / |S| for two sorted, equally sized token sets.
inline double overlap_ratio(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) {
    throw ContractError("overlap_ratio: set sizes differ (" + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw ContractError("overlap_ratio: empty selection");
  std::size_t common = 0;
  for (std::size_t i = 0, j = 0; i < a.size() && j < b.size();) {
    if (a[i] == b[j]) {
      ++common;
      ++i;
      ++j;
    } else if (a[i] < b[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return static_cast<double>(common) / static_cast<double>(a.size());
}

/// Mean per-(batch, kv head) overlap of two layer selections.
inline double overlap_ratio(const SelectionResult& a, const SelectionResult& b) {
  if (a.heads.size() != b.heads.size() || a.heads.empty()) throw ContractError("overlap_ratio: head counts differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.heads.size(); ++i) sum += overlap_ratio(a.heads[i].indices, b.heads[i].indices);
  return sum / static_cast<double>(a.heads.size());
}

}  // namespace asyncspade
