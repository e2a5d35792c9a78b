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
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "asyncspade/errors.hpp"
#include "asyncspade/kv_selection.hpp"
#include "asyncspade/linalg.hpp"
#include "asyncspade/query_predictor.hpp"
#include "asyncspade/random.hpp"

namespace asyncspade {

/// Softmax weights of one query against n token keys, logits scaled by 1/sqrt(dim).
inline std::vector<double> attention_weights(std::span<const float> q, std::span<const float> keys, std::size_t n) {
  const std::size_t d = q.size();
  std::vector<double> logits(n);
  multiply_abt(q, 1, d, keys, n, logits);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : logits) x *= scale;
  return softmax(logits);
}

/// Attention output for one query head over n (key, value) rows.
inline std::vector<double> attend(std::span<const float> q, std::span<const float> keys,
                                  std::span<const float> values, std::size_t n) {
  if (n == 0) throw ContractError("attend: no tokens");
  const std::size_t d = q.size();
  std::vector<double> w = attention_weights(q, keys, n);
  std::vector<double> out(d, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const float* v = values.data() + j * d;
    for (std::size_t x = 0; x < d; ++x) out[x] += w[j] * static_cast<double>(v[x]);
  }
  return out;
}

/// Dense decode-step attention; queries and the result are laid out (batch, query head, dim).
inline std::vector<double> full_attention(std::span<const float> queries, const KvCache& cache, std::size_t layer) {
  const AttentionLayout& lay = cache.layout();
  const std::size_t n = cache.token_count(layer);
  if (n == 0) throw ContractError("full_attention: empty cache");
  if (queries.size() != cache.batch() * lay.n_query_heads * lay.head_dim) {
    throw ShapeError("full_attention: query tensor does not match the cache layout");
  }
  const std::size_t d = lay.head_dim;
  std::vector<double> out;
  out.reserve(queries.size());
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    for (std::size_t h = 0; h < lay.n_query_heads; ++h) {
      const std::size_t kvh = h / lay.group_size();
      auto o = attend(queries.subspan((b * lay.n_query_heads + h) * d, d), cache.keys(layer, b, kvh),
                      cache.values(layer, b, kvh), n);
      out.insert(out.end(), o.begin(), o.end());
    }
  }
  return out;
}

/// Same formula restricted to a filtered cache; the softmax renormalizes over the subset.
inline std::vector<double> sparse_attention(std::span<const float> queries, const SelectionResult& sel,
                                            std::size_t n_query_heads) {
  if (sel.heads.empty() || sel.kv_heads == 0) throw ContractError("sparse_attention: empty selection");
  if (n_query_heads % sel.kv_heads != 0) throw ShapeError("sparse_attention: head counts are not compatible");
  const std::size_t d = sel.head_dim;
  const std::size_t g = n_query_heads / sel.kv_heads;
  if (queries.size() != sel.batch * n_query_heads * d) throw ShapeError("sparse_attention: query tensor mismatch");
  std::vector<double> out;
  out.reserve(queries.size());
  for (std::size_t b = 0; b < sel.batch; ++b) {
    for (std::size_t h = 0; h < n_query_heads; ++h) {
      const HeadSelection& hs = sel.at(b, h / g);
      if (hs.indices.empty()) throw ContractError("sparse_attention: empty selection");
      auto o = attend(queries.subspan((b * n_query_heads + h) * d, d), hs.keys, hs.values, hs.indices.size());
      out.insert(out.end(), o.begin(), o.end());
    }
  }
  return out;
}

struct TraceMetadata {
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<double> sigma;
  std::string source = "synthetic";
};

/// Per-step query/key/value streams of one layer. Step index doubles as token position.
struct DecodeTrace {
  AttentionLayout layout;
  std::size_t batch = 1;
  std::size_t steps = 0;
  Tensor4 query;  // (B, N_q, T, D)
  Tensor4 key;    // (B, N_kv, T, D)
  Tensor4 value;  // (B, N_kv, T, D)
  TraceMetadata meta;

  /// Step t's tensor flattened to (batch, head, dim).
  static std::vector<float> at_step(const Tensor4& t4, std::size_t step) {
    std::vector<float> out;
    out.reserve(t4.batch() * t4.heads() * t4.head_dim());
    for (std::size_t b = 0; b < t4.batch(); ++b) {
      for (std::size_t h = 0; h < t4.heads(); ++h) {
        auto v = t4.vec(b, h, step);
        out.insert(out.end(), v.begin(), v.end());
      }
    }
    return out;
  }
  std::vector<float> query_at(std::size_t step) const { return at_step(query, step); }
  std::vector<float> key_at(std::size_t step) const { return at_step(key, step); }
  std::vector<float> value_at(std::size_t step) const { return at_step(value, step); }

  void validate() const {
    layout.validate();
    const std::array<std::size_t, 4> qd{batch, layout.n_query_heads, steps, layout.head_dim};
    const std::array<std::size_t, 4> kd{batch, layout.n_kv_heads, steps, layout.head_dim};
    if (query.dims != qd || key.dims != kd || value.dims != kd) throw ShapeError("DecodeTrace: tensor dims disagree");
  }
};

/// AR(1) query stream q_t = alpha q_{t-1} + sigma xi_t with q_0 ~ N(0, I); keys and values i.i.d. N(0, 1).
inline DecodeTrace generate_trace(const AttentionLayout& layout, std::size_t batch, std::size_t steps, double alpha,
                                  double sigma, std::uint64_t seed) {
  layout.validate();
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ValidationError("generate_trace: alpha must lie in [0, 1)");
  if (!(sigma >= 0.0)) throw ValidationError("generate_trace: sigma must be nonnegative");
  if (batch == 0 || steps == 0) throw ValidationError("generate_trace: batch and steps must be positive");
  DecodeTrace tr;
  tr.layout = layout;
  tr.batch = batch;
  tr.steps = steps;
  tr.query = Tensor4({batch, layout.n_query_heads, steps, layout.head_dim});
  tr.key = Tensor4({batch, layout.n_kv_heads, steps, layout.head_dim});
  tr.value = Tensor4({batch, layout.n_kv_heads, steps, layout.head_dim});
  tr.meta = {seed, alpha, sigma, "synthetic"};
  Rng rng(seed);
  const std::size_t d = layout.head_dim;
  std::vector<double> state(batch * layout.n_query_heads * d);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < layout.n_query_heads; ++h) {
        auto dst = tr.query.vec(b, h, t);
        for (std::size_t x = 0; x < d; ++x) {
          double& s = state[(b * layout.n_query_heads + h) * d + x];
          const double xi = rng.normal();
          s = t == 0 ? xi : alpha * s + sigma * xi;
          dst[x] = static_cast<float>(s);
        }
      }
    }
    for (Tensor4* t4 : {&tr.key, &tr.value}) {
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < layout.n_kv_heads; ++h) {
          for (float& x : t4->vec(b, h, t)) x = static_cast<float>(rng.normal());
        }
      }
    }
  }
  return tr;
}

/// Loads every step of a trace into a single-layer cache.
inline KvCache trace_cache(const DecodeTrace& trace) {
  KvCache cache(1, trace.batch, trace.layout);
  for (std::size_t t = 0; t < trace.steps; ++t) cache.append(0, trace.key_at(t), trace.value_at(t));
  return cache;
}

// ---------------------------------------------------------------------------
// Page-level (Quest-style) baseline

/// Per-page upper bound sum_d max(q_d * maxK_d, q_d * minK_d) for a group of g query heads
/// against n keys split into consecutive pages of page_size (last page may be short).
inline std::vector<double> page_scores(std::span<const float> q_group, std::size_t g, std::span<const float> keys,
                                       std::size_t n, std::size_t page_size, Aggregation aggregation) {
  if (page_size == 0) throw ValidationError("page_scores: page size must be >= 1");
  const std::size_t d = q_group.size() / g;
  const std::size_t pages = (n + page_size - 1) / page_size;
  std::vector<double> out(pages, 0.0);
  std::vector<float> lo(d), hi(d);
  for (std::size_t p = 0; p < pages; ++p) {
    const std::size_t first = p * page_size;
    const std::size_t last = std::min(n, first + page_size);
    std::copy_n(keys.begin() + static_cast<std::ptrdiff_t>(first * d), d, lo.begin());
    std::copy_n(keys.begin() + static_cast<std::ptrdiff_t>(first * d), d, hi.begin());
    for (std::size_t j = first + 1; j < last; ++j) {
      for (std::size_t x = 0; x < d; ++x) {
        lo[x] = std::min(lo[x], keys[j * d + x]);
        hi[x] = std::max(hi[x], keys[j * d + x]);
      }
    }
    for (std::size_t i = 0; i < g; ++i) {
      double bound = 0.0;
      for (std::size_t x = 0; x < d; ++x) {
        const double qx = q_group[i * d + x];
        bound += std::max(qx * static_cast<double>(hi[x]), qx * static_cast<double>(lo[x]));
      }
      if (i == 0) {
        out[p] = bound;
      } else {
        out[p] = aggregation == Aggregation::kMax ? std::max(out[p], bound) : out[p] + bound;
      }
    }
  }
  return out;
}

struct PageSelection {
  SelectionResult selection;
  std::size_t effective_budget = 0;  // budget rounded down to a multiple of the page size
};

/// Picks the budget/page_size pages with the highest bound and keeps every token in them.
inline PageSelection page_level_select(std::span<const float> queries, const KvCache& cache, std::size_t layer,
                                       std::size_t budget, std::size_t page_size,
                                       Aggregation aggregation = Aggregation::kMax,
                                       std::size_t token_limit = std::numeric_limits<std::size_t>::max()) {
  if (page_size == 0) throw ValidationError("page_level_select: page size must be >= 1");
  const AttentionLayout& lay = cache.layout();
  const std::size_t d = lay.head_dim;
  const std::size_t g = lay.group_size();
  if (queries.size() != cache.batch() * lay.n_query_heads * d) throw ShapeError("page_level_select: query mismatch");
  const std::size_t n = std::min(token_limit, cache.token_count(layer));
  const std::size_t want_pages = budget / page_size;
  std::vector<std::vector<std::size_t>> idx;
  for (std::size_t b = 0; b < cache.batch(); ++b) {
    for (std::size_t h = 0; h < lay.n_kv_heads; ++h) {
      auto q_group = queries.subspan((b * lay.n_query_heads + h * g) * d, g * d);
      std::vector<double> ps = page_scores(q_group, g, cache.keys(layer, b, h), n, page_size, aggregation);
      std::vector<std::size_t> tokens;
      for (std::size_t p : top_k(ps, std::min(want_pages, ps.size()))) {
        for (std::size_t j = p * page_size; j < std::min(n, (p + 1) * page_size); ++j) tokens.push_back(j);
      }
      idx.push_back(std::move(tokens));
    }
  }
  PageSelection out{gather_filtered(cache, layer, idx), want_pages * page_size};
  out.selection.source_tokens = n;
  return out;
}

// ---------------------------------------------------------------------------
// Selector evaluation

struct SelectorKind {
  enum class Kind { kOracleNext, kPredictedSingle, kPredictedAssembled, kReconstructUnshifted, kLastQuery, kPageLevel, kRandom };
  Kind kind = Kind::kPredictedAssembled;
  std::size_t page_size = 16;
  std::uint64_t seed = 0;

  std::string name() const {
    switch (kind) {
      case Kind::kOracleNext: return "oracle";
      case Kind::kPredictedSingle: return "single";
      case Kind::kPredictedAssembled: return "assembled";
      case Kind::kReconstructUnshifted: return "unshifted";
      case Kind::kLastQuery: return "last";
      case Kind::kPageLevel: return "page:" + std::to_string(page_size);
      case Kind::kRandom: return "random:" + std::to_string(seed);
    }
    return "?";
  }

  static SelectorKind oracle() { return {Kind::kOracleNext}; }
  static SelectorKind single() { return {Kind::kPredictedSingle}; }
  static SelectorKind assembled() { return {Kind::kPredictedAssembled}; }
  static SelectorKind unshifted() { return {Kind::kReconstructUnshifted}; }
  static SelectorKind last_query() { return {Kind::kLastQuery}; }
  static SelectorKind page_level(std::size_t p) { return {Kind::kPageLevel, p}; }
  static SelectorKind random(std::uint64_t seed) { return {Kind::kRandom, 16, seed}; }

  /// Accepts the names produced by name(); "page" and "random" default to 16 and 0.
  static SelectorKind parse(const std::string& text) {
    const auto colon = text.find(':');
    const std::string head = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    auto number = [&](std::uint64_t dflt) -> std::uint64_t {
      if (arg.empty()) return dflt;
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(arg, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != arg.size()) throw ValidationError("selector '" + text + "': bad argument");
      return v;
    };
    if (head == "oracle") return oracle();
    if (head == "single") return single();
    if (head == "assembled") return assembled();
    if (head == "unshifted") return unshifted();
    if (head == "last") return last_query();
    if (head == "page") {
      auto p = number(16);
      if (p == 0) throw ValidationError("selector '" + text + "': page size must be >= 1");
      return page_level(p);
    }
    if (head == "random") return random(number(0));
    throw ValidationError("unknown selector '" + text +
                          "' (expected oracle, single, assembled, unshifted, last, page[:P], random[:seed])");
  }
};

struct EvalOptions {
  std::size_t budget = 0;               // C, tokens kept per (batch, kv head)
  std::vector<std::size_t> distances;   // d values for O_{t-d,t}
  std::size_t first_step = 0;           // first measured step t
  std::size_t steps = 0;                // measured steps; 0 = as many as the trace allows
  RegressionConfig regression;
  Aggregation aggregation = Aggregation::kMax;
  std::size_t threads = 1;
};

struct OverlapRow {
  std::size_t step = 0;
  std::string selector;
  std::size_t distance = 0;
  double overlap = 0.0;
};

struct OverlapSummary {
  std::string selector;
  std::size_t distance = 0;
  double mean = 0.0;
  std::size_t count = 0;
};

/// Per-step overlap series plus means. Rows named "locality" carry O_{t-d,t}; selector rows
/// carry distance 0 and compare the selector's set with the true next-query selection.
struct OverlapReport {
  std::vector<OverlapRow> rows;
  std::vector<OverlapSummary> summary;

  double mean(const std::string& selector, std::size_t distance = 0) const {
    for (const auto& s : summary) {
      if (s.selector == selector && s.distance == distance) return s.mean;
    }
    throw ContractError("OverlapReport: no series " + selector + "@" + std::to_string(distance));
  }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> select_sets(std::span<const float> queries, const KvCache& cache,
                                                         std::size_t n, std::size_t budget, Aggregation agg) {
  CriticalityScores sc = criticality_scores(queries, cache, 0, agg, n);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(sc.rows.size());
  for (const auto& r : sc.rows) out.push_back(select_tokens(r, budget).indices);
  return out;
}

// |A intersect B| / budget averaged over heads. Page-level sets may be smaller than the budget.
inline double mean_overlap(const std::vector<std::vector<std::size_t>>& a,
                           const std::vector<std::vector<std::size_t>>& b, std::size_t budget) {
  double sum = 0.0;
  for (std::size_t h = 0; h < a.size(); ++h) {
    std::size_t common = 0;
    for (std::size_t i = 0, j = 0; i < a[h].size() && j < b[h].size();) {
      if (a[h][i] == b[h][j]) {
        ++common, ++i, ++j;
      } else if (a[h][i] < b[h][j]) {
        ++i;
      } else {
        ++j;
      }
    }
    sum += static_cast<double>(common) / static_cast<double>(budget);
  }
  return sum / static_cast<double>(a.size());
}

inline QueryWindow window_ending_at(const DecodeTrace& trace, std::size_t last_step, std::size_t capacity) {
  QueryWindow w(capacity, trace.batch, trace.layout.n_query_heads, trace.layout.head_dim);
  const std::size_t first = last_step + 1 >= capacity ? last_step + 1 - capacity : 0;
  for (std::size_t s = first; s <= last_step; ++s) w.push(trace.query_at(s));
  return w;
}

}  // namespace detail

/// Overlap evaluation over a single-layer trace. At measured step t the cache holds tokens
/// 0..t; the reference set is the top-C selection of the true next query q_{t+1}.
inline OverlapReport evaluate_selectors(const DecodeTrace& trace, const std::vector<SelectorKind>& kinds,
                                        const EvalOptions& opt) {
  trace.validate();
  opt.regression.validate();
  if (opt.budget == 0) throw ValidationError("evaluate_selectors: budget must be positive");
  std::size_t max_d = 0;
  for (std::size_t d : opt.distances) max_d = std::max(max_d, d);
  const std::size_t first = std::max({opt.first_step, max_d, opt.budget - 1});
  if (first + 1 >= trace.steps) {
    throw InsufficientHistoryError("evaluate_selectors: trace of " + std::to_string(trace.steps) +
                                   " steps is too short for the requested evaluation");
  }
  const std::size_t available = trace.steps - 1 - first;
  const std::size_t count = opt.steps == 0 ? available : opt.steps;
  if (count > available) {
    throw InsufficientHistoryError("evaluate_selectors: trace too short for " + std::to_string(count) + " steps");
  }

  const KvCache cache = trace_cache(trace);
  const std::size_t per_step = opt.distances.size() + kinds.size();
  std::vector<OverlapRow> rows(count * per_step);

  auto work = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t t = first + i;
      const std::size_t n = t + 1;
      const auto q_now = trace.query_at(t);
      const auto target = detail::select_sets(trace.query_at(t + 1), cache, n, opt.budget, opt.aggregation);
      const auto now_sets = detail::select_sets(q_now, cache, n, opt.budget, opt.aggregation);
      std::size_t slot = i * per_step;
      for (std::size_t d : opt.distances) {
        const auto past = detail::select_sets(trace.query_at(t - d), cache, n, opt.budget, opt.aggregation);
        rows[slot++] = {t, "locality", d, detail::mean_overlap(past, now_sets, opt.budget)};
      }
      for (const SelectorKind& k : kinds) {
        std::vector<std::vector<std::size_t>> sets;
        switch (k.kind) {
          case SelectorKind::Kind::kOracleNext:
            sets = target;
            break;
          case SelectorKind::Kind::kLastQuery:
            sets = now_sets;
            break;
          case SelectorKind::Kind::kPredictedSingle:
          case SelectorKind::Kind::kPredictedAssembled: {
            QueryWindow w = detail::window_ending_at(trace, t, opt.regression.window);
            PredictedQuery p = predict_next_query(w, opt.regression,
                                                  k.kind == SelectorKind::Kind::kPredictedSingle
                                                      ? PredictorKind::kSingleWindow
                                                      : PredictorKind::kAssembled);
            sets = detail::select_sets(p.data, cache, n, opt.budget, opt.aggregation);
            break;
          }
          case SelectorKind::Kind::kReconstructUnshifted: {
            QueryWindow w = detail::window_ending_at(trace, t + 1, opt.regression.window);
            PredictedQuery p = reconstruct_unshifted(w, opt.regression);
            sets = detail::select_sets(p.data, cache, n, opt.budget, opt.aggregation);
            break;
          }
          case SelectorKind::Kind::kPageLevel: {
            PageSelection ps = page_level_select(q_now, cache, 0, opt.budget, k.page_size, opt.aggregation, n);
            for (const auto& hs : ps.selection.heads) sets.push_back(hs.indices);
            break;
          }
          case SelectorKind::Kind::kRandom: {
            Rng rng(derive_seed(k.seed, t));
            for (std::size_t h = 0; h < target.size(); ++h) {
              // partial Fisher-Yates over [0, n)
              std::vector<std::size_t> pool(n);
              for (std::size_t j = 0; j < n; ++j) pool[j] = j;
              for (std::size_t j = 0; j < opt.budget; ++j) {
                std::swap(pool[j], pool[j + rng.below(n - j)]);
              }
              pool.resize(opt.budget);
              std::sort(pool.begin(), pool.end());
              sets.push_back(std::move(pool));
            }
            break;
          }
        }
        rows[slot++] = {t, k.name(), 0, detail::mean_overlap(sets, target, opt.budget)};
      }
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, count));
  if (threads == 1) {
    work(0, count);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (count + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
      const std::size_t lo = w * chunk, hi = std::min(count, lo + chunk);
      if (lo < hi) pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  OverlapReport report;
  report.rows = std::move(rows);
  std::map<std::pair<std::string, std::size_t>, std::pair<double, std::size_t>> acc;
  std::vector<std::pair<std::string, std::size_t>> order;
  for (const auto& r : report.rows) {
    auto key = std::make_pair(r.selector, r.distance);
    auto [it, fresh] = acc.try_emplace(key, 0.0, 0);
    if (fresh) order.push_back(key);
    it->second.first += r.overlap;
    it->second.second += 1;
  }
  for (const auto& key : order) {
    const auto& [sum, n] = acc[key];
    report.summary.push_back({key.first, key.second, sum / static_cast<double>(n), n});
  }
  return report;
}

inline OverlapReport evaluate_selector(const DecodeTrace& trace, const SelectorKind& kind, const EvalOptions& opt) {
  return evaluate_selectors(trace, {kind}, opt);
}

}  // namespace asyncspade
