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
#include <chrono>
#include <condition_variable>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "asyncspade/attention.hpp"
#include "asyncspade/errors.hpp"
#include "asyncspade/flops.hpp"
#include "asyncspade/kv_selection.hpp"
#include "asyncspade/query_predictor.hpp"

namespace asyncspade {

// ===========================================================================
// Configuration and byte accounting
// ===========================================================================

/// Timing parameters of the two ranks and the link between them.
struct LatencyModel {
  double bandwidth = 250e9;                // bytes/s, each direction
  double launch_overhead = 0.0;            // s per message
  double inference_latency_per_pack = 0.0; // s for a full pack on the inference rank
  double cache_latency_per_pack = 0.0;     // s for a full pack on the cache rank
  std::uint64_t element_width = 4;         // bytes per state element on the wire

  void validate() const {
    if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw ValidationError("LatencyModel: bandwidth must be > 0");
    if (!(launch_overhead >= 0.0) || !(inference_latency_per_pack >= 0.0) || !(cache_latency_per_pack >= 0.0)) {
      throw ValidationError("LatencyModel: latencies must be nonnegative");
    }
    if (element_width == 0) throw ValidationError("LatencyModel: element width must be positive");
  }
};

enum class StallPolicy { kWait, kReusePrevious };

inline const char* to_string(StallPolicy p) { return p == StallPolicy::kWait ? "wait" : "reuse-previous"; }

inline StallPolicy parse_stall_policy(std::string_view s) {
  if (s == "wait") return StallPolicy::kWait;
  if (s == "reuse-previous" || s == "reuse") return StallPolicy::kReusePrevious;
  throw ValidationError("unknown stall policy '" + std::string(s) + "' (expected wait or reuse-previous)");
}

struct PipelineConfig {
  ModelConfig model;
  std::uint64_t batch = 1;
  std::uint64_t context = 0;     // tokens already cached when sparse mode starts (init transfer size)
  std::uint64_t selected = 1;    // C
  std::uint64_t threshold = 16;  // first sparse step
  std::uint64_t pack_size = 1;   // layers per pack
  std::uint64_t steps = 8;       // sparse steps simulated from the threshold on
  LatencyModel latency;
  StallPolicy stall_policy = StallPolicy::kWait;
  RegressionConfig regression;
  Aggregation aggregation = Aggregation::kMax;
  ProtectedTokens protect;
  bool measure_divergence = false;  // inference rank keeps a dense reference cache

  AttentionLayout layout() const {
    return {static_cast<std::size_t>(model.q_heads), static_cast<std::size_t>(model.kv_heads),
            static_cast<std::size_t>(model.head_dim)};
  }
  std::size_t pack_count() const { return static_cast<std::size_t>((model.layers + pack_size - 1) / pack_size); }
  std::size_t pack_first_layer(std::size_t p) const { return static_cast<std::size_t>(p * pack_size); }
  std::size_t pack_layers(std::size_t p) const {
    return static_cast<std::size_t>(std::min<std::uint64_t>(pack_size, model.layers - p * pack_size));
  }
  /// Total decoding steps covered: dense steps before the threshold plus the sparse ones.
  std::size_t total_steps() const { return static_cast<std::size_t>(threshold + steps); }

  double inference_latency(std::size_t p) const {
    return latency.inference_latency_per_pack * static_cast<double>(pack_layers(p)) / static_cast<double>(pack_size);
  }
  double cache_latency(std::size_t p) const {
    return latency.cache_latency_per_pack * static_cast<double>(pack_layers(p)) / static_cast<double>(pack_size);
  }
  /// Step time with every cache-rank cost hidden: sum of inference pack latencies.
  double ideal_tpot() const {
    double t = 0.0;
    for (std::size_t p = 0; p < pack_count(); ++p) t += inference_latency(p);
    return t;
  }

  void validate() const {
    model.validate();
    latency.validate();
    regression.validate();
    if (batch == 0) throw ValidationError("PipelineConfig: batch must be positive");
    if (pack_size == 0 || pack_size > model.layers) {
      throw ValidationError("PipelineConfig: pack size must be in [1, layers]");
    }
    if (selected == 0) throw ValidationError("PipelineConfig: selected tokens must be positive");
    if (threshold < regression.window || threshold < 1) {
      throw ValidationError("PipelineConfig: threshold " + std::to_string(threshold) +
                            " must be >= the query window " + std::to_string(regression.window));
    }
    if (steps < 2) throw ValidationError("PipelineConfig: simulate at least 2 sparse steps");
    if (protect.sink_count + protect.recent_count > selected) {
      throw ValidationError("PipelineConfig: protected tokens exceed the selection budget");
    }
  }
};

/// Bytes of one pack's q/k/v states: sum over layers of B*(N_q + 2 N_kv)*D_h*width.
inline std::uint64_t pack_bytes(const PipelineConfig& c, std::size_t p) {
  const auto& m = c.model;
  return c.pack_layers(p) * c.batch * (m.q_heads + 2 * m.kv_heads) * m.head_dim * c.latency.element_width;
}

/// Bytes of one filtered pack: C gathered K and V rows per (batch, kv head) plus 4-byte indices.
inline std::uint64_t filtered_bytes(const PipelineConfig& c, std::size_t p) {
  const auto& m = c.model;
  const std::uint64_t rows = c.batch * m.kv_heads * c.selected;
  return c.pack_layers(p) * (rows * 2 * m.head_dim * c.latency.element_width + rows * 4);
}

/// Whole cache of `context` tokens plus the last W queries, every layer.
inline std::uint64_t init_bytes(const PipelineConfig& c) {
  const auto& m = c.model;
  const std::uint64_t kv = m.layers * c.batch * m.kv_heads * c.context * 2 * m.head_dim;
  const std::uint64_t q = m.layers * c.batch * m.q_heads * c.regression.window * m.head_dim;
  return (kv + q) * c.latency.element_width;
}

inline double transfer_time(const PipelineConfig& c, std::uint64_t bytes) {
  return c.latency.launch_overhead + static_cast<double>(bytes) / c.latency.bandwidth;
}

/// Round-trip link occupancy of pack p: both messages including their launch overheads.
inline double channel_cycle_time(const PipelineConfig& c, std::size_t p) {
  return transfer_time(c, pack_bytes(c, p)) + transfer_time(c, filtered_bytes(c, p));
}

/// Smallest bandwidth at which every pack's round trip fits in that pack's inference time:
/// bw = (pack_bytes + filtered_bytes) / (inference_latency - 2 * launch_overhead), maximized over packs.
inline double min_bandwidth(const PipelineConfig& c) {
  c.model.validate();
  c.latency.validate();
  double need = 0.0;
  for (std::size_t p = 0; p < c.pack_count(); ++p) {
    const double window = c.inference_latency(p) - 2.0 * c.latency.launch_overhead;
    if (!(window > 0.0)) {
      throw InfeasibleError("min_bandwidth: launch overhead " + std::to_string(c.latency.launch_overhead) +
                            " s leaves no transfer time within the " + std::to_string(c.inference_latency(p)) +
                            " s pack latency");
    }
    const double bytes = static_cast<double>(pack_bytes(c, p) + filtered_bytes(c, p));
    need = std::max(need, bytes / window);
  }
  return need;
}

// ===========================================================================
// Timeline
// ===========================================================================

enum class Rank { kInference, kCache, kChannel };
enum class EventKind { kCompute, kSend, kReceive, kStall };
enum class Direction { kNone, kToCache, kToInference };

inline const char* to_string(Rank r) {
  switch (r) {
    case Rank::kInference: return "inference";
    case Rank::kCache: return "cache";
    case Rank::kChannel: return "channel";
  }
  return "?";
}
inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::kCompute: return "compute";
    case EventKind::kSend: return "send";
    case EventKind::kReceive: return "receive";
    case EventKind::kStall: return "stall";
  }
  return "?";
}
inline const char* to_string(Direction d) {
  switch (d) {
    case Direction::kNone: return "none";
    case Direction::kToCache: return "to_cache";
    case Direction::kToInference: return "to_inference";
  }
  return "?";
}

/// pack is -1 for the init transfer. source_step names the step whose states built a
/// filtered pack (receives and return-direction sends); -1 otherwise.
struct TimelineEvent {
  Rank rank = Rank::kInference;
  EventKind kind = EventKind::kCompute;
  std::int64_t step = 0;
  std::int64_t pack = 0;
  double t_start = 0.0;
  double t_end = 0.0;
  Direction dir = Direction::kNone;
  std::int64_t source_step = -1;
  bool stale = false;      // receive of a reused (older) selection
  bool discarded = false;  // filtered pack that arrived after it was superseded
};

struct PipelineMetrics {
  double tpot = 0.0;              // mean steady-state sparse step time
  double ideal_tpot = 0.0;        // sum of inference pack latencies
  double stall_total = 0.0;       // inference-rank stall time over steady-state steps
  double overlap_fraction = 1.0;  // 1 - stall_total / sum of steady-state step times
  double init_stall = 0.0;        // stall in the first sparse step (waits on the init transfer)
  double dense_tpot = 0.0;
  std::size_t steady_steps = 0;
  std::size_t messages_to_cache = 0;
  std::size_t messages_to_inference = 0;
  std::size_t stale_reuses = 0;
  std::size_t discarded_packs = 0;
  std::uint64_t bytes_to_cache = 0;
  std::uint64_t bytes_to_inference = 0;
  std::size_t final_queue_depth = 0;
};

struct PipelineTimeline {
  std::vector<TimelineEvent> events;
  PipelineMetrics metrics;
};

/// Selection consumed by the inference rank for one (step, layer).
struct SelectionRecord {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t source_step = 0;
  bool stale = false;
  std::vector<std::vector<std::size_t>> indices;  // per (batch, kv head)

  bool operator==(const SelectionRecord&) const = default;
};

struct PipelineRun {
  PipelineTimeline timeline;
  std::vector<SelectionRecord> selections;
  // max |sparse - dense| attention output per sparse step (measure_divergence only)
  std::vector<double> divergence;
};

/// Derives step-level metrics from the event log. Steady state excludes the first sparse step,
/// whose start is gated by the init transfer.
inline PipelineMetrics compute_metrics(const std::vector<TimelineEvent>& events, const PipelineConfig& c) {
  const std::size_t total = c.total_steps();
  std::vector<double> step_end(total, 0.0);
  std::vector<double> step_stall(total, 0.0);
  PipelineMetrics m;
  for (const auto& e : events) {
    if (e.step < 0 || static_cast<std::size_t>(e.step) >= total) continue;
    const auto s = static_cast<std::size_t>(e.step);
    if (e.rank == Rank::kInference && e.kind == EventKind::kCompute) step_end[s] = std::max(step_end[s], e.t_end);
    if (e.rank == Rank::kInference && e.kind == EventKind::kStall) step_stall[s] += e.t_end - e.t_start;
    if (e.rank == Rank::kInference && e.kind == EventKind::kReceive) {
      if (e.stale) ++m.stale_reuses;
      if (e.discarded) ++m.discarded_packs;
    }
    if (e.rank == Rank::kChannel && e.kind == EventKind::kSend) {
      if (e.dir == Direction::kToCache) ++m.messages_to_cache;
      if (e.dir == Direction::kToInference) ++m.messages_to_inference;
    }
  }
  const auto theta = static_cast<std::size_t>(c.threshold);
  double sum = 0.0;
  for (std::size_t t = theta + 1; t < total; ++t) {
    sum += step_end[t] - step_end[t - 1];
    m.stall_total += step_stall[t];
  }
  m.steady_steps = total - theta - 1;
  m.tpot = m.steady_steps ? sum / static_cast<double>(m.steady_steps) : 0.0;
  m.overlap_fraction = sum > 0.0 ? 1.0 - m.stall_total / sum : 1.0;
  m.init_stall = theta < total ? step_stall[theta] : 0.0;
  if (theta >= 2) m.dense_tpot = (step_end[theta - 1] - step_end[0]) / static_cast<double>(theta - 1);
  m.ideal_tpot = c.ideal_tpot();
  return m;
}

// ===========================================================================
// Data plane: the two ranks' private state
// ===========================================================================

struct LayerStates {
  std::vector<float> q;  // (B, N_q, D)
  std::vector<float> k;  // (B, N_kv, D)
  std::vector<float> v;  // (B, N_kv, D)
};

/// q/k/v of one step for the layers of one pack.
struct PackUnit {
  std::size_t step = 0;
  std::size_t pack = 0;
  std::size_t first_layer = 0;
  std::vector<LayerStates> layers;
};

/// Selections built from step `source_step` states, used by attention at `target_step`.
struct FilteredPack {
  std::size_t target_step = 0;
  std::size_t source_step = 0;
  std::size_t pack = 0;
  std::size_t first_layer = 0;
  std::vector<SelectionResult> layers;
};

/// Cached tokens plus the recent queries shipped once when sparse mode begins.
struct InitTransfer {
  std::size_t step = 0;
  // [layer][token] key/value rows; queries hold the most recent window entries, oldest first.
  std::vector<std::vector<LayerStates>> kv;
  std::vector<std::vector<std::vector<float>>> queries;
};

/// Cache-rank state: the full per-layer KV store and per-layer query windows.
class CacheRankState {
 public:
  explicit CacheRankState(const PipelineConfig& cfg)
      : cfg_(cfg), cache_(static_cast<std::size_t>(cfg.model.layers), static_cast<std::size_t>(cfg.batch), cfg.layout()) {
    const auto lay = cfg.layout();
    for (std::uint64_t l = 0; l < cfg.model.layers; ++l) {
      windows_.emplace_back(cfg.regression.window, static_cast<std::size_t>(cfg.batch), lay.n_query_heads, lay.head_dim);
    }
  }

  void ingest(const InitTransfer& init) {
    for (std::size_t l = 0; l < init.kv.size(); ++l) {
      for (const auto& tok : init.kv[l]) cache_.append(l, tok.k, tok.v);
      for (const auto& q : init.queries[l]) windows_[l].push(q);
    }
  }

  /// Appends the step's KV, advances the window and prepares the next step's selection per layer.
  FilteredPack process(const PackUnit& unit) {
    FilteredPack out{unit.step + 1, unit.step, unit.pack, unit.first_layer, {}};
    for (std::size_t i = 0; i < unit.layers.size(); ++i) {
      const std::size_t l = unit.first_layer + i;
      const LayerStates& s = unit.layers[i];
      cache_.append(l, s.k, s.v);
      windows_[l].push(s.q);
      PredictedQuery q_hat = predict_next_query(windows_[l], cfg_.regression, PredictorKind::kAssembled);
      out.layers.push_back(select_and_gather(q_hat.data, cache_, l, static_cast<std::size_t>(cfg_.selected),
                                             cfg_.protect, cfg_.aggregation));
    }
    return out;
  }

 private:
  PipelineConfig cfg_;
  KvCache cache_;
  std::vector<QueryWindow> windows_;
};

/// Inference-rank state: produces each step's states from the traces and runs attention.
class InferenceRankState {
 public:
  InferenceRankState(const PipelineConfig& cfg, const std::vector<DecodeTrace>& traces)
      : cfg_(cfg), traces_(traces),
        dense_(traces.empty() ? 0 : static_cast<std::size_t>(cfg.model.layers), static_cast<std::size_t>(cfg.batch),
               cfg.layout()) {}

  bool has_data() const { return !traces_.empty(); }

  InitTransfer make_init(std::size_t step) const {
    InitTransfer init{step, {}, {}};
    if (!has_data()) return init;
    const std::size_t w = cfg_.regression.window;
    for (std::size_t l = 0; l < traces_.size(); ++l) {
      std::vector<LayerStates> kv;
      for (std::size_t t = 0; t < step; ++t) kv.push_back({{}, traces_[l].key_at(t), traces_[l].value_at(t)});
      std::vector<std::vector<float>> qs;
      for (std::size_t t = step > w ? step - w : 0; t < step; ++t) qs.push_back(traces_[l].query_at(t));
      init.kv.push_back(std::move(kv));
      init.queries.push_back(std::move(qs));
    }
    return init;
  }

  /// Runs the layers of pack p at `step`. `filtered` is null on dense steps.
  PackUnit compute_pack(std::size_t step, std::size_t p, const FilteredPack* filtered, bool record,
                        std::vector<SelectionRecord>& selections, bool stale) {
    PackUnit unit{step, p, cfg_.pack_first_layer(p), {}};
    if (!has_data()) return unit;
    const bool dense = step < cfg_.threshold;
    for (std::size_t i = 0; i < cfg_.pack_layers(p); ++i) {
      const std::size_t l = unit.first_layer + i;
      LayerStates s{traces_[l].query_at(step), traces_[l].key_at(step), traces_[l].value_at(step)};
      if (dense || cfg_.measure_divergence) dense_.append(l, s.k, s.v);
      if (dense) {
        (void)full_attention(s.q, dense_, l);
      } else {
        const SelectionResult& sel = filtered->layers.at(i);
        std::vector<double> out = attend_with_current(s, sel);
        if (cfg_.measure_divergence) {
          std::vector<double> ref = full_attention(s.q, dense_, l);
          double diff = 0.0;
          for (std::size_t x = 0; x < ref.size(); ++x) diff = std::max(diff, std::abs(ref[x] - out[x]));
          step_divergence_ = std::max(step_divergence_, diff);
        }
        if (record) {
          SelectionRecord rec{step, l, filtered->source_step, stale, {}};
          for (const auto& hs : sel.heads) rec.indices.push_back(hs.indices);
          selections.push_back(std::move(rec));
        }
      }
      unit.layers.push_back(std::move(s));
    }
    return unit;
  }

  double take_step_divergence() { return std::exchange(step_divergence_, 0.0); }

 private:
  // Attention over the filtered tokens plus the current token, which the inference rank holds locally.
  std::vector<double> attend_with_current(const LayerStates& s, const SelectionResult& sel) const {
    const auto lay = cfg_.layout();
    const std::size_t d = lay.head_dim;
    std::vector<double> out;
    for (std::size_t b = 0; b < sel.batch; ++b) {
      for (std::size_t h = 0; h < lay.n_query_heads; ++h) {
        const std::size_t kvh = h / lay.group_size();
        const HeadSelection& hs = sel.at(b, kvh);
        std::vector<float> keys = hs.keys, values = hs.values;
        const std::size_t off = (b * lay.n_kv_heads + kvh) * d;
        keys.insert(keys.end(), s.k.begin() + static_cast<std::ptrdiff_t>(off), s.k.begin() + static_cast<std::ptrdiff_t>(off + d));
        values.insert(values.end(), s.v.begin() + static_cast<std::ptrdiff_t>(off), s.v.begin() + static_cast<std::ptrdiff_t>(off + d));
        auto o = attend(std::span<const float>(s.q).subspan((b * lay.n_query_heads + h) * d, d), keys, values,
                        hs.indices.size() + 1);
        out.insert(out.end(), o.begin(), o.end());
      }
    }
    return out;
  }

  PipelineConfig cfg_;
  const std::vector<DecodeTrace>& traces_;
  KvCache dense_;
  double step_divergence_ = 0.0;
};

namespace detail {

inline void validate_traces(const PipelineConfig& cfg, const std::vector<DecodeTrace>& traces) {
  if (traces.empty()) return;
  if (traces.size() != cfg.model.layers) {
    throw ValidationError("pipeline: expected one trace per layer (" + std::to_string(cfg.model.layers) + "), got " +
                          std::to_string(traces.size()));
  }
  for (const auto& tr : traces) {
    tr.validate();
    if (!(tr.layout == cfg.layout()) || tr.batch != cfg.batch) {
      throw ValidationError("pipeline: trace layout or batch does not match the model");
    }
    if (tr.steps < cfg.total_steps()) {
      throw ValidationError("pipeline: traces hold " + std::to_string(tr.steps) + " steps, need " +
                            std::to_string(cfg.total_steps()));
    }
  }
}

inline void sort_events(std::vector<TimelineEvent>& events) {
  std::stable_sort(events.begin(), events.end(),
                   [](const TimelineEvent& a, const TimelineEvent& b) { return a.t_start < b.t_start; });
}

}  // namespace detail

// ===========================================================================
// Deterministic mode
// ===========================================================================

/// Runs the protocol under a virtual clock on one thread. Each rank and each link direction is a
/// FIFO server, so event times follow from processing messages in protocol order:
/// inference computes pack p of step t (waiting for its filtered pack when sparse), sends the
/// pack states, the cache rank processes them, and the filtered pack for step t+1 returns.
inline PipelineRun run_pipeline(const PipelineConfig& cfg, const std::vector<DecodeTrace>& traces = {}) {
  cfg.validate();
  detail::validate_traces(cfg, traces);
  InferenceRankState inference(cfg, traces);
  CacheRankState cache(cfg);

  const std::size_t total = cfg.total_steps();
  const std::size_t packs = cfg.pack_count();
  const auto theta = static_cast<std::size_t>(cfg.threshold);

  PipelineRun run;
  auto& ev = run.timeline.events;
  double inf_free = 0.0, up_free = 0.0, down_free = 0.0, cache_free = 0.0;

  struct Pending {
    double arrival = 0.0;
    FilteredPack pack;
  };
  std::vector<std::optional<Pending>> next(packs), current(packs);
  std::vector<std::optional<FilteredPack>> last_used(packs);

  for (std::size_t t = 0; t < total; ++t) {
    if (t + 1 == theta) {
      InitTransfer init = inference.make_init(t);
      const double start = std::max(inf_free, up_free);
      const std::uint64_t bytes = init_bytes(cfg);
      up_free = start + transfer_time(cfg, bytes);
      ev.push_back({Rank::kChannel, EventKind::kSend, static_cast<std::int64_t>(t), -1, start, up_free, Direction::kToCache});
      run.timeline.metrics.bytes_to_cache += bytes;
      cache.ingest(init);
      cache_free = std::max(cache_free, up_free);
    }
    std::swap(current, next);
    for (auto& n : next) n.reset();

    for (std::size_t p = 0; p < packs; ++p) {
      const FilteredPack* use = nullptr;
      bool stale = false;
      if (t >= theta) {
        Pending& fresh = *current[p];
        const bool late = fresh.arrival > inf_free;
        if (late && cfg.stall_policy == StallPolicy::kReusePrevious && last_used[p]) {
          stale = true;
          use = &*last_used[p];
          ev.push_back({Rank::kInference, EventKind::kReceive, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                        fresh.arrival, fresh.arrival, Direction::kNone,
                        static_cast<std::int64_t>(fresh.pack.source_step), false, true});
        } else {
          if (late) {
            ev.push_back({Rank::kInference, EventKind::kStall, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                          inf_free, fresh.arrival});
            inf_free = fresh.arrival;
          }
          last_used[p] = std::move(fresh.pack);
          use = &*last_used[p];
        }
        ev.push_back({Rank::kInference, EventKind::kReceive, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                      inf_free, inf_free, Direction::kNone, static_cast<std::int64_t>(use->source_step), stale});
      }
      const double c_start = inf_free;
      inf_free = c_start + cfg.inference_latency(p);
      ev.push_back({Rank::kInference, EventKind::kCompute, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                    c_start, inf_free});
      PackUnit unit = inference.compute_pack(t, p, use, true, run.selections, stale);

      if (t + 1 >= theta && t + 1 < total) {
        const double up_start = std::max(inf_free, up_free);
        up_free = up_start + transfer_time(cfg, pack_bytes(cfg, p));
        ev.push_back({Rank::kChannel, EventKind::kSend, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                      up_start, up_free, Direction::kToCache});
        run.timeline.metrics.bytes_to_cache += pack_bytes(cfg, p);

        const double k_start = std::max(up_free, cache_free);
        cache_free = k_start + cfg.cache_latency(p);
        ev.push_back({Rank::kCache, EventKind::kReceive, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                      k_start, k_start});
        ev.push_back({Rank::kCache, EventKind::kCompute, static_cast<std::int64_t>(t), static_cast<std::int64_t>(p),
                      k_start, cache_free});
        FilteredPack fp = cache.process(unit);

        const double down_start = std::max(cache_free, down_free);
        down_free = down_start + transfer_time(cfg, filtered_bytes(cfg, p));
        ev.push_back({Rank::kChannel, EventKind::kSend, static_cast<std::int64_t>(t + 1), static_cast<std::int64_t>(p),
                      down_start, down_free, Direction::kToInference, static_cast<std::int64_t>(t)});
        run.timeline.metrics.bytes_to_inference += filtered_bytes(cfg, p);
        next[p] = Pending{down_free, std::move(fp)};
      }
    }
    if (t >= theta && cfg.measure_divergence && inference.has_data()) {
      run.divergence.push_back(inference.take_step_divergence());
    }
  }

  detail::sort_events(ev);
  const auto bytes_up = run.timeline.metrics.bytes_to_cache;
  const auto bytes_down = run.timeline.metrics.bytes_to_inference;
  run.timeline.metrics = compute_metrics(ev, cfg);
  run.timeline.metrics.bytes_to_cache = bytes_up;
  run.timeline.metrics.bytes_to_inference = bytes_down;
  return run;
}

// ===========================================================================
// Live mode
// ===========================================================================

/// Unbounded FIFO shared by exactly one producer and one consumer.
template <typename T>
class MessageQueue {
 public:
  void push(T value) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
  }

  T pop() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty(); });
    T v = std::move(items_.front());
    items_.pop_front();
    return v;
  }

  /// Moves the front item into `out` if there is one.
  bool try_pop(T& out) {
    std::lock_guard<std::mutex> lock(mu_);
    if (items_.empty()) return false;
    out = std::move(items_.front());
    items_.pop_front();
    return true;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return items_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
};

/// Raised by run_live when a worker fails; carries the events recorded up to the failure.
class WorkerError : public Error {
 public:
  WorkerError(const std::string& what, PipelineTimeline partial) : Error(what), partial_(std::move(partial)) {}
  const PipelineTimeline& partial() const noexcept { return partial_; }

 private:
  PipelineTimeline partial_;
};

namespace detail {

struct Stamped {
  double enqueued = 0.0;
};
struct ShutdownMsg {};
struct ToCacheMsg : Stamped {
  std::variant<InitTransfer, PackUnit, ShutdownMsg> body;
};
struct ToInferenceMsg : Stamped {
  std::optional<FilteredPack> pack;  // empty = cache worker finished or failed
};

}  // namespace detail

/// Same protocol with two real threads and two FIFO queues; timestamps are wall-clock seconds
/// since start. The workers share nothing but the queues.
inline PipelineRun run_live(const PipelineConfig& cfg, const std::vector<DecodeTrace>& traces = {}) {
  cfg.validate();
  detail::validate_traces(cfg, traces);
  using Clock = std::chrono::steady_clock;
  const auto origin = Clock::now();
  auto now = [&] { return std::chrono::duration<double>(Clock::now() - origin).count(); };

  MessageQueue<detail::ToCacheMsg> up;
  MessageQueue<detail::ToInferenceMsg> down;
  std::vector<TimelineEvent> inf_events, cache_events;
  std::vector<SelectionRecord> selections;
  std::vector<double> divergence;
  std::exception_ptr inf_error, cache_error;

  const std::size_t total = cfg.total_steps();
  const std::size_t packs = cfg.pack_count();
  const auto theta = static_cast<std::size_t>(cfg.threshold);

  std::thread cache_worker([&] {
    try {
      CacheRankState cache(cfg);
      for (;;) {
        detail::ToCacheMsg msg = up.pop();
        const double got = now();
        if (std::holds_alternative<detail::ShutdownMsg>(msg.body)) break;
        if (auto* init = std::get_if<InitTransfer>(&msg.body)) {
          cache_events.push_back({Rank::kChannel, EventKind::kSend, static_cast<std::int64_t>(init->step), -1,
                                  msg.enqueued, got, Direction::kToCache});
          cache.ingest(*init);
          continue;
        }
        const PackUnit& unit = std::get<PackUnit>(msg.body);
        const auto step = static_cast<std::int64_t>(unit.step);
        const auto pk = static_cast<std::int64_t>(unit.pack);
        cache_events.push_back({Rank::kChannel, EventKind::kSend, step, pk, msg.enqueued, got, Direction::kToCache});
        cache_events.push_back({Rank::kCache, EventKind::kReceive, step, pk, got, got});
        FilteredPack fp = cache.process(unit);
        const double done = now();
        cache_events.push_back({Rank::kCache, EventKind::kCompute, step, pk, got, done});
        detail::ToInferenceMsg out;
        out.enqueued = done;
        out.pack = std::move(fp);
        down.push(std::move(out));
      }
    } catch (...) {
      cache_error = std::current_exception();
    }
    down.push(detail::ToInferenceMsg{});
  });

  std::size_t discarded = 0;
  std::thread inference_worker([&] {
    try {
      InferenceRankState inference(cfg, traces);
      std::map<std::pair<std::size_t, std::size_t>, std::pair<FilteredPack, double>> inbox;
      std::vector<std::optional<FilteredPack>> last_used(packs);
      bool peer_done = false;
      auto accept = [&](detail::ToInferenceMsg msg) {
        const double got = now();
        if (!msg.pack) {
          peer_done = true;
          return;
        }
        FilteredPack& fp = *msg.pack;
        inf_events.push_back({Rank::kChannel, EventKind::kSend, static_cast<std::int64_t>(fp.target_step),
                              static_cast<std::int64_t>(fp.pack), msg.enqueued, got, Direction::kToInference,
                              static_cast<std::int64_t>(fp.source_step)});
        const auto key = std::make_pair(fp.target_step, fp.pack);
        inbox.emplace(key, std::make_pair(std::move(fp), got));
      };
      auto send = [&](detail::ToCacheMsg msg) {
        msg.enqueued = now();
        up.push(std::move(msg));
      };

      for (std::size_t t = 0; t < total; ++t) {
        if (t + 1 == theta) send({{}, inference.make_init(t)});
        for (std::size_t p = 0; p < packs; ++p) {
          const FilteredPack* use = nullptr;
          bool stale = false;
          if (t >= theta) {
            for (detail::ToInferenceMsg m; down.try_pop(m);) accept(std::move(m));
            // superseded selections for this pack are dropped
            for (auto it = inbox.begin(); it != inbox.end();) {
              if (it->first.second == p && it->first.first < t) {
                inf_events.push_back({Rank::kInference, EventKind::kReceive, static_cast<std::int64_t>(t),
                                      static_cast<std::int64_t>(p), it->second.second, it->second.second,
                                      Direction::kNone, static_cast<std::int64_t>(it->second.first.source_step), false,
                                      true});
                ++discarded;
                it = inbox.erase(it);
              } else {
                ++it;
              }
            }
            auto it = inbox.find({t, p});
            if (it == inbox.end() && cfg.stall_policy == StallPolicy::kReusePrevious && last_used[p]) {
              stale = true;
              use = &*last_used[p];
            } else {
              const double wait_from = now();
              while (it == inbox.end()) {
                if (peer_done) throw Error("run_live: cache worker stopped before delivering a filtered pack");
                accept(down.pop());
                it = inbox.find({t, p});
              }
              const double wait_to = now();
              if (wait_to > wait_from) {
                inf_events.push_back({Rank::kInference, EventKind::kStall, static_cast<std::int64_t>(t),
                                      static_cast<std::int64_t>(p), wait_from, wait_to});
              }
              last_used[p] = std::move(it->second.first);
              inbox.erase(it);
              use = &*last_used[p];
            }
            const double at = now();
            inf_events.push_back({Rank::kInference, EventKind::kReceive, static_cast<std::int64_t>(t),
                                  static_cast<std::int64_t>(p), at, at, Direction::kNone,
                                  static_cast<std::int64_t>(use->source_step), stale});
          }
          const double c_start = now();
          PackUnit unit = inference.compute_pack(t, p, use, true, selections, stale);
          const double c_end = now();
          inf_events.push_back({Rank::kInference, EventKind::kCompute, static_cast<std::int64_t>(t),
                                static_cast<std::int64_t>(p), c_start, c_end});
          if (t + 1 >= theta && t + 1 < total) send({{}, std::move(unit)});
        }
        if (t >= theta && cfg.measure_divergence && inference.has_data()) {
          divergence.push_back(inference.take_step_divergence());
        }
      }
      send({{}, detail::ShutdownMsg{}});
      while (!peer_done) accept(down.pop());
      for (auto& [key, item] : inbox) {
        inf_events.push_back({Rank::kInference, EventKind::kReceive, static_cast<std::int64_t>(key.first),
                              static_cast<std::int64_t>(key.second), item.second, item.second, Direction::kNone,
                              static_cast<std::int64_t>(item.first.source_step), false, true});
        ++discarded;
      }
    } catch (...) {
      inf_error = std::current_exception();
      up.push({{}, detail::ShutdownMsg{}});
    }
  });

  inference_worker.join();
  cache_worker.join();

  PipelineRun run;
  auto& ev = run.timeline.events;
  ev = std::move(inf_events);
  ev.insert(ev.end(), cache_events.begin(), cache_events.end());
  detail::sort_events(ev);
  run.timeline.metrics = compute_metrics(ev, cfg);
  run.timeline.metrics.final_queue_depth = up.size() + down.size();
  run.selections = std::move(selections);
  run.divergence = std::move(divergence);
  for (const auto& e : ev) {
    if (e.rank != Rank::kChannel || e.kind != EventKind::kSend) continue;
    if (e.dir == Direction::kToCache) {
      run.timeline.metrics.bytes_to_cache += e.pack < 0 ? init_bytes(cfg) : pack_bytes(cfg, static_cast<std::size_t>(e.pack));
    } else {
      run.timeline.metrics.bytes_to_inference += filtered_bytes(cfg, static_cast<std::size_t>(e.pack));
    }
  }

  for (std::exception_ptr err : {cache_error, inf_error}) {
    if (!err) continue;
    try {
      std::rethrow_exception(err);
    } catch (const std::exception& e) {
      throw WorkerError(std::string("run_live: worker failed: ") + e.what(), run.timeline);
    }
  }
  (void)discarded;
  return run;
}

// ===========================================================================
// Verdicts and audits
// ===========================================================================

enum class BindingConstraint { kNone, kChannel, kCacheCompute, kPipelineDepth };

inline const char* to_string(BindingConstraint b) {
  switch (b) {
    case BindingConstraint::kNone: return "none";
    case BindingConstraint::kChannel: return "channel";
    case BindingConstraint::kCacheCompute: return "cache-compute";
    case BindingConstraint::kPipelineDepth: return "pipeline-depth";
  }
  return "?";
}

struct OverlapVerdict {
  bool fully_overlapped = false;
  double measured_tpot = 0.0;
  double ideal_tpot = 0.0;
  double stall_total = 0.0;
  double channel_utilization = 0.0;  // max over packs of round-trip link time / inference time
  double cache_utilization = 0.0;    // cache latency / inference latency
  BindingConstraint binding = BindingConstraint::kNone;
};

/// Fully overlapped iff no steady-state stall and TPOT equals the ideal within 1e-9 relative.
/// Otherwise names the resource whose per-pack occupancy exceeds the inference pack time most;
/// when none does, the round trip is longer than the lookahead the pack count provides.
inline OverlapVerdict verify_overlap(const PipelineTimeline& timeline, const PipelineConfig& cfg) {
  OverlapVerdict v;
  v.measured_tpot = timeline.metrics.tpot;
  v.ideal_tpot = cfg.ideal_tpot();
  v.stall_total = timeline.metrics.stall_total;
  for (std::size_t p = 0; p < cfg.pack_count(); ++p) {
    const double inf = cfg.inference_latency(p);
    if (inf > 0.0) {
      v.channel_utilization = std::max(v.channel_utilization, channel_cycle_time(cfg, p) / inf);
      v.cache_utilization = std::max(v.cache_utilization, cfg.cache_latency(p) / inf);
    }
  }
  const double rel = v.ideal_tpot > 0.0 ? std::abs(v.measured_tpot - v.ideal_tpot) / v.ideal_tpot
                                        : std::abs(v.measured_tpot);
  v.fully_overlapped = v.stall_total == 0.0 && rel <= 1e-9;
  if (v.fully_overlapped) return v;
  if (v.channel_utilization > 1.0 || v.cache_utilization > 1.0) {
    v.binding = v.channel_utilization >= v.cache_utilization ? BindingConstraint::kChannel
                                                             : BindingConstraint::kCacheCompute;
  } else {
    v.binding = BindingConstraint::kPipelineDepth;
  }
  return v;
}

struct TimelineAudit {
  bool rank_exclusive = true;  // no two positive-length events overlap on the inference or cache rank
  bool fifo = true;            // link messages leave in the order they entered, per direction
  bool causality = true;       // every consumed selection was built from an earlier step
  bool one_step_lag = true;    // fresh selections come from exactly the previous step
  bool conservation = true;    // every pack sent was processed once; every filtered pack consumed or dropped once
  std::vector<std::string> problems;

  bool ok() const { return rank_exclusive && fifo && causality && conservation; }
};

inline TimelineAudit audit_timeline(const PipelineTimeline& timeline, const PipelineConfig& cfg) {
  TimelineAudit a;
  const auto& ev = timeline.events;
  auto fail = [&](bool& flag, std::string msg) {
    flag = false;
    if (a.problems.size() < 20) a.problems.push_back(std::move(msg));
  };

  for (Rank r : {Rank::kInference, Rank::kCache}) {
    std::vector<std::pair<double, double>> spans;
    for (const auto& e : ev) {
      if (e.rank == r && e.t_end > e.t_start) spans.emplace_back(e.t_start, e.t_end);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i].first < spans[i - 1].second) {
        fail(a.rank_exclusive, std::string(to_string(r)) + " rank events overlap at t=" + std::to_string(spans[i].first));
      }
    }
  }

  for (Direction d : {Direction::kToCache, Direction::kToInference}) {
    std::vector<const TimelineEvent*> msgs;
    for (const auto& e : ev) {
      if (e.rank == Rank::kChannel && e.kind == EventKind::kSend && e.dir == d) msgs.push_back(&e);
    }
    // protocol order: by step, init (pack -1) first, then pack index
    std::stable_sort(msgs.begin(), msgs.end(), [](const TimelineEvent* x, const TimelineEvent* y) {
      return std::make_pair(x->step, x->pack) < std::make_pair(y->step, y->pack);
    });
    for (std::size_t i = 1; i < msgs.size(); ++i) {
      if (msgs[i]->t_start < msgs[i - 1]->t_start || msgs[i]->t_end < msgs[i - 1]->t_end) {
        fail(a.fifo, std::string("link ") + to_string(d) + " reordered at step " + std::to_string(msgs[i]->step));
      }
    }
  }

  std::size_t sent_up = 0, processed = 0, sent_down = 0, consumed = 0, dropped = 0;
  for (const auto& e : ev) {
    if (e.rank == Rank::kChannel && e.kind == EventKind::kSend && e.dir == Direction::kToCache && e.pack >= 0) ++sent_up;
    if (e.rank == Rank::kChannel && e.kind == EventKind::kSend && e.dir == Direction::kToInference) ++sent_down;
    if (e.rank == Rank::kCache && e.kind == EventKind::kCompute) ++processed;
    if (e.rank == Rank::kInference && e.kind == EventKind::kReceive) {
      if (e.discarded) {
        ++dropped;
        continue;
      }
      if (!e.stale) ++consumed;
      if (e.source_step < 0 || e.source_step >= e.step) {
        fail(a.causality, "step " + std::to_string(e.step) + " consumed a selection from step " +
                              std::to_string(e.source_step));
      }
      if (!e.stale && e.source_step != e.step - 1) {
        fail(a.one_step_lag, "step " + std::to_string(e.step) + " used a selection from step " +
                                 std::to_string(e.source_step));
      }
    }
  }
  if (sent_up != processed) {
    fail(a.conservation, std::to_string(sent_up) + " packs sent but " + std::to_string(processed) + " processed");
  }
  if (sent_down != consumed + dropped) {
    fail(a.conservation, std::to_string(sent_down) + " filtered packs sent but " + std::to_string(consumed) +
                             " consumed and " + std::to_string(dropped) + " dropped");
  }
  if (timeline.metrics.final_queue_depth != 0) fail(a.conservation, "queues not empty at shutdown");
  (void)cfg;
  return a;
}

// ===========================================================================
// Scenario presets (measured per-pack latencies and reference minimal bandwidths)
// ===========================================================================

struct ScenarioPreset {
  std::string name;
  std::string model;
  std::uint64_t batch;
  std::uint64_t context;
  std::uint64_t selected;
  std::string device;
  std::uint64_t pack_size;
  double inference_ms;
  double cache_ms;
  double reference_gbps;  // published minimal bandwidth, GB/s
  double device_gbps;     // inter-GPU bandwidth of the device node, GB/s
};

inline const std::vector<ScenarioPreset>& scenario_presets() {
  static const std::vector<ScenarioPreset> presets = {
      {"qwen3-8b-b8-32k-a100-p6", "qwen3-8b", 8, 32768, 2048, "a100", 6, 7.13, 6.42, 107.71, 250},
      {"qwen3-8b-b8-32k-a100-p12", "qwen3-8b", 8, 32768, 2048, "a100", 12, 14.26, 12.75, 107.71, 250},
      {"qwen3-8b-b8-32k-h100-p6", "qwen3-8b", 8, 32768, 2048, "h100", 6, 5.47, 3.92, 140.40, 350},
      {"qwen3-8b-b8-32k-h100-p12", "qwen3-8b", 8, 32768, 2048, "h100", 12, 10.94, 7.85, 140.40, 350},
      {"qwen3-8b-b16-16k-a100-p6", "qwen3-8b", 16, 16384, 1024, "a100", 6, 7.30, 7.02, 105.20, 250},
      {"qwen3-8b-b16-16k-a100-p12", "qwen3-8b", 16, 16384, 1024, "a100", 12, 14.60, 14.43, 105.20, 250},
      {"qwen3-8b-b16-16k-h100-p6", "qwen3-8b", 16, 16384, 1024, "h100", 6, 5.91, 5.18, 129.94, 350},
      {"qwen3-8b-b16-16k-h100-p12", "qwen3-8b", 16, 16384, 1024, "h100", 12, 11.82, 11.14, 129.94, 350},
      {"qwen3-32b-b8-32k-a100-p4", "qwen3-32b", 8, 32768, 2048, "a100", 4, 6.30, 5.16, 159.49, 250},
      {"qwen3-32b-b8-32k-a100-p8", "qwen3-32b", 8, 32768, 2048, "a100", 8, 12.60, 8.32, 159.49, 250},
      {"qwen3-32b-b8-32k-h100-p4", "qwen3-32b", 8, 32768, 2048, "h100", 4, 4.39, 3.74, 228.88, 350},
      {"qwen3-32b-b8-32k-h100-p8", "qwen3-32b", 8, 32768, 2048, "h100", 8, 8.78, 7.48, 228.88, 350},
      {"qwen3-32b-b16-16k-a100-p4", "qwen3-32b", 16, 16384, 1024, "a100", 4, 7.77, 7.02, 129.32, 250},
      {"qwen3-32b-b16-16k-a100-p8", "qwen3-32b", 16, 16384, 1024, "a100", 8, 15.54, 14.01, 129.32, 250},
      {"qwen3-32b-b16-16k-h100-p4", "qwen3-32b", 16, 16384, 1024, "h100", 4, 4.37, 3.72, 229.93, 350},
      {"qwen3-32b-b16-16k-h100-p8", "qwen3-32b", 16, 16384, 1024, "h100", 8, 8.74, 7.48, 229.93, 350},
  };
  return presets;
}

inline const ScenarioPreset& scenario_preset(std::string_view name) {
  for (const auto& p : scenario_presets()) {
    if (p.name == name) return p;
  }
  std::string names;
  for (const auto& p : scenario_presets()) names += (names.empty() ? "" : ", ") + p.name;
  throw ValidationError("unknown scenario preset '" + std::string(name) + "' (available: " + names + ")");
}

/// Pipeline config for a preset; the link runs at the device's inter-GPU bandwidth.
inline PipelineConfig pipeline_config_from(const ScenarioPreset& s) {
  PipelineConfig c;
  c.model = model_preset(s.model);
  c.batch = s.batch;
  c.context = s.context;
  c.selected = s.selected;
  c.pack_size = s.pack_size;
  c.threshold = 32;
  c.steps = 16;
  c.latency.bandwidth = s.device_gbps * 1e9;
  c.latency.inference_latency_per_pack = s.inference_ms * 1e-3;
  c.latency.cache_latency_per_pack = s.cache_ms * 1e-3;
  return c;
}

// ===========================================================================
// Export
// ===========================================================================

namespace detail {

inline std::string fixed9(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9f", x);
  return buf;
}

inline std::string number(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace detail

/// Timeline as JSON: one object per event (times in seconds, 9 decimals) and a metrics object.
inline std::string timeline_to_json(const PipelineTimeline& tl) {
  std::string out = "{\n  \"schema\": \"asyncspade.timeline.v1\",\n  \"events\": [\n";
  for (std::size_t i = 0; i < tl.events.size(); ++i) {
    const auto& e = tl.events[i];
    out += "    {\"rank\": \"" + std::string(to_string(e.rank)) + "\", \"kind\": \"" + to_string(e.kind) +
           "\", \"step\": " + std::to_string(e.step) + ", \"pack\": " + std::to_string(e.pack) +
           ", \"t_start\": " + detail::fixed9(e.t_start) + ", \"t_end\": " + detail::fixed9(e.t_end);
    if (e.dir != Direction::kNone) out += ", \"dir\": \"" + std::string(to_string(e.dir)) + "\"";
    if (e.source_step >= 0) out += ", \"source_step\": " + std::to_string(e.source_step);
    if (e.stale) out += ", \"stale\": true";
    if (e.discarded) out += ", \"discarded\": true";
    out += i + 1 < tl.events.size() ? "},\n" : "}\n";
  }
  const auto& m = tl.metrics;
  out += "  ],\n  \"metrics\": {\"tpot\": " + detail::fixed9(m.tpot) + ", \"ideal_tpot\": " + detail::fixed9(m.ideal_tpot) +
         ", \"stall_total\": " + detail::fixed9(m.stall_total) + ", \"overlap_fraction\": " +
         detail::number(m.overlap_fraction) + ", \"init_stall\": " + detail::fixed9(m.init_stall) +
         ", \"dense_tpot\": " + detail::fixed9(m.dense_tpot) + ", \"steady_steps\": " + std::to_string(m.steady_steps) +
         ", \"messages_to_cache\": " + std::to_string(m.messages_to_cache) + ", \"messages_to_inference\": " +
         std::to_string(m.messages_to_inference) + ", \"stale_reuses\": " + std::to_string(m.stale_reuses) +
         ", \"discarded_packs\": " + std::to_string(m.discarded_packs) + ", \"bytes_to_cache\": " +
         std::to_string(m.bytes_to_cache) + ", \"bytes_to_inference\": " + std::to_string(m.bytes_to_inference) +
         "}\n}\n";
  return out;
}

}  // namespace asyncspade
