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

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "asyncspade/errors.hpp"

namespace asyncspade {

using FlopCount = std::uint64_t;

/// Decoder architecture dimensions used by the FLOPs and byte accounting.
struct ModelConfig {
  std::string name;
  std::uint64_t layers = 1;        // l
  std::uint64_t hidden = 1;        // H
  std::uint64_t q_heads = 1;       // q
  std::uint64_t kv_heads = 1;      // kv
  std::uint64_t head_dim = 1;      // h
  std::uint64_t intermediate = 1;  // i

  void validate() const {
    if (layers == 0 || hidden == 0 || q_heads == 0 || kv_heads == 0 || head_dim == 0 || intermediate == 0) {
      throw ValidationError("ModelConfig '" + name + "': all dimensions must be positive");
    }
    if (q_heads % kv_heads != 0) throw ValidationError("ModelConfig '" + name + "': q heads not divisible by kv heads");
  }
};

// Head dim is 128 for every Qwen3 dense model; note hidden != q_heads * head_dim for 32B.
inline const std::array<ModelConfig, 4>& model_presets() {
  static const std::array<ModelConfig, 4> presets{{
      {"qwen3-1.7b", 28, 2048, 16, 8, 128, 6144},
      {"qwen3-4b", 36, 2560, 32, 8, 128, 9728},
      {"qwen3-8b", 36, 4096, 32, 8, 128, 12288},
      {"qwen3-32b", 64, 5120, 64, 8, 128, 25600},
  }};
  return presets;
}

inline std::optional<ModelConfig> find_model_preset(std::string_view name) {
  for (const auto& m : model_presets()) {
    if (m.name == name) return m;
  }
  return std::nullopt;
}

inline ModelConfig model_preset(std::string_view name) {
  if (auto m = find_model_preset(name)) return *m;
  std::string names;
  for (const auto& m : model_presets()) names += (names.empty() ? "" : ", ") + m.name;
  throw ValidationError("unknown model preset '" + std::string(name) + "' (available: " + names + ")");
}

enum class Strategy { kFull, kTova, kQuest, kAsyncSpade };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kFull: return "full";
    case Strategy::kTova: return "tova";
    case Strategy::kQuest: return "quest";
    case Strategy::kAsyncSpade: return "asyncspade";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "full") return Strategy::kFull;
  if (s == "tova") return Strategy::kTova;
  if (s == "quest") return Strategy::kQuest;
  if (s == "asyncspade") return Strategy::kAsyncSpade;
  throw ValidationError("unknown strategy '" + std::string(s) + "' (expected full, tova, quest, asyncspade)");
}

struct StrategyConfig {
  Strategy kind = Strategy::kAsyncSpade;
  std::uint64_t context = 0;    // T
  std::uint64_t selected = 0;   // C
  std::uint64_t page_size = 16; // P, Quest only

  void validate() const {
    // Full attention never reads C.
    if (selected > context && kind != Strategy::kFull) {
      throw ValidationError("StrategyConfig: selected tokens exceed the context");
    }
    if (page_size == 0) throw ValidationError("StrategyConfig: page size must be >= 1");
  }
};

namespace detail {

inline FlopCount mul(FlopCount a, FlopCount b) {
  FlopCount r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw BoundError("FLOP count overflows 64 bits");
  return r;
}

inline FlopCount add(FlopCount a, FlopCount b) {
  FlopCount r = 0;
  if (__builtin_add_overflow(a, b, &r)) throw BoundError("FLOP count overflows 64 bits");
  return r;
}

}  // namespace detail

/// Dense projections and FFN: l * (2*2*H*q*h + 2*2*kv*h*H + 3*2*H*i).
inline FlopCount param_flops(const ModelConfig& m) {
  m.validate();
  using detail::add;
  using detail::mul;
  const FlopCount q_proj = mul(mul(mul(4, m.hidden), m.q_heads), m.head_dim);
  const FlopCount kv_proj = mul(mul(mul(4, m.kv_heads), m.head_dim), m.hidden);
  const FlopCount ffn = mul(mul(6, m.hidden), m.intermediate);
  return mul(m.layers, add(add(q_proj, kv_proj), ffn));
}

/// Attention-core cost of one decoded token. Quest's T/P rounds up: a partial page is still scored.
inline FlopCount attn_flops(const ModelConfig& m, const StrategyConfig& s) {
  m.validate();
  s.validate();
  using detail::add;
  using detail::mul;
  const FlopCount qh = mul(m.q_heads, m.head_dim);
  FlopCount per_layer = 0;
  switch (s.kind) {
    case Strategy::kFull:
      per_layer = mul(mul(4, qh), s.context);
      break;
    case Strategy::kTova:
      per_layer = add(mul(mul(4, qh), s.selected), mul(mul(2, qh), s.context));
      break;
    case Strategy::kQuest: {
      const FlopCount pages = s.context / s.page_size + (s.context % s.page_size != 0 ? 1 : 0);
      per_layer = add(mul(mul(4, qh), s.selected), mul(mul(2, qh), pages));
      break;
    }
    case Strategy::kAsyncSpade:
      per_layer = mul(mul(4, qh), s.selected);
      break;
  }
  return mul(m.layers, per_layer);
}

inline FlopCount total_flops(const ModelConfig& m, const StrategyConfig& s) {
  return detail::add(param_flops(m), attn_flops(m, s));
}

struct FlopsRow {
  Strategy strategy;
  FlopCount param = 0;
  FlopCount attn = 0;
  FlopCount total = 0;
};

/// One row per strategy, cheapest first.
inline std::vector<FlopsRow> flops_table(const ModelConfig& m, std::uint64_t context, std::uint64_t selected,
                                         std::uint64_t page_size) {
  std::vector<FlopsRow> rows;
  for (Strategy s : {Strategy::kAsyncSpade, Strategy::kQuest, Strategy::kTova, Strategy::kFull}) {
    StrategyConfig sc{s, context, selected, page_size};
    rows.push_back({s, param_flops(m), attn_flops(m, sc), total_flops(m, sc)});
  }
  return rows;
}

}  // namespace asyncspade
