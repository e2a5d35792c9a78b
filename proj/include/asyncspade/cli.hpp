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

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "asyncspade/attention.hpp"
#include "asyncspade/errors.hpp"
#include "asyncspade/flops.hpp"
#include "asyncspade/pipeline.hpp"
#include "asyncspade/trace_io.hpp"

namespace asyncspade::cli {

inline constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int { kOk = 0, kValidation = 2, kInfeasible = 3, kIo = 4 };

// ---------------------------------------------------------------------------
// Flag value parsing
// ---------------------------------------------------------------------------

/// Real number with an optional k, M or G suffix (powers of 1000).
inline double parse_si(const std::string& text) {
  std::string body = text;
  double scale = 1.0;
  if (!body.empty()) {
    switch (body.back()) {
      case 'k': scale = 1e3; break;
      case 'M': scale = 1e6; break;
      case 'G': scale = 1e9; break;
      default: break;
    }
    if (scale != 1.0) body.pop_back();
  }
  double v = 0.0;
  const char* first = body.data();
  const char* last = body.data() + body.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (body.empty() || ec != std::errc() || ptr != last || !std::isfinite(v * scale)) {
    throw ValidationError("cannot parse number '" + text + "'");
  }
  return v * scale;
}

/// Nonnegative integer with an optional SI suffix; the scaled value must be integral.
inline std::uint64_t parse_si_count(const std::string& text) {
  const double v = parse_si(text);
  if (v < 0.0 || v != std::floor(v) || v > 9.0e18) throw ValidationError("'" + text + "' is not a nonnegative integer");
  return static_cast<std::uint64_t>(v);
}

template <typename T>
std::vector<T> parse_list(const std::string& text, T (*one)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ValidationError("empty item in list '" + text + "'");
    out.push_back(one(item));
  }
  return out;
}

inline std::string pass_through(const std::string& s) { return s; }

/// Seed from the flag, else ASYNCSPADE_SEED, else 0.
inline std::uint64_t resolve_seed(const std::string& flag) {
  if (!flag.empty()) return parse_si_count(flag);
  if (const char* env = std::getenv("ASYNCSPADE_SEED"); env && *env) return parse_si_count(env);
  return 0;
}

inline std::size_t resolve_threads(std::size_t flag) {
  if (flag > 0) return flag;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = "asyncspade.manifest.v1";
    j["tool"] = "asyncspade";
    j["tool_version"] = kToolVersion;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
  }
};

inline void write_text(const std::string& path, const std::string& text) { detail::write_all(path, text); }

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct GenTraceOptions {
  std::string dims = "1,2,.,16";  // B,H,T,D; "." takes the step count
  std::uint64_t kv_heads = 0;     // 0 = same as H
  std::string steps = "8";
  std::uint64_t layers = 1;
  double alpha = 0.95;
  double sigma = 0.05;
  std::string seed;
  std::string out = "trace";
};

inline std::array<std::size_t, 4> parse_dims(const std::string& text, std::uint64_t steps) {
  auto parts = parse_list<std::string>(text, pass_through);
  if (parts.size() != 4) throw ValidationError("--dims needs four comma-separated sizes B,H,T,D");
  std::array<std::size_t, 4> d{};
  for (std::size_t i = 0; i < 4; ++i) d[i] = parts[i] == "." ? steps : parse_si_count(parts[i]);
  if (parts[2] != "." && d[2] != steps) throw ValidationError("--dims step count disagrees with --steps");
  return d;
}

/// Prefix of layer l's trace set; single-layer sets use the prefix as given.
inline std::string layer_prefix(const std::string& prefix, std::uint64_t layers, std::uint64_t l) {
  return layers == 1 ? prefix : prefix + ".layer" + std::to_string(l);
}

inline RunManifest cmd_gen_trace(const GenTraceOptions& o, std::ostream& out) {
  RunManifest man;
  man.command = "gen-trace";
  man.seed = resolve_seed(o.seed);
  const std::uint64_t steps = parse_si_count(o.steps);
  const auto d = parse_dims(o.dims, steps);
  const AttentionLayout layout{d[1], o.kv_heads ? o.kv_heads : d[1], d[3]};
  if (o.layers == 0) throw ValidationError("--layers must be positive");
  for (std::uint64_t l = 0; l < o.layers; ++l) {
    const std::uint64_t seed = o.layers == 1 ? man.seed : derive_seed(man.seed, l);
    DecodeTrace tr = generate_trace(layout, d[0], d[2], o.alpha, o.sigma, seed);
    const TracePaths paths = trace_paths(layer_prefix(o.out, o.layers, l));
    write_trace_set(paths, tr);
    man.outputs.insert(man.outputs.end(), {paths.query, paths.key, paths.value});
  }
  man.config = {{"batch", d[0]},        {"query_heads", layout.n_query_heads}, {"kv_heads", layout.n_kv_heads},
                {"steps", d[2]},        {"head_dim", d[3]},                    {"layers", o.layers},
                {"alpha", o.alpha},     {"sigma", o.sigma},                    {"out", o.out}};
  for (const auto& p : man.outputs) out << "wrote " << p << "\n";
  return man;
}

struct PredictEvalOptions {
  std::string trace;  // prefix of a trace set; empty = synthetic
  std::string dims = "1,4,.,64";
  std::uint64_t kv_heads = 0;
  std::string steps = "2550";
  double alpha = 0.95;
  double sigma = 0.05;
  std::string seed;
  std::string select = "256";
  std::uint64_t window = 16;
  std::string selectors = "oracle,assembled,single,unshifted,last,random";
  std::string distances = "1,2,4,8,16";
  std::string first_step = "2047";
  std::string eval_steps = "0";
  std::string aggregation = "max";
  std::size_t threads = 0;
  std::string out;
};

inline std::string format_overlap(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", x);
  return buf;
}

inline std::string overlap_csv(const OverlapReport& r) {
  std::string s = "# asyncspade.overlap.v1\nstep,selector,distance,overlap\n";
  for (const auto& row : r.rows) {
    s += std::to_string(row.step) + "," + row.selector + "," + std::to_string(row.distance) + "," +
         format_overlap(row.overlap) + "\n";
  }
  for (const auto& m : r.summary) {
    s += "mean," + m.selector + "," + std::to_string(m.distance) + "," + format_overlap(m.mean) + "\n";
  }
  return s;
}

inline RunManifest cmd_predict_eval(const PredictEvalOptions& o, std::ostream& out) {
  RunManifest man;
  man.command = "predict-eval";
  man.seed = resolve_seed(o.seed);
  DecodeTrace tr;
  if (!o.trace.empty()) {
    tr = read_trace_set(trace_paths(o.trace));
  } else {
    const auto d = parse_dims(o.dims, parse_si_count(o.steps));
    tr = generate_trace({d[1], o.kv_heads ? o.kv_heads : d[1], d[3]}, d[0], d[2], o.alpha, o.sigma, man.seed);
  }
  EvalOptions eo;
  eo.budget = parse_si_count(o.select);
  eo.distances = parse_list<std::uint64_t>(o.distances, parse_si_count);
  eo.first_step = parse_si_count(o.first_step);
  eo.steps = parse_si_count(o.eval_steps);
  eo.regression.window = o.window;
  eo.aggregation = o.aggregation == "sum" ? Aggregation::kSum : Aggregation::kMax;
  if (o.aggregation != "sum" && o.aggregation != "max") throw ValidationError("--aggregation must be max or sum");
  eo.threads = resolve_threads(o.threads);
  std::vector<SelectorKind> kinds;
  for (const auto& s : parse_list<std::string>(o.selectors, pass_through)) {
    kinds.push_back(SelectorKind::parse(s == "random" ? "random:" + std::to_string(man.seed) : s));
  }
  const OverlapReport report = evaluate_selectors(tr, kinds, eo);
  const std::string csv = overlap_csv(report);
  if (!o.out.empty()) {
    write_text(o.out, csv);
    man.outputs.push_back(o.out);
  }
  for (const auto& m : report.summary) {
    out << m.selector << " d=" << m.distance << " mean=" << format_overlap(m.mean) << " n=" << m.count << "\n";
  }
  man.config = {{"trace", o.trace.empty() ? "synthetic" : o.trace},
                {"batch", tr.batch},
                {"query_heads", tr.layout.n_query_heads},
                {"kv_heads", tr.layout.n_kv_heads},
                {"head_dim", tr.layout.head_dim},
                {"steps", tr.steps},
                {"alpha", o.trace.empty() ? nlohmann::ordered_json(o.alpha) : nlohmann::ordered_json()},
                {"sigma", o.trace.empty() ? nlohmann::ordered_json(o.sigma) : nlohmann::ordered_json()},
                {"select", eo.budget},
                {"window", eo.regression.window},
                {"selectors", o.selectors},
                {"distances", eo.distances},
                {"first_step", eo.first_step},
                {"eval_steps", eo.steps},
                {"aggregation", o.aggregation},
                {"threads", eo.threads}};
  return man;
}

struct SimulateOptions {
  std::string preset;
  std::string model = "qwen3-8b";
  std::string batch = "8";
  std::string context = "32k";
  std::string select = "2048";
  std::string pack = "6";
  std::string inference_latency;  // s per pack; empty = preset value or 7.13e-3
  std::string cache_latency;      // s per pack or "<r>x" of the inference latency; empty = preset value or 6.42e-3
  std::string launch = "0";
  std::string bandwidth;                      // bytes/s; empty = preset device or computed minimum
  std::uint64_t element_width = 4;
  std::string threshold = "32";
  std::string steps = "16";
  std::string stall_policy = "wait";
  bool live = false;
  std::string out;
};

inline std::uint64_t context_from(const std::string& s) {
  // Contexts read as binary sizes (32k = 32768), matching how model contexts are quoted.
  if (!s.empty() && s.back() == 'k') return parse_si_count(s.substr(0, s.size() - 1)) * 1024;
  return parse_si_count(s);
}

inline PipelineConfig resolve_pipeline(const SimulateOptions& o, const ScenarioPreset** preset_out = nullptr) {
  PipelineConfig c;
  const ScenarioPreset* preset = o.preset.empty() ? nullptr : &scenario_preset(o.preset);
  if (preset) {
    c = pipeline_config_from(*preset);
  } else {
    c.model = model_preset(o.model);
    c.batch = parse_si_count(o.batch);
    c.context = context_from(o.context);
    c.selected = parse_si_count(o.select);
    c.pack_size = parse_si_count(o.pack);
    c.latency.inference_latency_per_pack = 7.13e-3;
    c.latency.cache_latency_per_pack = 6.42e-3;
    c.latency.bandwidth = 0.0;
  }
  if (!o.inference_latency.empty()) c.latency.inference_latency_per_pack = parse_si(o.inference_latency);
  if (!o.cache_latency.empty()) {
    const std::string& cl = o.cache_latency;
    c.latency.cache_latency_per_pack = !cl.empty() && cl.back() == 'x'
                                           ? parse_si(cl.substr(0, cl.size() - 1)) * c.latency.inference_latency_per_pack
                                           : parse_si(cl);
  }
  c.latency.launch_overhead = parse_si(o.launch);
  c.latency.element_width = o.element_width;
  c.threshold = parse_si_count(o.threshold);
  c.steps = parse_si_count(o.steps);
  c.stall_policy = parse_stall_policy(o.stall_policy);
  if (!o.bandwidth.empty()) {
    c.latency.bandwidth = parse_si(o.bandwidth);
  } else if (!preset) {
    PipelineConfig probe = c;
    probe.latency.bandwidth = 1.0;
    c.latency.bandwidth = min_bandwidth(probe);
    if (!(c.latency.bandwidth > 0.0)) c.latency.bandwidth = 1e18;
  }
  if (preset_out) *preset_out = preset;
  return c;
}

inline nlohmann::ordered_json pipeline_json(const PipelineConfig& c) {
  return {{"model", c.model.name},
          {"layers", c.model.layers},
          {"batch", c.batch},
          {"context", c.context},
          {"select", c.selected},
          {"pack_size", c.pack_size},
          {"packs", c.pack_count()},
          {"threshold", c.threshold},
          {"steps", c.steps},
          {"inference_latency_per_pack", c.latency.inference_latency_per_pack},
          {"cache_latency_per_pack", c.latency.cache_latency_per_pack},
          {"launch_overhead", c.latency.launch_overhead},
          {"bandwidth", c.latency.bandwidth},
          {"element_width", c.latency.element_width},
          {"stall_policy", to_string(c.stall_policy)}};
}

inline RunManifest cmd_simulate(const SimulateOptions& o, std::ostream& out) {
  RunManifest man;
  man.command = "simulate";
  const PipelineConfig c = resolve_pipeline(o);
  c.validate();
  for (std::size_t p = 0; p < c.pack_count(); ++p) {
    if (c.latency.launch_overhead * 2.0 >= c.inference_latency(p) && c.inference_latency(p) > 0.0) {
      throw InfeasibleError("launch overhead " + std::to_string(c.latency.launch_overhead) +
                            " s is at least half the pack latency; the link can never keep up");
    }
  }
  const PipelineRun run = o.live ? run_live(c) : run_pipeline(c);
  const OverlapVerdict v = verify_overlap(run.timeline, c);
  if (!o.out.empty()) {
    write_text(o.out, timeline_to_json(run.timeline));
    man.outputs.push_back(o.out);
  }
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "TPOT %.6f ms (ideal %.6f ms)\nstall total %.6f ms\noverlap fraction %.6f\nbinding constraint %s\n",
                v.measured_tpot * 1e3, v.ideal_tpot * 1e3, v.stall_total * 1e3, run.timeline.metrics.overlap_fraction,
                v.fully_overlapped ? "none (fully overlapped)" : to_string(v.binding));
  out << buf;
  man.config = pipeline_json(c);
  man.config["preset"] = o.preset;
  man.config["mode"] = o.live ? "live" : "deterministic";
  return man;
}

struct FlopsOptions {
  std::string model = "qwen3-8b";
  std::string strategy = "asyncspade";
  std::string context = "32768";
  std::string select = "2048";
  std::string page = "16";
  bool all_strategies = false;
  std::string out;
};

inline RunManifest cmd_flops(const FlopsOptions& o, std::ostream& out) {
  RunManifest man;
  man.command = "flops";
  const ModelConfig m = model_preset(o.model);
  const std::uint64_t t = parse_si_count(o.context), sel = parse_si_count(o.select), p = parse_si_count(o.page);
  std::vector<FlopsRow> rows;
  if (o.all_strategies) {
    rows = flops_table(m, t, sel, p);
  } else {
    const StrategyConfig sc{parse_strategy(o.strategy), t, sel, p};
    rows.push_back({sc.kind, param_flops(m), attn_flops(m, sc), total_flops(m, sc)});
  }
  nlohmann::ordered_json j;
  j["schema"] = "asyncspade.flops.v1";
  j["model"] = m.name;
  j["context"] = t;
  j["select"] = sel;
  j["page_size"] = p;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"strategy", to_string(r.strategy)}, {"param", r.param}, {"attn", r.attn}, {"total", r.total}});
    out << to_string(r.strategy) << " param=" << r.param << " attn=" << r.attn << " total=" << r.total << "\n";
  }
  if (!o.out.empty()) {
    write_text(o.out, j.dump(2) + "\n");
    man.outputs.push_back(o.out);
  }
  man.config = {{"model", m.name}, {"strategy", o.all_strategies ? "all" : o.strategy},
                {"context", t},    {"select", sel},
                {"page_size", p}};
  return man;
}

struct BandwidthOptions {
  std::string preset;
  std::string model = "qwen3-8b";
  std::string batch = "8";
  std::string select = "2048";
  std::string pack = "6";
  std::uint64_t element_width = 4;
  std::string launch = "0";
  std::string inference_latency;  // empty = preset value or 7.13e-3
  std::string out;
};

inline RunManifest cmd_bandwidth(const BandwidthOptions& o, std::ostream& out) {
  RunManifest man;
  man.command = "bandwidth";
  SimulateOptions so;
  so.preset = o.preset;
  so.model = o.model;
  so.batch = o.batch;
  so.select = o.select;
  so.pack = o.pack;
  so.inference_latency = o.inference_latency;
  so.cache_latency = "0";
  so.launch = o.launch;
  so.bandwidth = "1";
  so.element_width = o.element_width;
  const ScenarioPreset* preset = nullptr;
  const PipelineConfig c = resolve_pipeline(so, &preset);
  const double bw = min_bandwidth(c);
  nlohmann::ordered_json j;
  j["schema"] = "asyncspade.bandwidth.v1";
  j["pack_bytes_to_cache"] = pack_bytes(c, 0);
  j["pack_bytes_to_inference"] = filtered_bytes(c, 0);
  j["min_bandwidth"] = bw;
  char buf[256];
  std::snprintf(buf, sizeof(buf), "pack bytes to cache rank     %llu\npack bytes to inference rank %llu\n"
                                  "minimal bandwidth            %.2f GB/s\n",
                static_cast<unsigned long long>(pack_bytes(c, 0)), static_cast<unsigned long long>(filtered_bytes(c, 0)),
                bw / 1e9);
  out << buf;
  if (preset) {
    const double delta = bw / 1e9 / preset->reference_gbps - 1.0;
    j["reference_gbps"] = preset->reference_gbps;
    j["relative_delta"] = delta;
    std::snprintf(buf, sizeof(buf), "reference                    %.2f GB/s (%+.1f%%)\n", preset->reference_gbps, delta * 100);
    out << buf;
  }
  if (!o.out.empty()) {
    write_text(o.out, j.dump(2) + "\n");
    man.outputs.push_back(o.out);
  }
  man.config = pipeline_json(c);
  man.config.erase("bandwidth");
  man.config["preset"] = o.preset;
  return man;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses `args` (without the program name), runs one subcommand, writes its manifest.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"AsyncSpade desk-scale toolkit", "asyncspade"};
  app.require_subcommand(1);
  std::string manifest_path;
  app.add_option("--manifest", manifest_path, "manifest path (default: <out>.manifest.json or asyncspade.manifest.json)");

  GenTraceOptions gt;
  auto* gen = app.add_subcommand("gen-trace", "write a synthetic AR(1) trace set");
  gen->add_option("--dims", gt.dims, "B,H,T,D (use . for T)");
  gen->add_option("--kv-heads", gt.kv_heads, "key/value heads (default H)");
  gen->add_option("--steps", gt.steps);
  gen->add_option("--layers", gt.layers);
  gen->add_option("--alpha", gt.alpha);
  gen->add_option("--sigma", gt.sigma);
  gen->add_option("--seed", gt.seed);
  gen->add_option("--out", gt.out, "output prefix");

  PredictEvalOptions pe;
  auto* pred = app.add_subcommand("predict-eval", "selection overlap of predictors and baselines");
  pred->add_option("--trace", pe.trace, "trace set prefix (omit for a synthetic trace)");
  pred->add_option("--dims", pe.dims);
  pred->add_option("--kv-heads", pe.kv_heads);
  pred->add_option("--steps", pe.steps);
  pred->add_option("--alpha", pe.alpha);
  pred->add_option("--sigma", pe.sigma);
  pred->add_option("--seed", pe.seed);
  pred->add_option("--select", pe.select, "tokens kept per head");
  pred->add_option("--window", pe.window);
  pred->add_option("--selectors", pe.selectors, "oracle,assembled,single,unshifted,last,page:P,random[:seed]");
  pred->add_option("--distances", pe.distances);
  pred->add_option("--first-step", pe.first_step);
  pred->add_option("--eval-steps", pe.eval_steps, "0 = to the end of the trace");
  pred->add_option("--aggregation", pe.aggregation, "max or sum");
  pred->add_option("--threads", pe.threads, "0 = available parallelism");
  pred->add_option("--out", pe.out, "CSV report path");

  SimulateOptions sm;
  auto* sim = app.add_subcommand("simulate", "run the two-rank pipeline");
  sim->add_option("--preset", sm.preset);
  sim->add_option("--model", sm.model);
  sim->add_option("--batch", sm.batch);
  sim->add_option("--context", sm.context);
  sim->add_option("--select", sm.select);
  sim->add_option("--pack", sm.pack, "layers per pack");
  sim->add_option("--inference-latency", sm.inference_latency, "seconds per pack");
  sim->add_option("--cache-latency", sm.cache_latency, "seconds per pack, or Nx of the inference latency");
  sim->add_option("--launch", sm.launch, "seconds per message");
  sim->add_option("--bandwidth", sm.bandwidth, "bytes/s per direction");
  sim->add_option("--element-width", sm.element_width);
  sim->add_option("--threshold", sm.threshold);
  sim->add_option("--steps", sm.steps, "sparse steps");
  sim->add_option("--stall-policy", sm.stall_policy, "wait or reuse-previous");
  sim->add_flag("--live", sm.live, "two real worker threads instead of the virtual clock");
  sim->add_option("--out", sm.out, "timeline JSON path");

  FlopsOptions fl;
  auto* flp = app.add_subcommand("flops", "per-token decoding FLOPs");
  flp->add_option("--model", fl.model);
  flp->add_option("--strategy", fl.strategy, "full, tova, quest or asyncspade");
  flp->add_option("-T,--context", fl.context);
  flp->add_option("-C,--select", fl.select);
  flp->add_option("-P,--page", fl.page);
  flp->add_flag("--all-strategies", fl.all_strategies);
  flp->add_option("--out", fl.out, "JSON path");

  BandwidthOptions bw;
  auto* bwc = app.add_subcommand("bandwidth", "minimal link bandwidth for full overlap");
  bwc->add_option("--preset", bw.preset);
  bwc->add_option("--model", bw.model);
  bwc->add_option("--batch", bw.batch);
  bwc->add_option("--select", bw.select);
  bwc->add_option("--pack", bw.pack);
  bwc->add_option("--element-width", bw.element_width);
  bwc->add_option("--launch", bw.launch);
  bwc->add_option("--inference-latency", bw.inference_latency);
  bwc->add_option("--out", bw.out, "JSON path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  const auto start = std::chrono::steady_clock::now();
  try {
    RunManifest man;
    std::string out_path;
    if (gen->parsed()) {
      man = cmd_gen_trace(gt, out);
      out_path = gt.out;
    } else if (pred->parsed()) {
      man = cmd_predict_eval(pe, out);
      out_path = pe.out;
    } else if (sim->parsed()) {
      man = cmd_simulate(sm, out);
      out_path = sm.out;
    } else if (flp->parsed()) {
      man = cmd_flops(fl, out);
      out_path = fl.out;
    } else {
      man = cmd_bandwidth(bw, out);
      out_path = bw.out;
    }
    man.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (manifest_path.empty()) manifest_path = out_path.empty() ? "asyncspade.manifest.json" : out_path + ".manifest.json";
    write_text(manifest_path, man.to_json().dump(2) + "\n");
    return kOk;
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const ParseError& e) {
    err << "parse error at byte " << e.byte_offset() << ": " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
}

}  // namespace asyncspade::cli
