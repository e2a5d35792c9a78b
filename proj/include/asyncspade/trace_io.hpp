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
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "asyncspade/attention.hpp"
#include "asyncspade/errors.hpp"
#include "asyncspade/linalg.hpp"

namespace asyncspade {

// Binary tensor file: one JSON header line, then B*H*T*D little-endian f32 values in BHTD order.

enum class TraceField { kQuery, kKey, kValue };

inline const char* to_string(TraceField f) {
  switch (f) {
    case TraceField::kQuery: return "query";
    case TraceField::kKey: return "key";
    case TraceField::kValue: return "value";
  }
  return "?";
}

struct TraceFile {
  TraceField field = TraceField::kQuery;
  Tensor4 tensor;
  TraceMetadata meta;
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    return ((x & 0xffu) << 24) | ((x & 0xff00u) << 8) | ((x >> 8) & 0xff00u) | (x >> 24);
  }
}

inline std::string read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path + "'");
  return bytes;
}

inline void write_all(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

inline std::string encode_trace_file(const TraceFile& f) {
  nlohmann::ordered_json h;
  h["version"] = 1;
  h["dtype"] = "f32";
  h["layout"] = "BHTD";
  h["dims"] = f.tensor.dims;
  h["field"] = to_string(f.field);
  if (f.meta.seed) h["seed"] = *f.meta.seed;
  if (f.meta.alpha) h["alpha"] = *f.meta.alpha;
  if (f.meta.sigma) h["sigma"] = *f.meta.sigma;
  std::string out = h.dump();
  out += '\n';
  const std::size_t header = out.size();
  out.resize(header + 4 * f.tensor.data.size());
  char* body = out.data() + header;
  for (std::size_t i = 0; i < f.tensor.data.size(); ++i) {
    const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(f.tensor.data[i]));
    std::memcpy(body + 4 * i, &bits, 4);
  }
  return out;
}

inline TraceFile decode_trace_file(std::string_view bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos) throw ParseError("trace header: missing newline terminator", bytes.size());
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("trace header: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  auto bad = [&](const std::string& why) { return ParseError("trace header: " + why, 0); };
  if (!h.is_object()) throw bad("not a JSON object");
  if (h.value("version", 0) != 1) throw bad("unsupported version");
  if (h.value("dtype", "") != "f32") throw bad("dtype must be f32");
  if (h.value("layout", "") != "BHTD") throw bad("layout must be BHTD");
  if (!h.contains("dims") || !h["dims"].is_array() || h["dims"].size() != 4) throw bad("dims must list 4 sizes");
  TraceFile f;
  std::array<std::size_t, 4> dims{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!h["dims"][i].is_number_unsigned()) throw bad("dims must be nonnegative integers");
    dims[i] = h["dims"][i].get<std::size_t>();
  }
  const std::string field = h.value("field", "");
  if (field == "query") f.field = TraceField::kQuery;
  else if (field == "key") f.field = TraceField::kKey;
  else if (field == "value") f.field = TraceField::kValue;
  else throw bad("field must be query, key or value");
  if (h.contains("seed")) f.meta.seed = h["seed"].get<std::uint64_t>();
  if (h.contains("alpha")) f.meta.alpha = h["alpha"].get<double>();
  if (h.contains("sigma")) f.meta.sigma = h["sigma"].get<double>();
  f.meta.source = "file";

  const std::size_t count = dims[0] * dims[1] * dims[2] * dims[3];
  const std::size_t body = bytes.size() - nl - 1;
  if (body != 4 * count) {
    throw ParseError("trace body: expected " + std::to_string(4 * count) + " bytes, found " + std::to_string(body),
                     nl + 1 + std::min(body, 4 * count));
  }
  std::vector<float> values(count);
  const char* src = bytes.data() + nl + 1;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, src + 4 * i, 4);
    values[i] = std::bit_cast<float>(detail::to_little(bits));
  }
  f.tensor = Tensor4(dims, std::move(values));
  return f;
}

inline void write_trace_file(const std::string& path, const TraceFile& f) { detail::write_all(path, encode_trace_file(f)); }

inline TraceFile read_trace_file(const std::string& path) {
  const std::string bytes = detail::read_all(path);
  try {
    return decode_trace_file(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.byte_offset());
  }
}

struct TracePaths {
  std::string query;
  std::string key;
  std::string value;
};

/// `<prefix>.query.bin`, `<prefix>.key.bin`, `<prefix>.value.bin`.
inline TracePaths trace_paths(const std::string& prefix) {
  return {prefix + ".query.bin", prefix + ".key.bin", prefix + ".value.bin"};
}

inline void write_trace_set(const TracePaths& paths, const DecodeTrace& tr) {
  write_trace_file(paths.query, {TraceField::kQuery, tr.query, tr.meta});
  write_trace_file(paths.key, {TraceField::kKey, tr.key, tr.meta});
  write_trace_file(paths.value, {TraceField::kValue, tr.value, tr.meta});
}

inline DecodeTrace read_trace_set(const TracePaths& paths) {
  TraceFile q = read_trace_file(paths.query);
  TraceFile k = read_trace_file(paths.key);
  TraceFile v = read_trace_file(paths.value);
  if (q.field != TraceField::kQuery || k.field != TraceField::kKey || v.field != TraceField::kValue) {
    throw ValidationError("trace set: files carry the wrong field names");
  }
  const auto& qd = q.tensor.dims;
  const auto& kd = k.tensor.dims;
  if (kd != v.tensor.dims || qd[0] != kd[0] || qd[2] != kd[2] || qd[3] != kd[3]) {
    throw ShapeError("trace set: query/key/value dims disagree");
  }
  DecodeTrace tr;
  tr.layout = {qd[1], kd[1], qd[3]};
  tr.batch = qd[0];
  tr.steps = qd[2];
  tr.query = std::move(q.tensor);
  tr.key = std::move(k.tensor);
  tr.value = std::move(v.tensor);
  tr.meta = q.meta;
  tr.validate();
  return tr;
}

}  // namespace asyncspade
