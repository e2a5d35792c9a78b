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

#include <cstdio>
#include <filesystem>
#include <string>

#include "asyncspade/trace_io.hpp"

namespace {

using namespace asyncspade;

std::string temp_prefix(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("asyncspade_test_" + name)).string();
}

TEST(TraceFile, EncodeHasHeaderLineAndExactBody) {
  DecodeTrace tr = generate_trace({2, 2, 16}, 1, 8, 0.95, 0.05, 3);
  const std::string bytes = encode_trace_file({TraceField::kQuery, tr.query, tr.meta});
  const std::size_t nl = bytes.find('\n');
  ASSERT_NE(nl, std::string::npos);
  EXPECT_EQ(bytes.size() - nl - 1, 4u * 1 * 2 * 8 * 16);
  auto h = nlohmann::json::parse(bytes.substr(0, nl));
  EXPECT_EQ(h["version"], 1);
  EXPECT_EQ(h["dtype"], "f32");
  EXPECT_EQ(h["layout"], "BHTD");
  EXPECT_EQ(h["dims"], nlohmann::json::array({1, 2, 8, 16}));
  EXPECT_EQ(h["field"], "query");
  EXPECT_EQ(h["seed"], 3);
}

TEST(TraceFile, BodyIsLittleEndianFloat32) {
  Tensor4 t({1, 1, 1, 2}, {1.0f, -2.5f});
  const std::string bytes = encode_trace_file({TraceField::kKey, t, {}});
  const std::string body = bytes.substr(bytes.find('\n') + 1);
  const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(static_cast<unsigned char>(body[i]), one[i]);
}

TEST(TraceFile, RoundTripIsBitExact) {
  DecodeTrace tr = generate_trace({4, 2, 8}, 2, 12, 0.9, 0.1, 5);
  const std::string prefix = temp_prefix("roundtrip");
  write_trace_set(trace_paths(prefix), tr);
  DecodeTrace back = read_trace_set(trace_paths(prefix));
  EXPECT_EQ(back.layout, tr.layout);
  EXPECT_EQ(back.query, tr.query);
  EXPECT_EQ(back.key, tr.key);
  EXPECT_EQ(back.value, tr.value);
  EXPECT_EQ(back.meta.seed, tr.meta.seed);
  EXPECT_EQ(back.meta.alpha, tr.meta.alpha);
  for (const auto& p : {trace_paths(prefix).query, trace_paths(prefix).key, trace_paths(prefix).value}) {
    std::remove(p.c_str());
  }
}

TEST(TraceFile, MalformedHeaderReportsOffset) {
  try {
    decode_trace_file("{\"version\": 1, \"dtype\" \"f32\"}\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), 27u);  // last byte of the unexpected token
  }
  try {
    decode_trace_file("{\"version\": 1}");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), 14u);
  }
}

TEST(TraceFile, RejectsWrongMetadata) {
  const std::string good = R"({"version":1,"dtype":"f32","layout":"BHTD","dims":[1,1,1,1],"field":"query"})";
  std::string body(4, '\0');
  EXPECT_NO_THROW(decode_trace_file(good + "\n" + body));
  for (const auto& [from, to] : std::vector<std::pair<std::string, std::string>>{
           {"\"version\":1", "\"version\":2"},
           {"f32", "f16"},
           {"BHTD", "BTHD"},
           {"[1,1,1,1]", "[1,1,1]"},
           {"\"query\"", "\"queries\""}}) {
    std::string bad = good;
    bad.replace(bad.find(from), from.size(), to);
    EXPECT_THROW(decode_trace_file(bad + "\n" + body), ParseError) << to;
  }
}

TEST(TraceFile, TruncatedBodyReportsWhereDataEnds) {
  const std::string header = R"({"version":1,"dtype":"f32","layout":"BHTD","dims":[1,1,2,1],"field":"key"})";
  try {
    decode_trace_file(header + "\n" + std::string(5, '\0'));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), header.size() + 1 + 5);
  }
}

TEST(TraceFile, MissingFileIsIoError) {
  EXPECT_THROW(read_trace_file("/nonexistent/dir/x.bin"), IoError);
  EXPECT_THROW(write_trace_file("/nonexistent/dir/x.bin", {}), IoError);
}

TEST(TraceFile, MismatchedSetIsRejected) {
  const std::string a = temp_prefix("set_a"), b = temp_prefix("set_b");
  DecodeTrace ta = generate_trace({2, 2, 8}, 1, 6, 0.9, 0.1, 1);
  DecodeTrace tb = generate_trace({2, 2, 8}, 1, 7, 0.9, 0.1, 1);
  write_trace_set(trace_paths(a), ta);
  write_trace_set(trace_paths(b), tb);
  TracePaths mixed{trace_paths(a).query, trace_paths(b).key, trace_paths(b).value};
  EXPECT_THROW(read_trace_set(mixed), ShapeError);
  TracePaths swapped{trace_paths(a).key, trace_paths(a).query, trace_paths(a).value};
  EXPECT_THROW(read_trace_set(swapped), ValidationError);
}

}  // namespace
