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

#include "asyncspade/attention.hpp"
#include "asyncspade/errors.hpp"
#include "asyncspade/flops.hpp"
#include "asyncspade/kv_selection.hpp"
#include "asyncspade/linalg.hpp"
#include "asyncspade/pipeline.hpp"
#include "asyncspade/query_predictor.hpp"
#include "asyncspade/random.hpp"
#include "asyncspade/trace_io.hpp"
