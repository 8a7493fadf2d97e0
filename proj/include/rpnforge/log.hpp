// Copyright 2026 The rpnforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>
#include <string_view>

#include "rpnforge/error.hpp"

namespace rpnforge {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel parse_log_level(std::string_view s) {
  if (s == "error") return LogLevel::Error;
  if (s == "warn") return LogLevel::Warn;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  fail("unknown log level '", s, "' (expected error, warn, info or debug)");
}

// Read once from RPNFORGE_LOG; defaults to info.
inline LogLevel& log_threshold() {
  static LogLevel level = [] {
    const char* env = std::getenv("RPNFORGE_LOG");
    return env && *env ? parse_log_level(env) : LogLevel::Info;
  }();
  return level;
}

inline bool log_enabled(LogLevel level) { return static_cast<int>(level) <= static_cast<int>(log_threshold()); }

template <typename... Args>
void log(LogLevel level, const Args&... args) {
  if (!log_enabled(level)) return;
  static constexpr const char* kTags[] = {"error", "warn", "info", "debug"};
  std::ostringstream os;
  os << "[" << kTags[static_cast<int>(level)] << "] ";
  (os << ... << args);
  os << '\n';
  std::fputs(os.str().c_str(), stderr);
}

}  // namespace rpnforge
