// SPDX-License-Identifier: Apache-2.0
#include "surgvid/logging.hpp"

#include <iostream>
#include <mutex>

namespace surgvid::logging {

namespace {
Level g_stderr_level = Level::info;
bool g_capture = false;
std::vector<std::string> g_captured;
std::mutex g_mutex;

const char* prefix(Level level) {
  switch (level) {
    case Level::debug: return "[debug] ";
    case Level::info: return "[info] ";
    case Level::warn: return "[warn] ";
  }
  return "";
}
}  // namespace

void log(Level level, const std::string& msg) {
  std::lock_guard<std::mutex> lock(g_mutex);
  if (static_cast<int>(level) >= static_cast<int>(g_stderr_level)) {
    std::cerr << prefix(level) << msg << "\n";
  }
  if (g_capture) {
    g_captured.push_back(std::string(prefix(level)) + msg);
  }
}

void set_stderr_level(Level level) {
  std::lock_guard<std::mutex> lock(g_mutex);
  g_stderr_level = level;
}

void set_capture(bool on) {
  std::lock_guard<std::mutex> lock(g_mutex);
  g_capture = on;
  if (on) g_captured.clear();
}

std::vector<std::string> captured() {
  std::lock_guard<std::mutex> lock(g_mutex);
  return g_captured;
}

void clear_captured() {
  std::lock_guard<std::mutex> lock(g_mutex);
  g_captured.clear();
}

}  // namespace surgvid::logging
