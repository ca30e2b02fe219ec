// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace surgvid::logging {

enum class Level { debug, info, warn };

void log(Level level, const std::string& msg);

inline void debug(const std::string& msg) { log(Level::debug, msg); }
inline void info(const std::string& msg) { log(Level::info, msg); }
inline void warn(const std::string& msg) { log(Level::warn, msg); }

// Minimum level echoed to stderr (default: info).
void set_stderr_level(Level level);

// When capture is on, messages are also appended to an in-memory buffer so
// tests can assert on logged events (EmptyHint, fallback masking, MLM skips).
void set_capture(bool on);
std::vector<std::string> captured();
void clear_captured();

}  // namespace surgvid::logging
