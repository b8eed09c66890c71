#pragma once

#include <iostream>
#include <string_view>

namespace selat {

enum class LogLevel { Quiet = 0, Warning = 1, Info = 2 };

inline LogLevel& log_level() {
  static LogLevel level = LogLevel::Warning;
  return level;
}

inline void log_warning(std::string_view msg) {
  if (log_level() >= LogLevel::Warning) std::cerr << "warning: " << msg << '\n';
}

inline void log_info(std::string_view msg) {
  if (log_level() >= LogLevel::Info) std::cerr << msg << '\n';
}

}  // namespace selat
