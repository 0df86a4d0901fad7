#ifndef FDL_LOG_HPP
#define FDL_LOG_HPP

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>

namespace fdl::log {

enum class Level { error = 0, info = 1, debug = 2 };

inline Level parse_level(std::string_view s) {
  if (s == "error") return Level::error;
  if (s == "debug") return Level::debug;
  return Level::info;
}

// Read once from FDL_LOG_LEVEL; set_level() overrides.
inline Level& current_level() {
  static Level level = [] {
    const char* env = std::getenv("FDL_LOG_LEVEL");
    return env ? parse_level(env) : Level::info;
  }();
  return level;
}

inline void set_level(Level l) { current_level() = l; }

inline bool enabled(Level l) { return static_cast<int>(l) <= static_cast<int>(current_level()); }

template <typename... Args>
void write(Level l, const char* tag, Args&&... args) {
  if (!enabled(l)) return;
  std::ostringstream os;
  os << '[' << tag << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <typename... Args>
void error(Args&&... args) { write(Level::error, "error", std::forward<Args>(args)...); }
template <typename... Args>
void info(Args&&... args) { write(Level::info, "info", std::forward<Args>(args)...); }
template <typename... Args>
void debug(Args&&... args) { write(Level::debug, "debug", std::forward<Args>(args)...); }

}  // namespace fdl::log

#endif  // FDL_LOG_HPP
