#pragma once

// Leveled stderr logging; the threshold comes from ONIX4D_LOG
// (error, warn, info, debug; default info).

#include <cstdio>
#include <cstdlib>
#include <string>
#include <string_view>

namespace onix {

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

inline LogLevel parse_log_level(std::string_view s, LogLevel fallback = LogLevel::Info) {
  if (s == "error" || s == "0") return LogLevel::Error;
  if (s == "warn" || s == "warning" || s == "1") return LogLevel::Warn;
  if (s == "info" || s == "2") return LogLevel::Info;
  if (s == "debug" || s == "3") return LogLevel::Debug;
  return fallback;
}

class Logger {
 public:
  explicit Logger(LogLevel level) : level_(level) {}

  static Logger from_env() {
    const char* v = std::getenv("ONIX4D_LOG");
    return Logger(v ? parse_log_level(v) : LogLevel::Info);
  }

  LogLevel level() const { return level_; }
  bool enabled(LogLevel l) const { return static_cast<int>(l) <= static_cast<int>(level_); }

  void log(LogLevel l, const std::string& msg) const {
    if (!enabled(l)) return;
    static constexpr const char* names[] = {"error", "warn", "info", "debug"};
    std::fprintf(stderr, "[onix4d %s] %s\n", names[static_cast<int>(l)], msg.c_str());
  }
  void error(const std::string& m) const { log(LogLevel::Error, m); }
  void warn(const std::string& m) const { log(LogLevel::Warn, m); }
  void info(const std::string& m) const { log(LogLevel::Info, m); }
  void debug(const std::string& m) const { log(LogLevel::Debug, m); }

 private:
  LogLevel level_;
};

}  // namespace onix
