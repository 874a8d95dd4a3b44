#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

namespace keyread {

// Level from KEYREAD_LOG (error | info | debug); unset means info.
inline spdlog::level::level_enum log_level_from_env() {
  const char* v = std::getenv("KEYREAD_LOG");
  if (!v) return spdlog::level::info;
  const std::string s(v);
  if (s == "error") return spdlog::level::err;
  if (s == "debug") return spdlog::level::debug;
  return spdlog::level::info;
}

inline spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_logger_st("keyread");
    l->set_pattern("[%H:%M:%S] %^%l%$ %v");
    l->set_level(log_level_from_env());
    return l;
  }();
  return *logger;
}

}  // namespace keyread
