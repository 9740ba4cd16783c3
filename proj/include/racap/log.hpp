#pragma once

#include <cstdlib>
#include <memory>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace racap {

/// Process-wide logger writing to stderr. Verbosity comes from the
/// RACAP_LOG_LEVEL environment variable (trace, debug, info, warn, error, off).
inline spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto l = spdlog::stderr_color_mt("racap");
    l->set_pattern("[%l] %v");
    const char* env = std::getenv("RACAP_LOG_LEVEL");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
    return l;
  }();
  return *logger;
}

}  // namespace racap
