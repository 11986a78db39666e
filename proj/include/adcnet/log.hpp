#pragma once

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace adcnet {

// Shared stderr logger; level comes from ADCNET_LOG (trace, debug, info, warn, error, off).
inline spdlog::logger& log() {
  static auto logger = [] {
    auto l = spdlog::stderr_color_mt("adcnet");
    l->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    const char* env = std::getenv("ADCNET_LOG");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
    return l;
  }();
  return *logger;
}

}  // namespace adcnet
