#include "fdl/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <stdexcept>

namespace fdl::log {

spdlog::level::level_enum parse_level(const std::string& name) {
  if (name == "error") return spdlog::level::err;
  if (name == "warn") return spdlog::level::warn;
  if (name == "info") return spdlog::level::info;
  if (name == "debug") return spdlog::level::debug;
  throw std::invalid_argument("FDL_LOG_LEVEL must be one of error, warn, info, debug (got '" + name + "')");
}

void init_from_env() {
  auto logger = spdlog::stderr_color_mt("fdl");
  logger->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_default_logger(logger);
  const char* level = std::getenv("FDL_LOG_LEVEL");
  spdlog::set_level(level != nullptr && *level != '\0' ? parse_level(level) : spdlog::level::info);
}

}  // namespace fdl::log
