#pragma once

#include <spdlog/spdlog.h>

#include <string>

namespace fdl::log {

// error, warn, info or debug; throws std::invalid_argument otherwise.
spdlog::level::level_enum parse_level(const std::string& name);

// Installs a stderr logger at the level named by FDL_LOG_LEVEL (default info).
void init_from_env();

}  // namespace fdl::log
