#pragma once

#include <string_view>

// Thin logging facade. Kept free of fmt/spdlog headers: libtorch ships its own
// fmt, which cannot share a translation unit with the system spdlog.
namespace softennet::log {

enum class Level { debug, info, warn, error, off };

void set_level(Level level);
Level parse_level(std::string_view name);

void debug(std::string_view message);
void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace softennet::log
