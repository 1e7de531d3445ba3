#pragma once

#include <string>

namespace cloak {

enum class LogLevel { debug, info, warn, error, off };

void set_log_level(LogLevel level);
LogLevel log_level_from_string(const std::string& name);

void log_debug(const std::string& msg);
void log_info(const std::string& msg);
void log_warn(const std::string& msg);

// Warnings emitted since process start (or the last reset), including
// suppressed ones.
long warning_count();
void reset_warning_count();

}  // namespace cloak
