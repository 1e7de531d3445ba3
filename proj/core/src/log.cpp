#include "cloak/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>

#include "cloak/errors.hpp"

namespace cloak {

namespace {

std::atomic<long> g_warnings{0};

spdlog::logger& logger() {
    static std::shared_ptr<spdlog::logger> instance = [] {
        auto l = spdlog::stderr_color_mt("cloak");
        l->set_pattern("[%H:%M:%S] %^%l%$ %v");
        l->set_level(spdlog::level::info);
        return l;
    }();
    return *instance;
}

}  // namespace

void set_log_level(LogLevel level) {
    static constexpr spdlog::level::level_enum map[] = {spdlog::level::debug, spdlog::level::info,
                                                       spdlog::level::warn, spdlog::level::err, spdlog::level::off};
    logger().set_level(map[static_cast<int>(level)]);
}

LogLevel log_level_from_string(const std::string& name) {
    if (name == "debug") return LogLevel::debug;
    if (name == "info") return LogLevel::info;
    if (name == "warn") return LogLevel::warn;
    if (name == "error") return LogLevel::error;
    if (name == "off") return LogLevel::off;
    throw ConfigError("unknown log level '" + name + "'");
}

void log_debug(const std::string& msg) { logger().debug(msg); }
void log_info(const std::string& msg) { logger().info(msg); }

void log_warn(const std::string& msg) {
    ++g_warnings;
    logger().warn(msg);
}

long warning_count() { return g_warnings.load(); }
void reset_warning_count() { g_warnings = 0; }

}  // namespace cloak
