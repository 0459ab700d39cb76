#pragma once

#include <atomic>
#include <iostream>
#include <sstream>
#include <string_view>

namespace stylebrush::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

inline std::atomic<Level>& threshold() {
    static std::atomic<Level> level{Level::info};
    return level;
}

inline void set_level(Level level) { threshold().store(level); }

inline void write(Level level, std::string_view message) {
    if (level < threshold().load()) return;
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::clog << "[" << names[static_cast<int>(level)] << "] " << message << '\n';
}

template <class... Args>
void emit(Level level, const Args&... args) {
    if (level < threshold().load()) return;
    std::ostringstream os;
    (os << ... << args);
    write(level, os.str());
}

template <class... Args> void debug(const Args&... args) { emit(Level::debug, args...); }
template <class... Args> void info(const Args&... args) { emit(Level::info, args...); }
template <class... Args> void warn(const Args&... args) { emit(Level::warn, args...); }
template <class... Args> void error(const Args&... args) { emit(Level::error, args...); }

}  // namespace stylebrush::log
