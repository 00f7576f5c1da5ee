#include "maskgan/core/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>

namespace maskgan::log {
namespace {

Level from_env() {
    const char* v = std::getenv("MASKGAN_LOG");
    if (!v) return Level::Info;
    const std::string s(v);
    if (s == "debug") return Level::Debug;
    if (s == "warn") return Level::Warn;
    if (s == "error") return Level::Error;
    if (s == "off") return Level::Off;
    return Level::Info;
}

std::atomic<int>& slot() {
    static std::atomic<int> level{static_cast<int>(from_env())};
    return level;
}

constexpr const char* kNames[] = {"debug", "info", "warn", "error"};

}  // namespace

Level threshold() { return static_cast<Level>(slot().load()); }
void set_threshold(Level level) { slot().store(static_cast<int>(level)); }

void write(Level level, std::string_view message) {
    if (level < threshold() || level == Level::Off) return;
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cerr << '[' << kNames[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace maskgan::log
