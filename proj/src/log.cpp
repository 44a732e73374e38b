#include "trustmae/log.hpp"

#include <atomic>
#include <iostream>

namespace tmae {

namespace {
std::atomic<std::size_t> g_warnings{0};
std::atomic<bool> g_quiet{false};
}  // namespace

void log_warning(const std::string& msg) {
    ++g_warnings;
    if (!g_quiet) std::cerr << "warning: " << msg << '\n';
}

void log_info(const std::string& msg) {
    if (!g_quiet) std::cerr << msg << '\n';
}

std::size_t warning_count() { return g_warnings; }
void set_log_quiet(bool quiet) { g_quiet = quiet; }

}  // namespace tmae
