#pragma once

#include <cstddef>
#include <string>

namespace tmae {

// Diagnostics go to stderr unless silenced; the count is kept regardless.
void log_warning(const std::string& msg);
void log_info(const std::string& msg);
std::size_t warning_count();
void set_log_quiet(bool quiet);

}  // namespace tmae
