#pragma once

#include <charconv>
#include <string>

namespace tsteer {

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace tsteer
