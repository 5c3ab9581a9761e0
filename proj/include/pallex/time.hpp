#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>

namespace pallex {

// Times and durations are integer microseconds internally; file formats and
// the CLI report milliseconds.
using micros_t = std::int64_t;

inline micros_t ms_to_us(double ms) { return static_cast<micros_t>(std::llround(ms * 1000.0)); }

inline double us_to_ms(micros_t us) { return static_cast<double>(us) / 1000.0; }

// Renders microseconds as a millisecond value with trailing zeros trimmed,
// e.g. 810000 -> "810", 810500 -> "810.5", 75 -> "0.075".
inline std::string format_ms(micros_t us) {
    const bool neg = us < 0;
    if (neg) us = -us;
    const micros_t whole = us / 1000;
    const micros_t frac = us % 1000;
    std::string out = neg ? "-" : "";
    out += std::to_string(whole);
    if (frac != 0) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%03lld", static_cast<long long>(frac));
        std::string digits(buf);
        while (!digits.empty() && digits.back() == '0') digits.pop_back();
        out += '.';
        out += digits;
    }
    return out;
}

}  // namespace pallex
