#pragma once

#include <stdexcept>
#include <string>

namespace pallex {

// Base class for every domain error raised by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pallex
