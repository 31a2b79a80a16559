#pragma once

#include <stdexcept>
#include <string>

namespace pacr {

/// Error raised by library operations on contract violations or unrecoverable
/// pipeline failures. The message carries the failing stage/condition.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& message) {
    if (!cond) throw Error(message);
}

}  // namespace pacr
