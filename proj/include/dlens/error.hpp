#pragma once

#include <stdexcept>
#include <string>

namespace dlens {

// Bad user input: malformed files, invalid specs, out-of-range indices
// supplied from outside the library. The CLI maps it to exit code 2.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dlens
