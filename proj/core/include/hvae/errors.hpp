#pragma once

#include <stdexcept>
#include <string>

namespace hvae {

// Error taxonomy shared with the CLI exit codes (config 2, data 3,
// numeric 4, io 5). Contract violations on in-process APIs (bad shapes,
// bad axes) throw std::invalid_argument instead.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hvae
