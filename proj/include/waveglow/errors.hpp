#pragma once

#include <stdexcept>
#include <string>

namespace waveglow {

// Failure taxonomy. The CLI maps these onto its exit codes:
// usage/config errors -> 1, data/format/numeric errors -> 2.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace waveglow
