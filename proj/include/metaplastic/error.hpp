#pragma once

#include <stdexcept>
#include <string>

namespace metaplastic {

// Invalid parameters or configuration values. Maps to CLI exit status 1.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Mismatched tensor/vector dimensions.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// NaN/Inf encountered during training or in an update.
struct NumericalFault : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or unreadable IDX / cache files.
struct IngestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Not enough source digits to satisfy a composition request.
struct CompositionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace metaplastic
