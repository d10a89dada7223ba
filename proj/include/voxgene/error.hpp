#pragma once

#include <stdexcept>
#include <string>

namespace voxgene {

// Error taxonomy maps onto the CLI exit codes: config=2, input=3, numeric=4.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or contract violation inside the math stack.
struct dimension_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace voxgene
