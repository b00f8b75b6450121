#pragma once

#include <stdexcept>
#include <string>

namespace msclr {

// Base for everything thrown by this library.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid skeleton topology: bad indices, disconnected body, non-involutive swap map.
struct topology_error : error {
    using error::error;
};

// Array shape / convention mismatch between caller data and the expected layout.
struct shape_error : error {
    using error::error;
};

// File-level problems: bad magic, truncation, missing files, unwritable paths.
struct io_error : error {
    using error::error;
};

// Run-configuration validation failures (bad keys, unknown formats, bad ranges).
struct config_error : error {
    using error::error;
};

// Non-finite values where the training loop requires finite ones.
struct numeric_error : error {
    using error::error;
};

}  // namespace msclr
