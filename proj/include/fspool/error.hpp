#pragma once

#include <stdexcept>
#include <string>

namespace fspool {

// Base for all library errors. Subclasses map onto the CLI exit codes:
// format errors -> 3, config/usage errors -> 2, everything else -> 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Incompatible tensor/parameter shapes. Message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range label or model index.
struct IndexError : Error {
    using Error::Error;
};

// Violated operation contract (non-scalar loss, empty input, ...).
struct ContractError : Error {
    using Error::Error;
};

// Two forward passes of a supposedly deterministic function disagreed.
struct DeterminismError : Error {
    using Error::Error;
};

// Not enough classes or examples to sample what was requested.
struct CapacityError : Error {
    using Error::Error;
};

// Malformed file contents. Message carries the byte offset.
struct FormatError : Error {
    using Error::Error;
};

// Bad configuration value, unknown key, or command misuse.
struct ConfigError : Error {
    using Error::Error;
};

// Training stages invoked out of order.
struct PipelineError : Error {
    using Error::Error;
};

// Unseen-domain evaluation requested for a domain the checkpoint trained on.
struct ProtocolError : Error {
    using Error::Error;
};

// Training loss became non-finite. Message carries the step index.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace fspool
