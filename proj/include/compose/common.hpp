#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace compose {

using Scalar = double;
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Bad user input or malformed data (schema mismatch, shape mismatch, ...).
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// File-level problems: missing file, unreadable container, version mismatch.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Numerical abort (NaN loss etc.); carries the step index where it happened.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what, long step = -1)
        : std::runtime_error(what), step(step) {}
    long step;
};

// Thread cap: explicit argument > PRIOR_COMPOSE_THREADS env var > 1.
int resolve_threads(int requested = 0);

}  // namespace compose
