// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>

namespace guardvec {

// Bad inputs: malformed files, inconsistent shapes, out-of-range options.
// The CLI maps this to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failures after inputs validated: I/O errors, unreachable endpoints,
// aborted runs. The CLI maps this to exit code 2.
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace guardvec
