// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace oofkd {

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration (bad config file, unknown option values).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace oofkd
