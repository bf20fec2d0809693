// Copyright 2026 The segtransvae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef STV_ERRORS_HPP_
#define STV_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace stv {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible or invalid tensor shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid model/training configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// Value outside an operation's mathematical domain (e.g. log of <= 0).
struct DomainError : Error {
  using Error::Error;
};

/// API contract violation (non-scalar loss, non-deterministic probe, ...).
struct ContractError : Error {
  using Error::Error;
};

/// Malformed file content; messages carry the byte offset of the defect.
struct FormatError : Error {
  using Error::Error;
};

/// Non-finite loss or gradient encountered during optimization.
struct DivergenceError : Error {
  using Error::Error;
};

}  // namespace stv

#endif  // STV_ERRORS_HPP_
