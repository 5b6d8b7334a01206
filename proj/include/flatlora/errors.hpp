/* Copyright 2026 The flatlora Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License. */
#pragma once

#include <stdexcept>
#include <string>

namespace flatlora {

/// Operand dimensions do not conform.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation (t = 0, tol >= 1).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Iterative routine failed, or a non-finite value appeared.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, long iterations = -1)
      : std::runtime_error(iterations < 0
                               ? what
                               : what + " after " + std::to_string(iterations) +
                                     " iterations"),
        iterations_(iterations) {}
  long iterations() const noexcept { return iterations_; }

 private:
  long iterations_;
};

/// Optimizer state disagrees with the network it is driving.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid experiment configuration; the message names the offending fields.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace flatlora
