/* Copyright 2026 The MoE Overlap Simulator Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef MOESIM_ERRORS_H_
#define MOESIM_ERRORS_H_

#include <stdexcept>
#include <string>

namespace moesim {

// Invalid or inconsistent configuration. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The requested token-distribution skew cannot be produced for (E, topk).
class InfeasibleStdError : public ConfigError {
 public:
  InfeasibleStdError(double requested, double achievable_max);

  double requested() const { return requested_; }
  double achievable_max() const { return achievable_max_; }

 private:
  double requested_;
  double achievable_max_;
};

// Runtime split selection found no profiled record compatible with a query.
class UnprofiledConfigError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// A schedule handed to an executor or simulator did not validate.
class InvalidScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace moesim

#endif  // MOESIM_ERRORS_H_
