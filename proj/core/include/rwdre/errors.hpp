#pragma once

#include <stdexcept>
#include <string>

namespace rwdre {

// Base for all library errors. Catch sites distinguish the four subclasses;
// anything else escaping the library is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: mismatched kinds, calls out of order, incompatible arguments.
class UsageError : public Error {
 public:
  using Error::Error;
};

// A parameter value outside its admissible range.
class ParamError : public Error {
 public:
  using Error::Error;
};

// An exact-exhaustion request whose state count exceeds the configured budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// A computation the library declines to perform because its result would not
// be trustworthy: divergent tail integrals, non-converged slopes, tori too
// small for the requested horizon. The message names the failed requirement.
class RefusalError : public Error {
 public:
  using Error::Error;
};

}  // namespace rwdre
