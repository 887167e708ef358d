#pragma once

#include <stdexcept>
#include <string>

namespace sfid {

// Base for every error the toolkit raises. `kind()` is the machine-readable
// class name printed by the CLI.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept = 0;
};

#define SFID_DEFINE_ERROR(Name)                                  \
  class Name : public Error {                                    \
   public:                                                       \
    using Error::Error;                                          \
    const char* kind() const noexcept override { return #Name; } \
  }

SFID_DEFINE_ERROR(FormatError);
SFID_DEFINE_ERROR(DataError);
SFID_DEFINE_ERROR(IoError);
SFID_DEFINE_ERROR(ConfigError);
SFID_DEFINE_ERROR(EmptyConfidenceSet);
SFID_DEFINE_ERROR(TrainingError);

#undef SFID_DEFINE_ERROR

}  // namespace sfid
