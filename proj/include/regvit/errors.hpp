#pragma once

#include <stdexcept>
#include <string>

namespace regvit {

// Every failure raised by the library carries a short machine-readable kind
// ("dimension", "numeric", ...) so the CLI can print one parseable line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define REGVIT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& message) : Error(tag, message) {}   \
  };

REGVIT_DEFINE_ERROR(DimensionError, "dimension")
REGVIT_DEFINE_ERROR(NumericError, "numeric")
REGVIT_DEFINE_ERROR(ContractError, "contract")
REGVIT_DEFINE_ERROR(ConfigError, "config")
REGVIT_DEFINE_ERROR(SpecError, "spec")
REGVIT_DEFINE_ERROR(CheckpointError, "checkpoint")
REGVIT_DEFINE_ERROR(IoError, "io")
REGVIT_DEFINE_ERROR(UsageError, "usage")
REGVIT_DEFINE_ERROR(DataError, "data")
REGVIT_DEFINE_ERROR(RangeError, "range")
REGVIT_DEFINE_ERROR(EmptyMaskError, "empty_mask")
REGVIT_DEFINE_ERROR(SingularError, "singular")

#undef REGVIT_DEFINE_ERROR

// Raised when training produces a non-finite loss. The run directory still
// holds the last good checkpoint, whose path is carried here.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& message, std::string last_good)
      : Error("divergence", message), last_good_(std::move(last_good)) {}

  const std::string& last_good_checkpoint() const noexcept { return last_good_; }

 private:
  std::string last_good_;
};

}  // namespace regvit
