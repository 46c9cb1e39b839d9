#pragma once

#include <stdexcept>
#include <string>

namespace mmfs {

// Every failure raised by the library derives from Error so the CLI can print
// a single machine-parseable line of the form "<kind>: <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define MMFS_DEFINE_ERROR(Name)                                         \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& message) : Error(#Name, message) {} \
  };

MMFS_DEFINE_ERROR(FormatError)
MMFS_DEFINE_ERROR(ShapeError)
MMFS_DEFINE_ERROR(EmptyItemError)
MMFS_DEFINE_ERROR(ArgumentError)
MMFS_DEFINE_ERROR(DegenerateVectorError)
MMFS_DEFINE_ERROR(ContaminationError)
MMFS_DEFINE_ERROR(StateError)
MMFS_DEFINE_ERROR(NoNegativeError)
MMFS_DEFINE_ERROR(IoError)
MMFS_DEFINE_ERROR(ConfigError)

#undef MMFS_DEFINE_ERROR

}  // namespace mmfs
