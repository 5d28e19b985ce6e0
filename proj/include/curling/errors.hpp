#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace curling {

enum class ErrorKind {
  kLoad,
  kIntegrity,
  kSchema,
  kData,
  kShape,
  kNumerics,
  kFormat,
  kNotFound,
  kUsage,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

#define CURLING_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

CURLING_DEFINE_ERROR(LoadError, kLoad)
CURLING_DEFINE_ERROR(IntegrityError, kIntegrity)
CURLING_DEFINE_ERROR(SchemaError, kSchema)
CURLING_DEFINE_ERROR(DataError, kData)
CURLING_DEFINE_ERROR(ShapeError, kShape)
CURLING_DEFINE_ERROR(NumericsError, kNumerics)
CURLING_DEFINE_ERROR(FormatError, kFormat)
CURLING_DEFINE_ERROR(NotFoundError, kNotFound)
CURLING_DEFINE_ERROR(UsageError, kUsage)

#undef CURLING_DEFINE_ERROR

}  // namespace curling
