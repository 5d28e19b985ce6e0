#include "curling/errors.hpp"

#include <cstdio>

#include "curling/binary_io.hpp"

namespace curling {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kLoad:
      return "load_error";
    case ErrorKind::kIntegrity:
      return "integrity_error";
    case ErrorKind::kSchema:
      return "schema_error";
    case ErrorKind::kData:
      return "data_error";
    case ErrorKind::kShape:
      return "shape_error";
    case ErrorKind::kNumerics:
      return "numerics_error";
    case ErrorKind::kFormat:
      return "format_error";
    case ErrorKind::kNotFound:
      return "not_found";
    case ErrorKind::kUsage:
      return "usage_error";
  }
  return "error";
}

namespace io {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace io

}  // namespace curling
