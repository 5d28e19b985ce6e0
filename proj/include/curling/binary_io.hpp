#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "curling/errors.hpp"

namespace curling::io {

// Little-endian primitives. The supported hosts are little-endian, so values
// are written as their in-memory bytes.

inline void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& in, void* data, std::size_t n, const char* what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError(std::string("truncated file while reading ") + what);
}

inline void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, sizeof v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, sizeof v); }

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  std::uint32_t v = 0;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
  std::uint64_t v = 0;
  read_bytes(in, &v, sizeof v, what);
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  write_bytes(out, s.data(), s.size());
}

inline std::string read_string(std::istream& in, const char* what, std::size_t limit = 1u << 30) {
  const std::uint32_t n = read_u32(in, what);
  if (n > limit) throw FormatError(std::string("implausible string length while reading ") + what);
  std::string s(n, '\0');
  read_bytes(in, s.data(), n, what);
  return s;
}

inline void expect_magic(std::istream& in, const std::string& magic, const char* what) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (static_cast<std::size_t>(in.gcount()) != got.size() || got != magic)
    throw FormatError(std::string("bad magic in ") + what + " (expected " + magic + ")");
}

// 64-bit FNV-1a, used for content fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

}  // namespace curling::io
