#pragma once

// Little-endian binary primitives shared by dataset records and checkpoints,
// plus small filesystem helpers. All writers are deterministic: identical
// inputs produce identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "hvcp/core.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace hvcp::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("io: write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw IoError("io: truncated while reading " + what);
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_bytes(os, &v, 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_bytes(os, &v, 8); }
inline void write_f64(std::ostream& os, double v) { write_bytes(os, &v, 8); }

inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v;
  read_bytes(is, &v, 4, what);
  return v;
}
inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v;
  read_bytes(is, &v, 8, what);
  return v;
}
inline double read_f64(std::istream& is, const std::string& what) {
  double v;
  read_bytes(is, &v, 8, what);
  return v;
}

inline void write_f64_array(std::ostream& os, const std::vector<double>& v) {
  write_u64(os, v.size());
  if (!v.empty()) write_bytes(os, v.data(), v.size() * sizeof(double));
}

inline std::vector<double> read_f64_array(std::istream& is, const std::string& what,
                                          std::uint64_t max_len = (1ull << 32)) {
  std::uint64_t n = read_u64(is, what + " length");
  if (n > max_len) throw IoError("io: implausible array length for " + what);
  std::vector<double> v(n);
  if (n) read_bytes(is, v.data(), n * sizeof(double), what);
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  if (!s.empty()) write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, const std::string& what,
                               std::uint64_t max_len = (1ull << 28)) {
  std::uint64_t n = read_u64(is, what + " length");
  if (n > max_len) throw IoError("io: implausible string length for " + what);
  std::string s(n, '\0');
  if (n) read_bytes(is, s.data(), n, what);
  return s;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("io: cannot open " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("io: cannot create " + path.string());
  os << text;
  if (!os) throw IoError("io: write failed for " + path.string());
}

}  // namespace hvcp::io
