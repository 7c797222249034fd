#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace r3 {

// Little-endian binary IO helpers shared by the checkpoint and feature-file
// containers. Byte order is explicit so files are portable across hosts.

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("format error: truncated file (expected u32)");
  }
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw std::runtime_error("format error: truncated file (expected u64)");
  }
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_string(std::istream& is) {
  uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) {
    throw std::runtime_error("format error: truncated file (expected string)");
  }
  return s;
}

inline void write_f64_vec(std::ostream& os, const std::vector<double>& v) {
  for (double x : v) write_f64(os, x);
}

inline void read_f64_vec(std::istream& is, std::vector<double>& v, size_t n) {
  v.resize(n);
  for (size_t i = 0; i < n; ++i) v[i] = read_f64(is);
}

}  // namespace r3
