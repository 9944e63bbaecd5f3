// Copyright (c) 2026 the bcssl authors. All rights reserved.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bcssl {

// Thrown when a user-supplied configuration value is rejected.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Thrown when a binary file does not match its declared layout.
struct parse_error : std::runtime_error {
  parse_error(const std::string& msg, uint64_t offset)
      : std::runtime_error("parse error at byte " + std::to_string(offset) + ": " + msg),
        byte_offset(offset) {}
  uint64_t byte_offset;
};

// Thrown when tensors disagree on shape or an op contract is violated.
struct shape_error : std::runtime_error {
  explicit shape_error(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Thrown when a computation produces non-finite values and cannot continue.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

namespace detail {

template <typename... Args>
std::string strf(const char* fmt, Args... args) {
  int n = std::snprintf(nullptr, 0, fmt, args...);
  std::string s(static_cast<size_t>(n), '\0');
  std::snprintf(s.data(), s.size() + 1, fmt, args...);
  return s;
}

}  // namespace detail

// Little-endian binary reader with offset tracking for parse errors.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw io_error("cannot open '" + path + "' for reading");
    in_.seekg(0, std::ios::end);
    size_ = static_cast<uint64_t>(in_.tellg());
    in_.seekg(0, std::ios::beg);
  }

  uint64_t offset() const { return offset_; }
  uint64_t size() const { return size_; }
  uint64_t remaining() const { return size_ - offset_; }

  void read_bytes(void* dst, uint64_t n, const char* what) {
    if (remaining() < n) {
      throw parse_error(detail::strf("truncated file: need %llu bytes for %s, have %llu",
                                     (unsigned long long)n, what, (unsigned long long)remaining()),
                        offset_);
    }
    in_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) throw io_error("read failure on '" + path_ + "'");
    offset_ += n;
  }

  uint8_t read_u8(const char* what) {
    uint8_t v;
    read_bytes(&v, 1, what);
    return v;
  }

  uint16_t read_u16(const char* what) {
    uint8_t b[2];
    read_bytes(b, 2, what);
    return (uint16_t)(b[0] | (b[1] << 8));
  }
  uint32_t read_u32(const char* what) {
    uint8_t b[4];
    read_bytes(b, 4, what);
    return (uint32_t)b[0] | (uint32_t)b[1] << 8 | (uint32_t)b[2] << 16 | (uint32_t)b[3] << 24;
  }
  uint64_t read_u64(const char* what) {
    uint8_t b[8];
    read_bytes(b, 8, what);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = v << 8 | b[i];
    return v;
  }
  float read_f32(const char* what) {
    uint32_t u = read_u32(what);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
  }
  double read_f64(const char* what) {
    uint64_t u = read_u64(what);
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }
  std::string read_str(const char* what) {
    uint32_t n = read_u32(what);
    if (n > (1u << 20)) throw parse_error(detail::strf("unreasonable string length %u for %s", n, what), offset_ - 4);
    std::string s(n, '\0');
    read_bytes(s.data(), n, what);
    return s;
  }
  void expect_magic(const char magic[4]) {
    char b[4];
    read_bytes(b, 4, "magic");
    if (std::memcmp(b, magic, 4) != 0) {
      throw parse_error(detail::strf("bad magic: expected '%.4s', got '%c%c%c%c'", magic,
                                     std::isprint((unsigned char)b[0]) ? b[0] : '?',
                                     std::isprint((unsigned char)b[1]) ? b[1] : '?',
                                     std::isprint((unsigned char)b[2]) ? b[2] : '?',
                                     std::isprint((unsigned char)b[3]) ? b[3] : '?'),
                        offset_ - 4);
    }
  }
  void expect_eof() {
    if (remaining() != 0) {
      throw parse_error(detail::strf("trailing garbage: %llu unread bytes", (unsigned long long)remaining()), offset_);
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
  uint64_t size_ = 0;
  uint64_t offset_ = 0;
};

// Little-endian binary writer.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw io_error("cannot open '" + path + "' for writing");
  }
  void write_bytes(const void* src, uint64_t n) {
    out_.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(n));
  }
  void write_u8(uint8_t v) { write_bytes(&v, 1); }
  void write_u16(uint16_t v) {
    uint8_t b[2] = {(uint8_t)(v), (uint8_t)(v >> 8)};
    write_bytes(b, 2);
  }
  void write_u32(uint32_t v) {
    uint8_t b[4] = {(uint8_t)(v), (uint8_t)(v >> 8), (uint8_t)(v >> 16), (uint8_t)(v >> 24)};
    write_bytes(b, 4);
  }
  void write_u64(uint64_t v) {
    uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = (uint8_t)(v >> (8 * i));
    write_bytes(b, 8);
  }
  void write_f32(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    write_u32(u);
  }
  void write_f64(double d) {
    uint64_t u;
    std::memcpy(&u, &d, 8);
    write_u64(u);
  }
  void write_str(std::string_view s) {
    write_u32(static_cast<uint32_t>(s.size()));
    write_bytes(s.data(), s.size());
  }
  void write_magic(const char magic[4]) { write_bytes(magic, 4); }
  void close() {
    out_.flush();
    if (!out_) throw io_error("write failure on '" + path_ + "'");
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

// FNV-1a over a byte sequence; used for config and file-content hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

}  // namespace bcssl
