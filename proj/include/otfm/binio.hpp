#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "otfm/common.hpp"

// Little-endian byte (de)serialization into an in-memory buffer, independent
// of host endianness. Floats travel as their IEEE-754 bit patterns.

namespace otfm::io {

inline void put_u8(std::string& b, std::uint8_t v) { b.push_back(char(v)); }

inline void put_u16(std::string& b, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::string& b, std::int32_t v) { put_u32(b, std::uint32_t(v)); }
inline void put_i64(std::string& b, std::int64_t v) { put_u64(b, std::uint64_t(v)); }

inline void put_f32(std::string& b, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(b, u);
}

inline void put_f64(std::string& b, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  put_u64(b, u);
}

inline void put_str(std::string& b, const std::string& s) {
  put_u64(b, s.size());
  b.append(s);
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  std::uint8_t get_u8() {
    need(1);
    return std::uint8_t(buf_[pos_++]);
  }

  std::uint16_t get_u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(std::uint8_t(buf_[pos_++])) << (8 * i);
    return v;
  }

  std::uint32_t get_u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf_[pos_++])) << (8 * i);
    return v;
  }

  std::uint64_t get_u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf_[pos_++])) << (8 * i);
    return v;
  }

  std::int32_t get_i32() { return std::int32_t(get_u32()); }
  std::int64_t get_i64() { return std::int64_t(get_u64()); }

  float get_f32() {
    const std::uint32_t u = get_u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }

  double get_f64() {
    const std::uint64_t u = get_u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }

  std::string get_str() {
    const std::uint64_t n = get_u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw DataError("binary payload truncated");
  }

  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace otfm::io
