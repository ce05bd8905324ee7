#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace dtrak {

/// Incremental FNV-1a 64; used for provenance digests, not for security.
class Digest {
 public:
  Digest& bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001B3ULL;
    }
    return *this;
  }
  Digest& text(std::string_view s) {
    u64(s.size());
    return bytes(s.data(), s.size());
  }
  Digest& u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    return bytes(b, 8);
  }
  Digest& f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    return u64(bits);
  }
  Digest& f64s(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
    return *this;
  }

  std::uint64_t value() const { return h_; }

  std::string hex() const {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 0; i < 16; ++i) s[15 - i] = kHex[(h_ >> (4 * i)) & 0xF];
    return s;
  }

 private:
  std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

}  // namespace dtrak
