// SPDX-License-Identifier: Apache-2.0

#include "pixelpost/rng.hpp"

#include <cstdio>

namespace pixelpost {

std::string Rng::state_hex() const {
  char buf[4 * 16 + 1];
  char* p = buf;
  for (uint64_t w : state_) {
    std::snprintf(p, 17, "%016llx", static_cast<unsigned long long>(w));
    p += 16;
  }
  return std::string(buf, 64);
}

Rng Rng::from_state_hex(const std::string& hex) {
  if (hex.size() != 64) throw ValueError("rng state must be 64 hex chars, got " + hex);
  Rng rng;
  std::array<uint64_t, 4> s{};
  for (int i = 0; i < 4; ++i) {
    uint64_t w = 0;
    for (int j = 0; j < 16; ++j) {
      const char c = hex[static_cast<size_t>(i * 16 + j)];
      uint64_t d = 0;
      if (c >= '0' && c <= '9') {
        d = static_cast<uint64_t>(c - '0');
      } else if (c >= 'a' && c <= 'f') {
        d = static_cast<uint64_t>(c - 'a' + 10);
      } else {
        throw ValueError("rng state has non-hex character");
      }
      w = (w << 4) | d;
    }
    s[static_cast<size_t>(i)] = w;
  }
  rng.set_state(s);
  return rng;
}

}  // namespace pixelpost
