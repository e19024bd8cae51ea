#ifndef PREVCURVE_DIGEST_HPP
#define PREVCURVE_DIGEST_HPP

#include <openssl/evp.h>

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

#include "prevcurve/error.hpp"

namespace prevcurve {

using Sha256Digest = std::array<std::uint8_t, 32>;

/// Incremental SHA-256 over byte ranges.
class Sha256 {
public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256: init failed");
    }
  }

  Sha256& update(const void* data, std::size_t size) {
    if (size > 0 && EVP_DigestUpdate(ctx_.get(), data, size) != 1) {
      throw std::runtime_error("sha256: update failed");
    }
    return *this;
  }

  Sha256& update(std::string_view text) { return update(text.data(), text.size()); }

  Sha256Digest finish() {
    Sha256Digest out{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), out.data(), &len) != 1 || len != out.size()) {
      throw std::runtime_error("sha256: final failed");
    }
    return out;
  }

private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

inline std::string sha256_hex(std::string_view text) {
  auto d = Sha256().update(text).finish();
  return to_hex(d);
}

inline std::string sha256_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::InputError, "cannot open " + path);
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  auto d = h.finish();
  return to_hex(d);
}

}  // namespace prevcurve

#endif  // PREVCURVE_DIGEST_HPP
