#ifndef PREVCURVE_CONTAINER_HPP
#define PREVCURVE_CONTAINER_HPP

// Binary container shared by particle stores, ensembles, weight tables and
// ground-truth files. Little-endian throughout.
//
//   offset  size  field
//   0       8     magic "PREVSTOR"
//   8       2     format version (u16)
//   10      2     kind (u16)
//   12      4     reserved, zero
//   16      8     metadata length in bytes (u64)
//   24      8     payload length in bytes (u64)
//   32      32    SHA-256 over the payload
//   64      32    SHA-256 over bytes [0, 64) followed by the metadata
//
// The header digest therefore covers the payload too and identifies the file.
//   96      ...   metadata (compact JSON, UTF-8)
//   ...     ...   payload

#include <json.hpp>

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "prevcurve/digest.hpp"
#include "prevcurve/error.hpp"

namespace prevcurve {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::array<char, 8> kContainerMagic = {'P', 'R', 'E', 'V', 'S', 'T', 'O', 'R'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderSize = 96;

enum class ContainerKind : std::uint16_t { Particles = 1, Ensemble = 2, Weights = 3, Truth = 4 };

inline const char* to_string(ContainerKind k) {
  switch (k) {
    case ContainerKind::Particles: return "particles";
    case ContainerKind::Ensemble: return "ensemble";
    case ContainerKind::Weights: return "weights";
    case ContainerKind::Truth: return "truth";
  }
  return "?";
}

/// Append-only little-endian byte buffer.
class ByteWriter {
public:
  template <class T>
  void put(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  template <class T>
  void put_span(std::span<const T> values) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(values.data());
    bytes_.insert(bytes_.end(), p, p + values.size_bytes());
  }

  void reserve(std::size_t n) { bytes_.reserve(n); }
  std::size_t size() const { return bytes_.size(); }
  std::vector<std::byte>& bytes() { return bytes_; }

private:
  std::vector<std::byte> bytes_;
};

/// Bounds-checked cursor over a byte span.
class ByteReader {
public:
  explicit ByteReader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    require(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  template <class T>
  void get_into(std::span<T> out) {
    static_assert(std::is_trivially_copyable_v<T>);
    require(out.size_bytes());
    std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) fail(ErrorKind::StoreCorrupt, "seek past end of payload");
    pos_ = pos;
  }

private:
  void require(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::StoreCorrupt, "payload truncated");
  }

  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

struct Container {
  ContainerKind kind = ContainerKind::Particles;
  nlohmann::json meta;
  std::vector<std::byte> payload;
  std::string header_digest;  // hex
  std::string payload_digest;
};

namespace detail {

inline void put_le(std::byte* dst, std::uint64_t v, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFF);
}

inline std::uint64_t get_le(const std::byte* src, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(src[i]) << (8 * i);
  return v;
}

}  // namespace detail

/// Writes to `path` via a temporary file and rename, so readers never see a partial file.
inline Container write_container(const std::string& path, ContainerKind kind, const nlohmann::json& meta,
                                 std::span<const std::byte> payload) {
  const std::string meta_text = meta.dump();
  std::array<std::byte, kContainerHeaderSize> head{};
  std::memcpy(head.data(), kContainerMagic.data(), kContainerMagic.size());
  detail::put_le(head.data() + 8, kContainerVersion, 2);
  detail::put_le(head.data() + 10, static_cast<std::uint16_t>(kind), 2);
  detail::put_le(head.data() + 16, meta_text.size(), 8);
  detail::put_le(head.data() + 24, payload.size(), 8);
  const auto pdig = Sha256().update(payload.data(), payload.size()).finish();
  std::memcpy(head.data() + 32, pdig.data(), 32);
  const auto hdig = Sha256().update(head.data(), 64).update(meta_text).finish();
  std::memcpy(head.data() + 64, hdig.data(), 32);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::InputError, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(head.data()), head.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) fail(ErrorKind::InputError, "short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::InputError, "cannot rename " + tmp + ": " + ec.message());

  Container c;
  c.kind = kind;
  c.meta = meta;
  c.header_digest = to_hex(hdig);
  c.payload_digest = to_hex(pdig);
  return c;
}

/// Reads and fully verifies a container. Nothing is returned unless every check passes.
inline Container read_container(const std::string& path, ContainerKind expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::InputError, "cannot open " + path);
  std::array<std::byte, kContainerHeaderSize> head{};
  in.read(reinterpret_cast<char*>(head.data()), head.size());
  if (in.gcount() != static_cast<std::streamsize>(head.size())) fail(ErrorKind::StoreCorrupt, path + ": truncated header");
  if (std::memcmp(head.data(), kContainerMagic.data(), kContainerMagic.size()) != 0) {
    fail(ErrorKind::StoreCorrupt, path + ": bad magic");
  }
  const auto version = detail::get_le(head.data() + 8, 2);
  const auto kind = detail::get_le(head.data() + 10, 2);
  const auto meta_len = detail::get_le(head.data() + 16, 8);
  const auto payload_len = detail::get_le(head.data() + 24, 8);

  // Digest before trusting any length field beyond a sanity bound.
  const auto file_size = std::filesystem::file_size(path);
  if (meta_len > file_size || payload_len > file_size || kContainerHeaderSize + meta_len + payload_len != file_size) {
    // Lengths may themselves be corrupted; report as digest failure when the header hash disagrees.
    std::string meta_text(std::min<std::uint64_t>(meta_len, file_size), '\0');
    in.read(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    meta_text.resize(static_cast<std::size_t>(in.gcount()));
    const auto hdig = Sha256().update(head.data(), 64).update(meta_text).finish();
    if (std::memcmp(hdig.data(), head.data() + 64, 32) != 0) fail(ErrorKind::StoreCorrupt, path + ": header digest mismatch");
    fail(ErrorKind::StoreCorrupt, path + ": file truncated or padded");
  }

  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  const auto hdig = Sha256().update(head.data(), 64).update(meta_text).finish();
  if (std::memcmp(hdig.data(), head.data() + 64, 32) != 0) fail(ErrorKind::StoreCorrupt, path + ": header digest mismatch");
  if (version != kContainerVersion) fail(ErrorKind::StoreCorrupt, path + ": unsupported format version " + std::to_string(version));
  if (kind != static_cast<std::uint16_t>(expected)) {
    fail(ErrorKind::StoreCorrupt, path + ": expected a " + std::string(to_string(expected)) + " container");
  }

  Container c;
  c.kind = expected;
  c.payload.resize(payload_len);
  in.read(reinterpret_cast<char*>(c.payload.data()), static_cast<std::streamsize>(payload_len));
  if (in.gcount() != static_cast<std::streamsize>(payload_len)) fail(ErrorKind::StoreCorrupt, path + ": payload truncated");
  const auto pdig = Sha256().update(c.payload.data(), c.payload.size()).finish();
  if (std::memcmp(pdig.data(), head.data() + 32, 32) != 0) fail(ErrorKind::StoreCorrupt, path + ": payload digest mismatch");
  try {
    c.meta = nlohmann::json::parse(meta_text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::StoreCorrupt, path + ": metadata is not valid JSON");
  }
  c.header_digest = to_hex(hdig);
  c.payload_digest = to_hex(pdig);
  return c;
}

}  // namespace prevcurve

#endif  // PREVCURVE_CONTAINER_HPP
