#pragma once

// Named-tensor archive ("RACT"), little-endian:
//
//   magic    4 bytes  "RACT"
//   version  u16      kArchiveVersion
//   count    u32      number of tensors
//   per tensor:
//     name_len u16, name (UTF-8, name_len bytes)
//     ndims    u8 (>= 1), dims u32 x ndims (each > 0)
//     payload  f64 x prod(dims), row-major
//
// Names are unique and nothing may follow the last tensor.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <string_view>

#include "racap/fs_util.hpp"
#include "racap/nn.hpp"

namespace racap {

inline constexpr std::uint16_t kArchiveVersion = 1;
inline constexpr std::string_view kArchiveMagic = "RACT";

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(std::string_view s) { buf_.append(s); }
  std::string take() { return std::move(buf_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
  double f64(const char* what) { return std::bit_cast<double>(le(8, what)); }
  std::string_view bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n)
      throw FormatError(std::string("truncated archive while reading ") + what, pos_);
  }
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_archive(const NamedTensors& tensors) {
  require(tensors.size() <= std::numeric_limits<std::uint32_t>::max(), "too many tensors");
  std::set<std::string> names;
  detail::ByteWriter w;
  w.bytes(kArchiveMagic);
  w.u16(kArchiveVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    require(!name.empty() && name.size() <= std::numeric_limits<std::uint16_t>::max(),
            "archive tensor name must have 1..65535 bytes");
    require(names.insert(name).second, "duplicate tensor name in archive: " + name);
    require(t.ndim() >= 1 && t.ndim() <= 255, "tensor rank out of range: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.dims()) {
      require(d <= std::numeric_limits<std::uint32_t>::max(), "dimension too large: " + name);
      w.u32(static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

inline NamedTensors decode_archive(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kArchiveMagic) throw FormatError("bad archive magic", 0);
  const std::size_t version_at = r.offset();
  const auto version = r.u16("version");
  if (version != kArchiveVersion)
    throw FormatError("unsupported archive version " + std::to_string(version), version_at);
  const auto count = r.u32("tensor count");
  NamedTensors out;
  std::set<std::string, std::less<>> names;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t entry_at = r.offset();
    const auto name_len = r.u16("name length");
    if (name_len == 0) throw FormatError("empty tensor name", entry_at);
    std::string name(r.bytes(name_len, "name"));
    if (!names.insert(name).second)
      throw FormatError("duplicate tensor name '" + name + "'", entry_at);
    const std::size_t rank_at = r.offset();
    const auto ndims = r.u8("rank");
    if (ndims == 0) throw FormatError("tensor '" + name + "' has rank 0", rank_at);
    Shape dims;
    for (std::uint8_t i = 0; i < ndims; ++i) {
      const std::size_t dim_at = r.offset();
      const auto d = r.u32("dimension");
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension", dim_at);
      dims.push_back(d);
    }
    const std::size_t n = shape_size(dims);
    if ((bytes.size() - r.offset()) / 8 < n)
      throw FormatError("truncated payload for tensor '" + name + "'", r.offset());
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64("payload");
    out.emplace_back(std::move(name), Tensor(std::move(dims), std::move(data)));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last tensor", r.offset());
  return out;
}

inline void save_archive(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_atomic(path, encode_archive(tensors));
}

inline NamedTensors load_archive(const std::filesystem::path& path) {
  return decode_archive(read_file(path));
}

/// Looks up a tensor by name; DataError if absent.
inline const Tensor& archive_get(const NamedTensors& archive, std::string_view name) {
  for (const auto& [n, t] : archive)
    if (n == name) return t;
  throw DataError("archive has no tensor named '" + std::string(name) + "'");
}

}  // namespace racap
