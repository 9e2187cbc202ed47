#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mfadapter/errors.hpp"
#include "mfadapter/tensor.hpp"

// Little-endian primitives shared by the bundle, cache, and checkpoint
// containers. Every tensor is stored as
//   u32 name_len, name bytes, u8 rank, u64 dims[rank], f32 data[prod(dims)]

namespace mfa::io {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kMaxRank = 8;

class ByteWriter {
 public:
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void magic(std::string_view m) { raw({reinterpret_cast<const std::uint8_t*>(m.data()), m.size()}); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void blob(std::string_view s) {
    u64(s.size());
    raw({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  }
  void tensor(std::string_view name, const Tensor& t) {
    str(name);
    tensor_body(t);
  }
  void tensor_body(const Tensor& t) {
    u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) u64(e);
    for (float v : t.data()) f32(v);
  }
  void patch_u64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  std::size_t size() const noexcept { return buf_.size(); }
  const Bytes& bytes() const& noexcept { return buf_; }
  Bytes bytes() && noexcept { return std::move(buf_); }

 private:
  Bytes buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const noexcept { return pos_; }
  std::uint64_t remaining() const noexcept { return bytes_.size() - pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }

  void seek(std::uint64_t at) {
    if (at > bytes_.size()) fail("seek past end of data");
    pos_ = at;
  }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, pos_); }

  void expect_magic(std::string_view m) {
    need(m.size(), "magic");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      fail("bad magic, expected \"" + std::string(m) + "\"");
    }
    pos_ += m.size();
  }

  std::uint8_t u8() {
    need(1, "u8");
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }

  std::string str() {
    const std::uint32_t n = u32();
    need(n, "string");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string blob() {
    const std::uint64_t n = u64();
    need(n, "blob");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  /// Reads the dims and payload of a tensor record whose name was already consumed.
  Tensor tensor_body() {
    const std::uint64_t rank_at = pos_;
    const std::uint8_t rank = u8();
    if (rank == 0) throw FormatError("tensor record with rank 0", rank_at);
    if (rank > kMaxRank) throw FormatError("tensor rank " + std::to_string(rank) + " exceeds 8", rank_at);
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& e : shape) {
      const std::uint64_t dim_at = pos_;
      const std::uint64_t v = u64();
      if (v == 0) throw FormatError("tensor with zero extent", dim_at);
      if (count > std::numeric_limits<std::uint64_t>::max() / v) throw FormatError("tensor size overflow", dim_at);
      count *= v;
      e = static_cast<std::size_t>(v);
    }
    if (count > remaining() / 4) fail("truncated tensor payload");
    std::vector<float> data(count);
    for (auto& v : data) v = f32();
    return Tensor(std::move(shape), std::move(data));
  }

  std::pair<std::string, Tensor> tensor() {
    std::string name = str();
    return {std::move(name), tensor_body()};
  }

 private:
  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) fail(std::string("truncated data reading ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading", path.string());
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed", path.string());
  return data;
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing", path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed", path.string());
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace mfa::io
