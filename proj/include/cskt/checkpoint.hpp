#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "cskt/error.hpp"
#include "cskt/param_store.hpp"

namespace cskt {

// Layout, all integers little-endian u64:
//   "CSKT1"
//   entry count
//   per entry: name length, name bytes (UTF-8), rank, dims..., frozen (0/1),
//              byte offset of the payload relative to the payload start
//   payload: each tensor's values as little-endian IEEE-754 binary64
inline constexpr std::string_view kCheckpointMagic = "CSKT1";

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const noexcept { return pos_; }
  std::size_t size() const noexcept { return bytes_.size(); }
  const std::string& bytes() const noexcept { return bytes_; }

 private:
  void need(std::size_t n) const {
    require(n <= bytes_.size() - pos_, ErrorKind::Integrity, "checkpoint truncated");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const ParamStore& store) {
  std::string out(kCheckpointMagic);
  detail::put_u64(out, store.size());
  std::uint64_t offset = 0;
  for (const auto& e : store) {
    detail::put_u64(out, e.name.size());
    out += e.name;
    detail::put_u64(out, e.tensor.rank());
    for (std::size_t d : e.tensor.shape()) detail::put_u64(out, d);
    detail::put_u64(out, e.frozen ? 1 : 0);
    detail::put_u64(out, offset);
    offset += 8 * e.tensor.numel();
  }
  for (const auto& e : store) {
    for (double v : e.tensor.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline ParamStore deserialize_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  require(in.take(kCheckpointMagic.size()) == kCheckpointMagic, ErrorKind::Integrity, "bad checkpoint magic");
  struct Header {
    std::string name;
    Shape shape;
    bool frozen;
    std::uint64_t offset;
  };
  const std::uint64_t count = in.u64();
  require(count <= in.size(), ErrorKind::Integrity, "implausible checkpoint entry count");
  std::vector<Header> headers;
  for (std::uint64_t i = 0; i < count; ++i) {
    Header h;
    h.name = in.take(in.u64());
    const std::uint64_t rank = in.u64();
    require(rank <= 16, ErrorKind::Integrity, "implausible tensor rank in checkpoint");
    for (std::uint64_t r = 0; r < rank; ++r) h.shape.push_back(in.u64());
    const std::uint64_t frozen = in.u64();
    require(frozen <= 1, ErrorKind::Integrity, "bad frozen flag for '" + h.name + "'");
    h.frozen = frozen == 1;
    h.offset = in.u64();
    headers.push_back(std::move(h));
  }
  const std::size_t payload = in.position();
  ParamStore store;
  std::uint64_t expected_offset = 0;
  for (const Header& h : headers) {
    require(h.offset == expected_offset, ErrorKind::Integrity, "payload offset mismatch for '" + h.name + "'");
    const std::size_t n = shape_numel(h.shape);
    require(payload + h.offset + 8 * n <= in.size(), ErrorKind::Integrity, "payload truncated at '" + h.name + "'");
    Tensor t(h.shape);
    const auto* raw = reinterpret_cast<const unsigned char*>(in.bytes().data() + payload + h.offset);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[8 * k + b]) << (8 * b);
      t[k] = std::bit_cast<double>(bits);
    }
    store.add(h.name, std::move(t), h.frozen);
    expected_offset += 8 * n;
  }
  require(payload + expected_offset == in.size(), ErrorKind::Integrity, "trailing bytes after checkpoint payload");
  return store;
}

inline void save_checkpoint(const ParamStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(store);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorKind::Io, "failed writing checkpoint " + path.string());
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(std::move(bytes));
}

/// Copies checkpoint values into `target`. Names, order, shapes and frozen
/// flags must match exactly.
inline void assign_checkpoint(ParamStore& target, const ParamStore& source) {
  require(target.size() == source.size(), ErrorKind::Integrity,
          "checkpoint has " + std::to_string(source.size()) + " tensors, model expects " +
              std::to_string(target.size()));
  auto src = source.begin();
  for (auto& dst : target) {
    require(dst.name == src->name, ErrorKind::Integrity,
            "checkpoint entry '" + src->name + "' where model expects '" + dst.name + "'");
    require(dst.tensor.shape() == src->tensor.shape(), ErrorKind::Integrity,
            "shape mismatch for '" + dst.name + "': checkpoint " + shape_str(src->tensor.shape()) + ", model " +
                shape_str(dst.tensor.shape()));
    require(dst.frozen == src->frozen, ErrorKind::Integrity, "frozen flag mismatch for '" + dst.name + "'");
    dst.tensor.values() = src->tensor.values();
    dst.tensor.clear_grad();
    ++src;
  }
}

}  // namespace cskt
