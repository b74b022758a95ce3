#pragma once

// Checkpoint format. All integers little-endian.
//
//   magic      4 bytes  "CLWI"
//   version    u16      1
//   arch id    u16 length + UTF-8 bytes
//   width      u32
//   count      u32      number of tensors
//   table      count x { u16 name length, UTF-8 name, u8 dtype (1 = f32),
//                        u8 rank, rank x u32 dims }
//   payload    for each table entry in table order: prod(dims) x f32
//
// The file ends exactly after the last payload. Tensors are identified by
// name, so the table order carries no meaning.

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "clewi/errors.hpp"
#include "clewi/models.hpp"

namespace clewi {

inline constexpr char kCheckpointMagic[4] = {'C', 'L', 'W', 'I'};
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    auto b = take(2);
    return std::uint16_t(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    auto b = take(4);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    auto b = take(n);
    return std::string(b.begin(), b.end());
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    if (remaining() < n) throw FormatError("checkpoint: truncated file");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> save_checkpoint(const ParamSet& params) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u16(kCheckpointVersion);
  w.u16(static_cast<std::uint16_t>(params.arch_id.size()));
  w.bytes(params.arch_id);
  w.u32(static_cast<std::uint32_t>(params.width));
  w.u32(static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  }
  for (const auto& [name, t] : params.tensors)
    for (float v : t.values()) w.f32(v);
  return w.take();
}

inline ParamSet load_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4) != std::string_view(kCheckpointMagic, 4))
    throw FormatError("checkpoint: bad magic");
  if (auto v = r.u16(); v != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  ParamSet p;
  p.arch_id = r.str(r.u16());
  p.width = r.u32();
  const std::uint32_t count = r.u32();

  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> table;
  std::set<std::string> names;
  std::size_t payload_floats = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u16());
    if (e.name.empty() || !names.insert(e.name).second)
      throw FormatError("checkpoint: corrupt shape table (empty or duplicate name)");
    if (r.u8() != kDtypeF32) throw FormatError("checkpoint: unknown dtype for " + e.name);
    const std::uint8_t rank = r.u8();
    if (rank == 0) throw FormatError("checkpoint: corrupt shape table (rank 0)");
    for (std::uint8_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      if (d == 0) throw FormatError("checkpoint: corrupt shape table (zero dim)");
      e.shape.push_back(d);
    }
    payload_floats += shape_numel(e.shape);
    table.push_back(std::move(e));
  }
  if (r.remaining() != payload_floats * 4) {
    throw FormatError(r.remaining() < payload_floats * 4
                          ? "checkpoint: truncated payload"
                          : "checkpoint: trailing bytes after payload");
  }
  for (auto& e : table) {
    Tensor t(e.shape);
    for (auto& v : t.values()) v = r.f32();
    p.tensors.emplace(std::move(e.name), std::move(t));
  }
  return p;
}

inline void save_checkpoint_file(const ParamSet& params, const std::string& path) {
  const auto bytes = save_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint: cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

inline ParamSet load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

}  // namespace clewi
