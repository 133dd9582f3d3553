#pragma once

// PFLW tensor container.
//
//   magic    "PFLW"
//   version  u16
//   count    u32
//   entries  name_len u32, name bytes (UTF-8), dtype u8, rank u32,
//            extents u64[rank], values (row-major)
//
// All integers and values are little-endian. dtype 0 = f32, 1 = f64,
// 2 = raw bytes (used for metadata blobs).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "pfl/tensor.hpp"

namespace pfl {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, bytes = 2 };

struct CheckpointEntry {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;
  std::string bytes;

  template <typename T>
  Tensor<T> tensor() const {
    std::vector<T> v;
    if (dtype == DType::f32) v.assign(f32.begin(), f32.end());
    else if (dtype == DType::f64) v.assign(f64.begin(), f64.end());
    else throw FormatError("checkpoint entry holds raw bytes, not a tensor");
    return Tensor<T>(shape, std::move(v));
  }
};

/// Ordered name -> entry map; serialization order is lexicographic by name.
class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.shape = t.shape();
    if constexpr (std::is_same_v<T, float>) {
      e.dtype = DType::f32;
      e.f32.assign(t.data().begin(), t.data().end());
    } else {
      e.dtype = DType::f64;
      e.f64.assign(t.data().begin(), t.data().end());
    }
    entries_[name] = std::move(e);
  }

  void put_bytes(const std::string& name, std::string blob) {
    CheckpointEntry e;
    e.dtype = DType::bytes;
    e.shape = {blob.size()};
    e.bytes = std::move(blob);
    entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const CheckpointEntry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("checkpoint has no entry '" + name + "'");
    return it->second;
  }
  const std::map<std::string, CheckpointEntry>& entries() const { return entries_; }

  std::string serialize() const {
    std::string out;
    out += "PFLW";
    put_le<std::uint16_t>(out, kVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, e] : entries_) {
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out += name;
      out.push_back(static_cast<char>(e.dtype));
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) put_le<std::uint64_t>(out, d);
      switch (e.dtype) {
        case DType::f32:
          for (float v : e.f32) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
          break;
        case DType::f64:
          for (double v : e.f64) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
          break;
        case DType::bytes:
          out += e.bytes;
          break;
      }
    }
    return out;
  }

  static Checkpoint deserialize(const std::string& buf) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > buf.size()) throw FormatError("PFLW: truncated container");
    };
    need(4);
    if (buf.compare(0, 4, "PFLW") != 0) throw FormatError("PFLW: bad magic");
    pos = 4;
    auto version = get_le<std::uint16_t>(buf, pos, need);
    if (version != kVersion) throw FormatError("PFLW: unsupported version " + std::to_string(version));
    auto count = get_le<std::uint32_t>(buf, pos, need);
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      auto name_len = get_le<std::uint32_t>(buf, pos, need);
      need(name_len);
      std::string name = buf.substr(pos, name_len);
      pos += name_len;
      need(1);
      auto code = static_cast<std::uint8_t>(buf[pos++]);
      if (code > 2) throw FormatError("PFLW: unknown dtype code " + std::to_string(code));
      CheckpointEntry e;
      e.dtype = static_cast<DType>(code);
      auto rank = get_le<std::uint32_t>(buf, pos, need);
      for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_le<std::uint64_t>(buf, pos, need));
      std::size_t n = numel_of(e.shape);
      switch (e.dtype) {
        case DType::f32:
          e.f32.resize(n);
          for (auto& v : e.f32) v = std::bit_cast<float>(get_le<std::uint32_t>(buf, pos, need));
          break;
        case DType::f64:
          e.f64.resize(n);
          for (auto& v : e.f64) v = std::bit_cast<double>(get_le<std::uint64_t>(buf, pos, need));
          break;
        case DType::bytes:
          need(n);
          e.bytes = buf.substr(pos, n);
          pos += n;
          break;
      }
      ck.entries_[name] = std::move(e);
    }
    if (pos != buf.size()) throw FormatError("PFLW: trailing bytes after last entry");
    return ck;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    auto blob = serialize();
    os.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(blob);
  }

 private:
  template <typename U>
  static void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  template <typename U, typename Need>
  static U get_le(const std::string& buf, std::size_t& pos, Need&& need) {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
  }

  std::map<std::string, CheckpointEntry> entries_;
};

}  // namespace pfl
