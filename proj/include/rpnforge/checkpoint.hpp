// Copyright 2026 The rpnforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "rpnforge/error.hpp"
#include "rpnforge/tensor.hpp"

namespace rpnforge {

// Flat binary container:
//   "RPNF" | u32 version | records until EOF
// record:
//   u64 name_len | name bytes (UTF-8) | u64 rank | u64 dims[rank] | f64 values[prod(dims)]
// All integers and floats are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t offset() const { return pos_; }

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("checkpoint truncated at byte ", pos_, " (need ", n, " more)");
  }
  std::uint64_t read_le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

using TensorMap = std::map<std::string, Tensor>;

inline std::string encode_checkpoint(const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
  std::string out = "RPNF";
  detail::put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    detail::put_u64(out, name.size());
    out += name;
    detail::put_u64(out, t->rank());
    for (std::size_t d : t->shape()) detail::put_u64(out, d);
    for (double v : t->values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline TensorMap decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "RPNF") != 0) fail("not a checkpoint: missing RPNF magic");
  detail::ByteReader in(bytes);
  in.raw(4);
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) fail("unsupported checkpoint version ", version);
  TensorMap out;
  while (!in.done()) {
    const std::uint64_t name_len = in.u64();
    if (name_len > bytes.size()) fail("checkpoint record name length corrupt at byte ", in.offset());
    std::string name = in.raw(name_len);
    const std::uint64_t rank = in.u64();
    if (rank > 16) fail("checkpoint record '", name, "' has implausible rank ", rank);
    Shape shape(rank);
    for (auto& d : shape) d = in.u64();
    const std::size_t n = shape_size(shape);
    if (n > bytes.size() / 8) fail("checkpoint record '", name, "' larger than the file");
    std::vector<double> values(n);
    for (auto& v : values) v = std::bit_cast<double>(in.u64());
    if (!out.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      fail("duplicate checkpoint record '", name, "'");
    }
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot open '", path, "' for reading");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Writes through a temporary so readers never observe a partial file.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot open '", tmp, "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail("write to '", tmp, "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) fail("cannot move '", tmp, "' to '", path, "'");
}

// FNV-1a over the raw bytes, hex encoded; used as a checkpoint identity.
inline std::string content_id(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace rpnforge
