#pragma once

// NNW1 parameter checkpoints (little-endian):
//   magic "NNW1", then until end of file one record per tensor:
//   name length u32 | UTF-8 name | rank u32 | rank x dims u64 | f32 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "noisemap/raster.hpp"
#include "noisemap/tensor.hpp"

namespace noisemap::ad {

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline std::string encode_checkpoint(const std::vector<TensorRecord>& records) {
  std::string out("NNW1", 4);
  for (const auto& r : records) {
    require(r.values.size() == numel(r.shape), ErrorKind::Validation, "checkpoint record '" + r.name + "' size mismatch");
    noisemap::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    noisemap::detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) noisemap::detail::put_le<std::uint64_t>(out, d);
    for (float f : r.values) noisemap::detail::put_le(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline std::vector<TensorRecord> decode_checkpoint(std::span<const char> bytes, const std::string& path = {}) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "NNW1", 4) != 0)
    throw Error(ErrorKind::Format, "bad magic, expected NNW1", path);
  noisemap::detail::ByteReader in(bytes, path);
  in.take(4);
  std::vector<TensorRecord> records;
  while (in.remaining() > 0) {
    TensorRecord r;
    const auto len = in.get<std::uint32_t>();
    auto name = in.take(len);
    r.name.assign(name.begin(), name.end());
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < rank; ++i) r.shape.push_back(in.get<std::uint64_t>());
    const auto n = numel(r.shape);
    if (in.remaining() / 4 < n) throw Error(ErrorKind::Corruption, "truncated record '" + r.name + "'", path);
    r.values.resize(n);
    for (auto& v : r.values) v = in.get_f32();
    records.push_back(std::move(r));
  }
  return records;
}

inline void write_checkpoint(const std::vector<TensorRecord>& records, const std::filesystem::path& path) {
  noisemap::detail::write_file(path, encode_checkpoint(records));
}

inline std::vector<TensorRecord> read_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = noisemap::detail::read_file(path);
  return decode_checkpoint(std::span<const char>(bytes.data(), bytes.size()), path.string());
}

}  // namespace noisemap::ad
