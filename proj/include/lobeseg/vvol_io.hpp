/* Copyright (c) 2025 The lobeseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

// VVOL: one JSON header line, then the raw little-endian payload.
//
//   {"magic":"VVOL1","dims":[nx,ny,nz],"channels":C,"dtype":"f32"|"u8","kind":"scalar"|"channel"|"label"}\n
//   <payload: C*nx*ny*nz elements, x-fastest then y then z, channel slowest>
//
// No padding, no footer. Real values are f32 on disk (f64 in memory), labels
// are u8. Format errors report the byte offset of the failure.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lobeseg/errors.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

using AnyVolume = std::variant<ScalarVolume, ChannelVolume, LabelVolume>;

namespace detail {

constexpr std::size_t kMaxHeaderBytes = 4096;

inline void append_f32_le(std::vector<std::uint8_t>& out, double v) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  out.push_back(static_cast<std::uint8_t>(bits & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((bits >> 24) & 0xff));
}

inline double read_f32_le(const std::uint8_t* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  return static_cast<double>(std::bit_cast<float>(bits));
}

inline std::string header_line(const Shape3& s, int channels, const char* dtype,
                               const char* kind) {
  nlohmann::ordered_json h;
  h["magic"] = "VVOL1";
  h["dims"] = {s.nx, s.ny, s.nz};
  h["channels"] = channels;
  h["dtype"] = dtype;
  h["kind"] = kind;
  return h.dump() + "\n";
}

inline void write_bytes(const std::string& path, const std::string& header,
                        const std::vector<std::uint8_t>& payload) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing", path);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) throw IoError("write failed", path);
}

}  // namespace detail

inline void write_volume(const std::string& path, const ScalarVolume& v) {
  std::vector<std::uint8_t> payload;
  payload.reserve(v.data.size() * 4);
  for (double x : v.data) detail::append_f32_le(payload, x);
  detail::write_bytes(path, detail::header_line(v.shape, 1, "f32", "scalar"), payload);
}

inline void write_volume(const std::string& path, const ChannelVolume& v) {
  std::vector<std::uint8_t> payload;
  payload.reserve(v.data.size() * 4);
  for (double x : v.data) detail::append_f32_le(payload, x);
  detail::write_bytes(path, detail::header_line(v.shape, v.channels, "f32", "channel"),
                      payload);
}

inline void write_volume(const std::string& path, const LabelVolume& v) {
  std::vector<std::uint8_t> payload(v.data.begin(), v.data.end());
  detail::write_bytes(path, detail::header_line(v.shape, 1, "u8", "label"), payload);
}

inline AnyVolume read_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading", path);

  std::string header;
  char ch;
  while (f.get(ch)) {
    if (ch == '\n') break;
    header.push_back(ch);
    if (header.size() > detail::kMaxHeaderBytes)
      throw FormatError("header line exceeds " + std::to_string(detail::kMaxHeaderBytes) +
                            " bytes",
                        header.size());
  }
  if (f.eof() && ch != '\n') throw FormatError("missing header newline", header.size());
  const std::size_t payload_offset = header.size() + 1;

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("malformed JSON header: ") + e.what(),
                      static_cast<std::size_t>(e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!h.is_object() || h.value("magic", "") != "VVOL1")
    throw FormatError("bad or missing magic, expected \"VVOL1\"", 0);
  for (const auto& [key, _] : h.items()) {
    if (key != "magic" && key != "dims" && key != "channels" && key != "dtype" &&
        key != "kind")
      throw FormatError("unknown header key \"" + key + "\"", 0);
  }
  if (!h.contains("dims") || !h["dims"].is_array() || h["dims"].size() != 3)
    throw FormatError("header dims must be a 3-element array", 0);
  const long nx = h["dims"][0].get<long>();
  const long ny = h["dims"][1].get<long>();
  const long nz = h["dims"][2].get<long>();
  if (nx < 1 || ny < 1 || nz < 1)
    throw FormatError("header dims must all be >= 1, got [" + std::to_string(nx) + "," +
                          std::to_string(ny) + "," + std::to_string(nz) + "]",
                      0);
  const int channels = h.value("channels", 0);
  const std::string dtype = h.value("dtype", "");
  const std::string kind = h.value("kind", "");
  if (channels < 1) throw FormatError("header channels must be >= 1", 0);

  const bool want_f32 = (dtype == "f32");
  if (!want_f32 && dtype != "u8") throw FormatError("unknown dtype \"" + dtype + "\"", 0);
  if (kind == "scalar" || kind == "channel") {
    if (!want_f32) throw FormatError("dtype mismatch: kind \"" + kind + "\" requires f32", 0);
    if (kind == "scalar" && channels != 1)
      throw FormatError("scalar kind requires channels == 1", 0);
  } else if (kind == "label") {
    if (want_f32) throw FormatError("dtype mismatch: kind \"label\" requires u8", 0);
    if (channels != 1) throw FormatError("label kind requires channels == 1", 0);
  } else {
    throw FormatError("unknown kind \"" + kind + "\"", 0);
  }

  const Shape3 shape(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz));
  const std::size_t n_elems = shape.voxels() * static_cast<std::size_t>(channels);
  const std::size_t elem_size = want_f32 ? 4 : 1;
  std::vector<std::uint8_t> payload(n_elems * elem_size);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size()));
  const std::size_t got = static_cast<std::size_t>(f.gcount());
  if (got != payload.size())
    throw FormatError("truncated payload: expected " + std::to_string(payload.size()) +
                          " bytes, got " + std::to_string(got),
                      payload_offset + got);

  if (kind == "label") {
    int max_label = 0;
    for (std::uint8_t b : payload) max_label = std::max(max_label, int(b));
    return LabelVolume(shape, std::move(payload), max_label + 1);
  }
  std::vector<double> values(n_elems);
  for (std::size_t i = 0; i < n_elems; ++i)
    values[i] = detail::read_f32_le(payload.data() + 4 * i);
  if (kind == "scalar") return ScalarVolume(shape, std::move(values));
  return ChannelVolume(channels, shape, std::move(values));
}

inline ScalarVolume read_scalar_volume(const std::string& path) {
  AnyVolume v = read_volume(path);
  if (auto* p = std::get_if<ScalarVolume>(&v)) return std::move(*p);
  throw FormatError("dtype mismatch: expected scalar volume in " + path, 0);
}

inline ChannelVolume read_channel_volume(const std::string& path) {
  AnyVolume v = read_volume(path);
  if (auto* p = std::get_if<ChannelVolume>(&v)) return std::move(*p);
  if (auto* p = std::get_if<ScalarVolume>(&v))
    return ChannelVolume(1, p->shape, std::move(p->data));
  throw FormatError("dtype mismatch: expected channel volume in " + path, 0);
}

/// Reads a label volume. num_classes is inferred as max(label)+1 unless a
/// larger override is given (classes absent from the data stay addressable).
inline LabelVolume read_label_volume(const std::string& path, int min_num_classes = 1) {
  AnyVolume v = read_volume(path);
  auto* p = std::get_if<LabelVolume>(&v);
  if (!p) throw FormatError("dtype mismatch: expected label volume in " + path, 0);
  if (p->num_classes < min_num_classes) p->num_classes = min_num_classes;
  return std::move(*p);
}

}  // namespace lobeseg
