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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "lobeseg/errors.hpp"

namespace lobeseg {

// Every dense grid in this library is linearized x-fastest, then y, then z;
// multi-channel data is channel-major (channel index slowest). One fixed
// convention, used by the in-memory types, the on-disk format, and every
// windowed operation.

struct Shape3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  Shape3() = default;
  Shape3(int nx_, int ny_, int nz_) : nx(nx_), ny(ny_), nz(nz_) {
    if (nx < 1 || ny < 1 || nz < 1)
      throw ParameterError("Shape3: all axis counts must be >= 1, got " + str());
    const std::int64_t total = static_cast<std::int64_t>(nx) * ny * nz;
    if (total > (std::int64_t{1} << 40))
      throw ParameterError("Shape3: voxel count " + std::to_string(total) + " too large");
  }

  std::size_t voxels() const { return static_cast<std::size_t>(nx) * ny * nz; }

  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) +
                                           static_cast<std::size_t>(ny) * z);
  }

  bool contains(int x, int y, int z) const {
    return x >= 0 && x < nx && y >= 0 && y < ny && z >= 0 && z < nz;
  }

  bool operator==(const Shape3& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }
  bool operator!=(const Shape3& o) const { return !(*this == o); }

  std::string str() const {
    return std::to_string(nx) + "x" + std::to_string(ny) + "x" + std::to_string(nz);
  }
};

namespace detail {
inline void require_finite(const std::vector<double>& data, const char* what) {
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}
}  // namespace detail

/// Single-channel grid of real values. Values are stored in f64; the on-disk
/// format quantizes to f32.
struct ScalarVolume {
  Shape3 shape;
  std::vector<double> data;

  ScalarVolume() = default;

  explicit ScalarVolume(Shape3 s, double fill = 0.0) : shape(s), data(s.voxels(), fill) {}

  ScalarVolume(Shape3 s, std::vector<double> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.voxels())
      throw ParameterError("ScalarVolume: data length " + std::to_string(data.size()) +
                           " != voxel count " + std::to_string(shape.voxels()));
    detail::require_finite(data, "ScalarVolume");
  }

  double& at(int x, int y, int z) { return data[shape.index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[shape.index(x, y, z)]; }
};

/// Multi-channel grid, channel-major. Houses probability maps and
/// displacement fields; also the universal value type of the autodiff tape
/// (a scalar is a 1-channel 1x1x1 volume).
struct ChannelVolume {
  int channels = 0;
  Shape3 shape;
  std::vector<double> data;

  ChannelVolume() = default;

  ChannelVolume(int c, Shape3 s, double fill = 0.0)
      : channels(c), shape(s), data(static_cast<std::size_t>(c) * s.voxels(), fill) {
    if (c < 1) throw ParameterError("ChannelVolume: channels must be >= 1");
  }

  ChannelVolume(int c, Shape3 s, std::vector<double> values)
      : channels(c), shape(s), data(std::move(values)) {
    if (c < 1) throw ParameterError("ChannelVolume: channels must be >= 1");
    if (data.size() != static_cast<std::size_t>(c) * shape.voxels())
      throw ParameterError("ChannelVolume: data length " + std::to_string(data.size()) +
                           " != channels*voxels");
    detail::require_finite(data, "ChannelVolume");
  }

  std::size_t voxels() const { return shape.voxels(); }
  std::size_t total() const { return data.size(); }

  std::size_t index(int c, int x, int y, int z) const {
    return static_cast<std::size_t>(c) * shape.voxels() + shape.index(x, y, z);
  }

  double& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
  double at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }

  double* channel(int c) { return data.data() + static_cast<std::size_t>(c) * voxels(); }
  const double* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * voxels();
  }

  bool same_layout(const ChannelVolume& o) const {
    return channels == o.channels && shape == o.shape;
  }
};

/// Integer class labels, one per voxel. `num_classes` counts the background
/// class 0, so valid labels are 0..num_classes-1.
struct LabelVolume {
  Shape3 shape;
  std::vector<std::uint8_t> data;
  int num_classes = 1;

  LabelVolume() = default;

  LabelVolume(Shape3 s, int nc) : shape(s), data(s.voxels(), 0), num_classes(nc) {
    if (nc < 1 || nc > 256) throw ParameterError("LabelVolume: num_classes must be in 1..256");
  }

  LabelVolume(Shape3 s, std::vector<std::uint8_t> labels, int nc)
      : shape(s), data(std::move(labels)), num_classes(nc) {
    if (nc < 1 || nc > 256) throw ParameterError("LabelVolume: num_classes must be in 1..256");
    if (data.size() != shape.voxels())
      throw ParameterError("LabelVolume: data length != voxel count");
    for (std::uint8_t v : data)
      if (v >= nc)
        throw RangeError("LabelVolume: label " + std::to_string(int(v)) +
                         " >= num_classes " + std::to_string(nc));
  }

  std::uint8_t& at(int x, int y, int z) { return data[shape.index(x, y, z)]; }
  std::uint8_t at(int x, int y, int z) const { return data[shape.index(x, y, z)]; }
};

/// Boolean occupancy grid (stored as bytes, 0/1).
struct BinaryMask {
  Shape3 shape;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  explicit BinaryMask(Shape3 s, bool fill = false)
      : shape(s), data(s.voxels(), fill ? 1 : 0) {}

  bool at(int x, int y, int z) const { return data[shape.index(x, y, z)] != 0; }
  void set(int x, int y, int z, bool v) { data[shape.index(x, y, z)] = v ? 1 : 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
  bool empty() const { return count() == 0; }
};

/// Per-voxel indicator encoding: channel k is 1.0 where label == k.
inline ChannelVolume one_hot(const LabelVolume& labels, int num_classes) {
  if (num_classes < 1) throw ParameterError("one_hot: num_classes must be >= 1");
  for (std::uint8_t v : labels.data)
    if (v >= num_classes)
      throw RangeError("one_hot: label " + std::to_string(int(v)) + " >= num_classes " +
                       std::to_string(num_classes));
  ChannelVolume out(num_classes, labels.shape, 0.0);
  const std::size_t n = labels.shape.voxels();
  for (std::size_t i = 0; i < n; ++i) out.data[labels.data[i] * n + i] = 1.0;
  return out;
}

/// Per voxel, the smallest channel index attaining the maximum value.
inline LabelVolume argmax_channel(const ChannelVolume& probs) {
  const std::size_t n = probs.voxels();
  std::vector<std::uint8_t> labels(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    double best = probs.data[i];
    int best_c = 0;
    for (int c = 1; c < probs.channels; ++c) {
      const double v = probs.data[static_cast<std::size_t>(c) * n + i];
      if (v > best) {
        best = v;
        best_c = c;
      }
    }
    labels[i] = static_cast<std::uint8_t>(best_c);
  }
  return LabelVolume(probs.shape, std::move(labels), std::max(probs.channels, 1));
}

/// Map CT intensities through the window [lo, hi] onto [0, 1], clamped.
inline ScalarVolume hu_window_normalize(const ScalarVolume& image, double lo = -1000.0,
                                        double hi = 400.0) {
  if (!(lo < hi)) throw ParameterError("hu_window_normalize: requires lo < hi");
  ScalarVolume out(image.shape);
  const double scale = 1.0 / (hi - lo);
  for (std::size_t i = 0; i < image.data.size(); ++i)
    out.data[i] = std::clamp((image.data[i] - lo) * scale, 0.0, 1.0);
  return out;
}

/// Binary mask of one class of a label map.
inline BinaryMask class_mask(const LabelVolume& labels, int cls) {
  BinaryMask m(labels.shape);
  for (std::size_t i = 0; i < labels.data.size(); ++i) m.data[i] = (labels.data[i] == cls);
  return m;
}

}  // namespace lobeseg
