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

// Independent reference implementations used as oracles. Everything here is
// deliberately written the straightforward slow way, separate from the
// library code paths it checks.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lobeseg/rng.hpp"
#include "lobeseg/volume.hpp"

namespace oracles {

using lobeseg::BinaryMask;
using lobeseg::ChannelVolume;
using lobeseg::LabelVolume;
using lobeseg::Rng;
using lobeseg::ScalarVolume;
using lobeseg::Shape3;

// ---- morphology --------------------------------------------------------

/// Dilation straight from the definition: full cubic window scan.
inline BinaryMask dilate_bruteforce(const BinaryMask& mask, int radius) {
  const Shape3& s = mask.shape;
  BinaryMask out(s);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        bool hit = false;
        for (int dz = -radius; dz <= radius && !hit; ++dz)
          for (int dy = -radius; dy <= radius && !hit; ++dy)
            for (int dx = -radius; dx <= radius && !hit; ++dx) {
              const int xx = x + dx, yy = y + dy, zz = z + dz;
              if (s.contains(xx, yy, zz) && mask.at(xx, yy, zz)) hit = true;
            }
        out.set(x, y, z, hit);
      }
  return out;
}

// ---- surface distances ---------------------------------------------------

/// 6-connected surface extraction, written independently of the library's.
inline std::vector<std::array<int, 3>> surface_bruteforce(const BinaryMask& m) {
  std::vector<std::array<int, 3>> out;
  const Shape3& s = m.shape;
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        if (!m.at(x, y, z)) continue;
        const bool interior = x > 0 && m.at(x - 1, y, z) && x + 1 < s.nx &&
                              m.at(x + 1, y, z) && y > 0 && m.at(x, y - 1, z) &&
                              y + 1 < s.ny && m.at(x, y + 1, z) && z > 0 &&
                              m.at(x, y, z - 1) && z + 1 < s.nz && m.at(x, y, z + 1);
        if (!interior) out.push_back({x, y, z});
      }
  return out;
}

inline std::vector<double> directed_distances_bruteforce(
    const std::vector<std::array<int, 3>>& from,
    const std::vector<std::array<int, 3>>& to) {
  std::vector<double> result;
  for (const auto& p : from) {
    long best = std::numeric_limits<long>::max();
    for (const auto& q : to) {
      const long dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      const long d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best) best = d2;
    }
    result.push_back(std::sqrt(static_cast<double>(best)));
  }
  return result;
}

inline double hd95_bruteforce(const BinaryMask& a, const BinaryMask& b) {
  const auto sa = surface_bruteforce(a);
  const auto sb = surface_bruteforce(b);
  std::vector<double> pooled = directed_distances_bruteforce(sa, sb);
  for (double d : directed_distances_bruteforce(sb, sa)) pooled.push_back(d);
  std::sort(pooled.begin(), pooled.end());
  const std::size_t n = pooled.size();
  std::size_t k = 0;
  while (k < n && static_cast<double>(k + 1) < 0.95 * static_cast<double>(n)) ++k;
  // k is now the first index whose cumulative fraction (k+1)/n >= 0.95.
  return pooled[k];
}

inline double assd_bruteforce(const BinaryMask& a, const BinaryMask& b) {
  const auto sa = surface_bruteforce(a);
  const auto sb = surface_bruteforce(b);
  const auto d_ab = directed_distances_bruteforce(sa, sb);
  const auto d_ba = directed_distances_bruteforce(sb, sa);
  double m_ab = 0.0, m_ba = 0.0;
  for (double d : d_ab) m_ab += d;
  for (double d : d_ba) m_ba += d;
  m_ab /= static_cast<double>(d_ab.size());
  m_ba /= static_cast<double>(d_ba.size());
  return 0.5 * (m_ab + m_ba);
}

inline double dsc_bruteforce(const BinaryMask& a, const BinaryMask& b) {
  long na = 0, nb = 0, ni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    if (a.data[i]) ++na;
    if (b.data[i]) ++nb;
    if (a.data[i] && b.data[i]) ++ni;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

// ---- demons recurrence ----------------------------------------------------

/// Step-by-step scripted re-evaluation of the demons update, including its
/// own 1-D Gaussian passes.
inline ChannelVolume demons_bruteforce(const ScalarVolume& moving, const ScalarVolume& fixed,
                                       int iterations, double sigma) {
  const Shape3& s = fixed.shape;
  const std::size_t n = s.voxels();
  auto sample = [&](const ScalarVolume& v, int x, int y, int z) {
    x = std::clamp(x, 0, s.nx - 1);
    y = std::clamp(y, 0, s.ny - 1);
    z = std::clamp(z, 0, s.nz - 1);
    return v.data[s.index(x, y, z)];
  };

  ChannelVolume grad(3, s, 0.0);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::size_t i = s.index(x, y, z);
        grad.channel(0)[i] = 0.5 * (sample(fixed, x + 1, y, z) - sample(fixed, x - 1, y, z));
        grad.channel(1)[i] = 0.5 * (sample(fixed, x, y + 1, z) - sample(fixed, x, y - 1, z));
        grad.channel(2)[i] = 0.5 * (sample(fixed, x, y, z + 1) - sample(fixed, x, y, z - 1));
      }

  ChannelVolume force(3, s, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = moving.data[i] - fixed.data[i];
    const double gx = grad.channel(0)[i], gy = grad.channel(1)[i], gz = grad.channel(2)[i];
    const double denom = gx * gx + gy * gy + gz * gz + diff * diff + 1e-6;
    force.channel(0)[i] = diff * gx / denom;
    force.channel(1)[i] = diff * gy / denom;
    force.channel(2)[i] = diff * gz / denom;
  }

  // Per-axis renormalized Gaussian, recomputed here from scratch.
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double ksum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    ksum += kernel[t + radius];
  }
  for (double& k : kernel) k /= ksum;

  ChannelVolume smoothed = force;
  for (int axis = 0; axis < 3; ++axis) {
    ChannelVolume next = smoothed;
    for (int c = 0; c < 3; ++c)
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int x = 0; x < s.nx; ++x) {
            double acc = 0.0, w = 0.0;
            for (int t = -radius; t <= radius; ++t) {
              int xx = x, yy = y, zz = z;
              (axis == 0 ? xx : axis == 1 ? yy : zz) += t;
              if (!s.contains(xx, yy, zz)) continue;
              acc += kernel[t + radius] * smoothed.channel(c)[s.index(xx, yy, zz)];
              w += kernel[t + radius];
            }
            next.channel(c)[s.index(x, y, z)] = acc / w;
          }
    smoothed = next;
  }

  ChannelVolume field(3, s, 0.0);
  for (int k = 0; k < iterations; ++k)
    for (std::size_t i = 0; i < field.data.size(); ++i) field.data[i] += smoothed.data[i];
  return field;
}

// ---- generators -----------------------------------------------------------

inline BinaryMask random_mask(Rng& rng, Shape3 shape, double density) {
  BinaryMask m(shape);
  for (auto& v : m.data) v = rng.uniform01() < density ? 1 : 0;
  return m;
}

inline LabelVolume random_labels(Rng& rng, Shape3 shape, int num_classes) {
  LabelVolume l(shape, num_classes);
  for (auto& v : l.data) v = static_cast<std::uint8_t>(rng.below(num_classes));
  return l;
}

inline Shape3 random_shape(Rng& rng, int max_edge) {
  return Shape3(1 + static_cast<int>(rng.below(max_edge)),
                1 + static_cast<int>(rng.below(max_edge)),
                1 + static_cast<int>(rng.below(max_edge)));
}

/// Exponential moving average with window w (decay 2/(w+1)), seeded on the
/// first element.
inline std::vector<double> ema(const std::vector<double>& xs, int window) {
  std::vector<double> out;
  out.reserve(xs.size());
  const double k = 2.0 / (window + 1.0);
  double e = xs.empty() ? 0.0 : xs[0];
  for (double x : xs) {
    e += k * (x - e);
    out.push_back(e);
  }
  return out;
}

}  // namespace oracles
