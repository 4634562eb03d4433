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

#include <vector>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

/// Binary dilation with a cubic structuring element of edge 2*radius+1,
/// window clipped at the volume borders. A cube is separable, so this runs
/// as three axis passes instead of one full window scan.
inline BinaryMask dilate_binary(const BinaryMask& mask, int radius) {
  if (radius < 1) throw ParameterError("dilate_binary: radius must be >= 1");
  const Shape3& s = mask.shape;

  auto pass = [&](const std::vector<std::uint8_t>& in, int axis) {
    std::vector<std::uint8_t> out(in.size(), 0);
    const int n[3] = {s.nx, s.ny, s.nz};
    for (int z = 0; z < s.nz; ++z)
      for (int y = 0; y < s.ny; ++y)
        for (int x = 0; x < s.nx; ++x) {
          int p[3] = {x, y, z};
          bool hit = false;
          for (int d = -radius; d <= radius && !hit; ++d) {
            int q[3] = {p[0], p[1], p[2]};
            q[axis] += d;
            if (q[axis] < 0 || q[axis] >= n[axis]) continue;
            hit = in[s.index(q[0], q[1], q[2])] != 0;
          }
          out[s.index(x, y, z)] = hit ? 1 : 0;
        }
    return out;
  };

  BinaryMask result(s);
  result.data = pass(pass(pass(mask.data, 0), 1), 2);
  return result;
}

/// Synthesizes the fissure label map from a lobe label map: each fissure
/// class is the intersection of its two dilated adjacent lobes. Voxels lying
/// in several intersections keep the lowest fissure class.
inline LabelVolume fissure_gt_from_lobes(const LabelVolume& lobes, int radius,
                                         const FissureAdjacency& adj) {
  if (radius < 1) throw ParameterError("fissure_gt_from_lobes: radius must be >= 1");
  adj.validate_against(lobes.num_classes - 1);

  LabelVolume out(lobes.shape, adj.num_fissures() + 1);
  for (const FissureEntry& e : adj.entries) {  // entries sorted ascending by class
    const BinaryMask da = dilate_binary(class_mask(lobes, e.lobe_a), radius);
    const BinaryMask db = dilate_binary(class_mask(lobes, e.lobe_b), radius);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      if (out.data[i] == 0 && da.data[i] && db.data[i])
        out.data[i] = static_cast<std::uint8_t>(e.fissure_class);
  }
  return out;
}

/// Single-channel indicator of "any fissure foreground" in a fissure label map.
inline ScalarVolume fissure_sheet(const LabelVolume& fissures) {
  ScalarVolume out(fissures.shape);
  for (std::size_t i = 0; i < fissures.data.size(); ++i)
    out.data[i] = fissures.data[i] > 0 ? 1.0 : 0.0;
  return out;
}

}  // namespace lobeseg
