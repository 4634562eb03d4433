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

#include <map>
#include <vector>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/autodiff.hpp"
#include "lobeseg/errors.hpp"

namespace lobeseg {

// Fissure generation: turns a lobe probability map into a fissure probability
// map with max-pooling standing in for dilation and per-voxel products for
// intersection, entirely on-tape so fissure supervision reaches the lobe
// predictor.
//
// Given softmax lobe probabilities Y (channel 0 background):
//   zhat_c = maxpool(Y_{A(c)}) * maxpool(Y_{B(c)})   for each fissure c
//   zhat_0 = prod_c (1 - zhat_c)
//   Z_c    = zhat_c / sum_i zhat_i
//
// The per-voxel normalizer is always >= 1 (it equals 1 + positive cross
// terms), so the division is safe. On one-hot input the argmax of Z
// reproduces fissure_gt_from_lobes exactly, including the lowest-class
// tie-break.
inline NodeId fgm_forward(Tape& tape, NodeId lobe_probs, const FissureAdjacency& adj,
                          int radius) {
  const ChannelVolume& probs = tape.value(lobe_probs);
  const int num_lobes = probs.channels - 1;
  if (num_lobes < 1 || adj.max_lobe() > num_lobes)
    throw ParameterError("fgm_forward: adjacency references lobe class beyond the " +
                         std::to_string(num_lobes) + " foreground channels");
  adj.validate_against(num_lobes);

  std::map<int, NodeId> pooled;  // one max-pool per distinct lobe
  auto pool_of = [&](int lobe) {
    auto it = pooled.find(lobe);
    if (it != pooled.end()) return it->second;
    NodeId p = tape.maxpool3(tape.select_channel(lobe_probs, lobe), radius);
    pooled.emplace(lobe, p);
    return p;
  };

  std::vector<NodeId> foreground;
  foreground.reserve(adj.entries.size());
  for (const FissureEntry& e : adj.entries)
    foreground.push_back(tape.mul(pool_of(e.lobe_a), pool_of(e.lobe_b)));

  std::vector<NodeId> antiphase;
  antiphase.reserve(foreground.size());
  for (NodeId f : foreground) antiphase.push_back(tape.one_minus(f));
  NodeId background = tape.channel_product(tape.concat_channels(antiphase));

  std::vector<NodeId> all;
  all.reserve(foreground.size() + 1);
  all.push_back(background);
  for (NodeId f : foreground) all.push_back(f);
  return tape.normalize_channels(tape.concat_channels(all));
}

}  // namespace lobeseg
