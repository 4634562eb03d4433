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
#include <string>
#include <vector>

#include "lobeseg/errors.hpp"

namespace lobeseg {

// Lobe classes: 0 background, 1 LU, 2 LL, 3 RU, 4 RM, 5 RL.
// Fissure classes: 1 LOF, 2 RHF, 3 ROF-upper, 4 ROF-lower.

struct FissureEntry {
  int fissure_class;
  int lobe_a;
  int lobe_b;
};

/// Maps each fissure class to the two lobe classes it separates. Dilating the
/// two lobes and intersecting yields that fissure's band; the right lung gets
/// three such bands from its three pairwise lobe contacts.
struct FissureAdjacency {
  std::vector<FissureEntry> entries;

  FissureAdjacency() = default;

  explicit FissureAdjacency(std::vector<FissureEntry> e) : entries(std::move(e)) {
    std::sort(entries.begin(), entries.end(),
              [](const FissureEntry& a, const FissureEntry& b) {
                return a.fissure_class < b.fissure_class;
              });
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const FissureEntry& fe = entries[i];
      if (fe.fissure_class != static_cast<int>(i) + 1)
        throw ParameterError("FissureAdjacency: fissure classes must be 1..C consecutively");
      if (fe.lobe_a == fe.lobe_b)
        throw ParameterError("FissureAdjacency: fissure " + std::to_string(fe.fissure_class) +
                             " must join two distinct lobes");
      if (fe.lobe_a < 1 || fe.lobe_b < 1)
        throw ParameterError("FissureAdjacency: lobe classes must be foreground (>= 1)");
    }
  }

  static FissureAdjacency default_lung() {
    return FissureAdjacency({{1, 1, 2}, {2, 3, 4}, {3, 3, 5}, {4, 4, 5}});
  }

  int num_fissures() const { return static_cast<int>(entries.size()); }

  int max_lobe() const {
    int m = 0;
    for (const auto& e : entries) m = std::max({m, e.lobe_a, e.lobe_b});
    return m;
  }

  /// Throws if any referenced lobe exceeds the given foreground lobe count.
  void validate_against(int num_lobe_classes) const {
    if (entries.empty()) throw ParameterError("FissureAdjacency: empty table");
    for (const auto& e : entries)
      if (e.lobe_a > num_lobe_classes || e.lobe_b > num_lobe_classes)
        throw ParameterError("FissureAdjacency: fissure " + std::to_string(e.fissure_class) +
                             " references lobe class > " + std::to_string(num_lobe_classes));
  }

  bool operator==(const FissureAdjacency& o) const {
    if (entries.size() != o.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].fissure_class != o.entries[i].fissure_class ||
          entries[i].lobe_a != o.entries[i].lobe_a || entries[i].lobe_b != o.entries[i].lobe_b)
        return false;
    return true;
  }
};

inline const char* lobe_name(int cls) {
  switch (cls) {
    case 1: return "LU";
    case 2: return "LL";
    case 3: return "RU";
    case 4: return "RM";
    case 5: return "RL";
    default: return nullptr;
  }
}

inline const char* fissure_name(int cls) {
  switch (cls) {
    case 1: return "LOF";
    case 2: return "RHF";
    case 3: return "ROF-upper";
    case 4: return "ROF-lower";
    default: return nullptr;
  }
}

}  // namespace lobeseg
