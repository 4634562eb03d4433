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

// Segmentation evaluation: per-class DSC and HD95 over lobes, per-class ASSD
// over fissure bands. Distances are Euclidean in voxel units between
// 6-connected surface voxels; squared distances are computed in integer
// arithmetic so results are exactly reproducible. Metrics on empty masks are
// reported as explicit "undefined" markers, never silently dropped.

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/morphology.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

/// Foreground voxels with at least one 6-connected background or
/// out-of-volume neighbor. Empty iff the mask is empty.
inline std::vector<std::array<int, 3>> surface_voxels(const BinaryMask& mask) {
  const Shape3& s = mask.shape;
  std::vector<std::array<int, 3>> out;
  static constexpr int kNeighbors[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                           {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        if (!mask.at(x, y, z)) continue;
        for (const auto& d : kNeighbors) {
          const int xx = x + d[0], yy = y + d[1], zz = z + d[2];
          if (!s.contains(xx, yy, zz) || !mask.at(xx, yy, zz)) {
            out.push_back({x, y, z});
            break;
          }
        }
      }
  return out;
}

inline double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.shape != gt.shape) throw ParameterError("dsc: shape mismatch");
  std::size_t np = 0, ng = 0, ni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    np += p;
    ng += g;
    ni += (p && g);
  }
  if (np + ng == 0) return 1.0;  // both empty: perfect by convention
  return 2.0 * static_cast<double>(ni) / static_cast<double>(np + ng);
}

namespace detail {

/// Sorted nearest-surface distances from every point of `from` to `to`.
inline std::vector<double> directed_surface_distances(
    const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    long best = std::numeric_limits<long>::max();
    for (const auto& q : to) {
      const long dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
  return out;
}

}  // namespace detail

/// 95th percentile (nearest-rank) of the pooled bidirectional
/// nearest-surface distances.
inline double hd95(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.shape != gt.shape) throw ParameterError("hd95: shape mismatch");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  if (sp.empty() || sg.empty())
    throw UndefinedMetricError("hd95: undefined on an empty mask");
  std::vector<double> pooled = detail::directed_surface_distances(sp, sg);
  const std::vector<double> back = detail::directed_surface_distances(sg, sp);
  pooled.insert(pooled.end(), back.begin(), back.end());
  std::sort(pooled.begin(), pooled.end());
  // Nearest rank: the smallest value whose cumulative fraction reaches 0.95.
  const std::size_t n = pooled.size();
  std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  if (rank < 1) rank = 1;
  return pooled[rank - 1];
}

/// Average symmetric surface distance: the two directed mean distances,
/// averaged.
inline double assd(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.shape != gt.shape) throw ParameterError("assd: shape mismatch");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  if (sp.empty() || sg.empty())
    throw UndefinedMetricError("assd: undefined on an empty mask");
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  return 0.5 * (mean(detail::directed_surface_distances(sp, sg)) +
                mean(detail::directed_surface_distances(sg, sp)));
}

struct LobeMetrics {
  int cls = 0;
  std::string name;
  double dsc = 0.0;
  std::optional<double> hd95;  // undefined when either mask is empty
};

struct FissureMetrics {
  int cls = 0;
  std::string name;
  std::optional<double> assd;
};

struct MetricsReport {
  std::vector<LobeMetrics> lobes;
  std::vector<FissureMetrics> fissures;

  double mean_dsc() const {
    double s = 0.0;
    for (const auto& l : lobes) s += l.dsc;
    return lobes.empty() ? 0.0 : s / static_cast<double>(lobes.size());
  }

  std::optional<double> mean_hd95() const {
    double s = 0.0;
    int n = 0;
    for (const auto& l : lobes)
      if (l.hd95) {
        s += *l.hd95;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  }

  std::optional<double> mean_assd() const {
    double s = 0.0;
    int n = 0;
    for (const auto& f : fissures)
      if (f.assd) {
        s += *f.assd;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return s / n;
  }

  int undefined_count() const {
    int n = 0;
    for (const auto& l : lobes) n += !l.hd95;
    for (const auto& f : fissures) n += !f.assd;
    return n;
  }

  static std::string csv_header() { return "case,kind,class_id,class_name,dsc,hd95,assd"; }

  /// One row per class plus a mean row; undefined distances print "NA".
  std::string to_csv(const std::string& case_id) const {
    auto num = [](std::optional<double> v) {
      if (!v) return std::string("NA");
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", *v);
      return std::string(buf);
    };
    std::string out;
    for (const auto& l : lobes)
      out += case_id + ",lobe," + std::to_string(l.cls) + "," + l.name + "," +
             num(l.dsc) + "," + num(l.hd95) + ",NA\n";
    for (const auto& f : fissures)
      out += case_id + ",fissure," + std::to_string(f.cls) + "," + f.name + ",NA,NA," +
             num(f.assd) + "\n";
    out += case_id + ",mean,,," + num(mean_dsc()) + "," + num(mean_hd95()) + "," +
           num(mean_assd()) + "\n";
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["lobes"] = nlohmann::ordered_json::array();
    for (const auto& l : lobes) {
      nlohmann::ordered_json e;
      e["class"] = l.cls;
      e["name"] = l.name;
      e["dsc"] = l.dsc;
      if (l.hd95)
        e["hd95"] = *l.hd95;
      else
        e["hd95"] = nullptr;
      j["lobes"].push_back(e);
    }
    j["fissures"] = nlohmann::ordered_json::array();
    for (const auto& f : fissures) {
      nlohmann::ordered_json e;
      e["class"] = f.cls;
      e["name"] = f.name;
      if (f.assd)
        e["assd"] = *f.assd;
      else
        e["assd"] = nullptr;
      j["fissures"].push_back(e);
    }
    j["mean_dsc"] = mean_dsc();
    if (mean_hd95())
      j["mean_hd95"] = *mean_hd95();
    else
      j["mean_hd95"] = nullptr;
    if (mean_assd())
      j["mean_assd"] = *mean_assd();
    else
      j["mean_assd"] = nullptr;
    j["undefined_count"] = undefined_count();
    return j;
  }
};

/// Per-lobe DSC and HD95 between two label maps, plus per-fissure ASSD
/// between the fissure bands derived from each. Class count is taken as the
/// larger of the two maps' (a prediction may miss a class entirely; it then
/// scores DSC 0 with undefined distances).
inline MetricsReport evaluate_segmentation(const LabelVolume& pred, const LabelVolume& gt,
                                           const FissureAdjacency& adj, int radius) {
  if (pred.shape != gt.shape) throw ParameterError("evaluate_segmentation: shape mismatch");
  const int num_classes = std::max(pred.num_classes, gt.num_classes);
  adj.validate_against(num_classes - 1);

  MetricsReport report;
  for (int c = 1; c < num_classes; ++c) {
    LobeMetrics m;
    m.cls = c;
    const char* canonical = num_classes == 6 ? lobe_name(c) : nullptr;
    m.name = canonical ? canonical : ("lobe" + std::to_string(c));
    const BinaryMask pm = class_mask(pred, c);
    const BinaryMask gm = class_mask(gt, c);
    m.dsc = dsc(pm, gm);
    if (!pm.empty() && !gm.empty()) m.hd95 = hd95(pm, gm);
    report.lobes.push_back(std::move(m));
  }

  LabelVolume pred_for_fissures = pred;
  LabelVolume gt_for_fissures = gt;
  pred_for_fissures.num_classes = num_classes;
  gt_for_fissures.num_classes = num_classes;
  const LabelVolume fp = fissure_gt_from_lobes(pred_for_fissures, radius, adj);
  const LabelVolume fg = fissure_gt_from_lobes(gt_for_fissures, radius, adj);
  for (const FissureEntry& e : adj.entries) {
    FissureMetrics m;
    m.cls = e.fissure_class;
    const char* canonical = adj.num_fissures() == 4 ? fissure_name(e.fissure_class) : nullptr;
    m.name = canonical ? canonical : ("fissure" + std::to_string(e.fissure_class));
    const BinaryMask pm = class_mask(fp, e.fissure_class);
    const BinaryMask gm = class_mask(fg, e.fissure_class);
    if (!pm.empty() && !gm.empty()) m.assd = assd(pm, gm);
    report.fissures.push_back(std::move(m));
  }
  return report;
}

}  // namespace lobeseg
