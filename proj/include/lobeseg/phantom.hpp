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

// Synthetic five-lobe lung phantoms. The volume is split into a left half
// (x < nx/2) holding LU/LL and a right half holding RU/RM/RL; quadratic
// height fields z = h(x, y) act as the fissure surfaces. The right middle
// lobe pinches out where the two right surfaces approach, so the RU-RL
// contact band (the fourth fissure class) exists just as it does when a
// dilated-intersection fissure map is built from clinical lobe masks.
//
// The image is a flat lung intensity with a brighter one-voxel band along
// each surface; a seeded fraction of each band's (x, y) columns can be
// "incomplete" (contrast removed, labels untouched), plus optional Gaussian
// noise. Everything is deterministic given the spec.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lobeseg/errors.hpp"
#include "lobeseg/rng.hpp"
#include "lobeseg/volume.hpp"
#include "lobeseg/vvol_io.hpp"

namespace lobeseg {

struct QuadraticSurface {
  double a = 0.0, bx = 0.0, by = 0.0, cxx = 0.0, cxy = 0.0, cyy = 0.0;

  double height(double x, double y) const {
    return a + bx * x + by * y + cxx * x * x + cxy * x * y + cyy * y * y;
  }

  /// Builds raw-coordinate coefficients from normalized ones: h = nz * (k0 +
  /// k1*u + k2*v + k3*u^2 + k4*u*v + k5*v^2) with u = (x-mx)/nx, v = (y-my)/ny.
  static QuadraticSurface from_normalized(const double k[6], double mx, double my, int nx,
                                          int ny, int nz) {
    const double px = 1.0 / nx, py = 1.0 / ny;
    const double qx = mx / nx, qy = my / ny;
    QuadraticSurface s;
    s.a = nz * (k[0] - k[1] * qx - k[2] * qy + k[3] * qx * qx + k[4] * qx * qy +
                k[5] * qy * qy);
    s.bx = nz * (k[1] * px - 2.0 * k[3] * px * qx - k[4] * px * qy);
    s.by = nz * (k[2] * py - 2.0 * k[5] * py * qy - k[4] * py * qx);
    s.cxx = nz * k[3] * px * px;
    s.cxy = nz * k[4] * px * py;
    s.cyy = nz * k[5] * py * py;
    return s;
  }
};

struct PhantomSpec {
  Shape3 shape{32, 32, 32};
  std::uint64_t seed = 0;
  QuadraticSurface left_oblique;   // LU | LL separator (left half)
  QuadraticSurface right_upper;    // RU | RM separator (right half)
  QuadraticSurface right_lower;    // RM | RL separator (right half)
  double incompleteness = 0.0;     // fraction of band columns losing contrast
  double noise_sigma = 0.0;
  double fissure_contrast = 0.3;

  static constexpr double kBaseIntensity = 0.2;

  static PhantomSpec default_for(Shape3 shape, std::uint64_t seed = 0) {
    PhantomSpec spec;
    spec.shape = shape;
    spec.seed = seed;
    const int nx = shape.nx, ny = shape.ny, nz = shape.nz;
    // The upper-right separator dives below the lower one toward high y, so
    // the middle lobe pinches out and an RU-RL contact band exists.
    const double k_lof[6] = {0.52, 0.10, 0.22, 0.25, 0.05, -0.15};
    const double k_up[6] = {0.62, 0.05, -0.50, 0.10, 0.03, -0.06};
    const double k_lo[6] = {0.34, -0.05, 0.12, 0.10, -0.02, 0.04};
    spec.left_oblique =
        QuadraticSurface::from_normalized(k_lof, 0.25 * nx, 0.5 * ny, nx, ny, nz);
    spec.right_upper =
        QuadraticSurface::from_normalized(k_up, 0.75 * nx, 0.5 * ny, nx, ny, nz);
    spec.right_lower =
        QuadraticSurface::from_normalized(k_lo, 0.75 * nx, 0.5 * ny, nx, ny, nz);
    return spec;
  }

  bool is_left(int x) const { return x < shape.nx / 2.0; }

  /// Every surface must stay inside [1, nz-1] over its half of the grid so
  /// that no lobe collapses to nothing and bands remain in bounds.
  void validate() const {
    if (incompleteness < 0.0 || incompleteness > 1.0)
      throw ParameterError("PhantomSpec: incompleteness must be in [0,1]");
    if (noise_sigma < 0.0) throw ParameterError("PhantomSpec: noise_sigma must be >= 0");
    auto check = [&](const QuadraticSurface& s, bool left, const char* name) {
      for (int y = 0; y < shape.ny; ++y)
        for (int x = 0; x < shape.nx; ++x) {
          if (is_left(x) != left) continue;
          const double h = s.height(x, y);
          if (!(h >= 1.0 && h <= shape.nz - 1.0))
            throw ParameterError(std::string("PhantomSpec: surface ") + name +
                                 " leaves the volume at column (" + std::to_string(x) + "," +
                                 std::to_string(y) + "): h=" + std::to_string(h));
        }
    };
    check(left_oblique, true, "left_oblique");
    check(right_upper, false, "right_upper");
    check(right_lower, false, "right_lower");
  }

  nlohmann::ordered_json to_json() const {
    auto surf = [](const QuadraticSurface& s) {
      nlohmann::ordered_json j;
      j["a"] = s.a;
      j["bx"] = s.bx;
      j["by"] = s.by;
      j["cxx"] = s.cxx;
      j["cxy"] = s.cxy;
      j["cyy"] = s.cyy;
      return j;
    };
    nlohmann::ordered_json j;
    j["dims"] = {shape.nx, shape.ny, shape.nz};
    j["seed"] = seed;
    j["incompleteness"] = incompleteness;
    j["noise_sigma"] = noise_sigma;
    j["fissure_contrast"] = fissure_contrast;
    j["surfaces"]["left_oblique"] = surf(left_oblique);
    j["surfaces"]["right_upper"] = surf(right_upper);
    j["surfaces"]["right_lower"] = surf(right_lower);
    return j;
  }
};

struct PhantomCase {
  ScalarVolume image;  // in [0,1]
  LabelVolume lobes;   // classes 0..5 (0 unused by construction: lung fills the grid)
};

inline int phantom_label(const PhantomSpec& spec, int x, int y, int z) {
  if (spec.is_left(x)) return z >= spec.left_oblique.height(x, y) ? 1 : 2;
  if (z >= spec.right_upper.height(x, y)) return 3;
  if (z >= spec.right_lower.height(x, y)) return 4;
  return 5;
}

inline PhantomCase generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const Shape3& s = spec.shape;

  LabelVolume lobes(s, 6);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x)
        lobes.at(x, y, z) = static_cast<std::uint8_t>(phantom_label(spec, x, y, z));

  ScalarVolume image(s, PhantomSpec::kBaseIntensity);
  Rng rng(spec.seed);
  Rng removal_rng = rng.fork(1);
  Rng noise_rng = rng.fork(2);

  struct Band {
    const QuadraticSurface* surface;
    bool left;
  };
  const Band bands[3] = {{&spec.left_oblique, true},
                         {&spec.right_upper, false},
                         {&spec.right_lower, false}};
  for (const Band& band : bands) {
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        if (spec.is_left(x) != band.left) continue;
        const bool removed = removal_rng.uniform01() < spec.incompleteness;
        if (removed) continue;
        const int zb = static_cast<int>(std::llround(band.surface->height(x, y)));
        if (zb >= 0 && zb < s.nz)
          image.at(x, y, zb) = PhantomSpec::kBaseIntensity + spec.fissure_contrast;
      }
  }

  if (spec.noise_sigma > 0.0)
    for (double& v : image.data)
      v = std::clamp(v + noise_rng.normal(0.0, spec.noise_sigma), 0.0, 1.0);

  return PhantomCase{std::move(image), std::move(lobes)};
}

/// Jitters the template's surfaces with the case seed. Magnitudes are small
/// relative to the volume so jittered surfaces stay valid.
inline PhantomSpec jitter_spec(const PhantomSpec& tpl, std::uint64_t case_seed) {
  PhantomSpec spec = tpl;
  spec.seed = case_seed;
  Rng rng = Rng(case_seed).fork(7);
  const double nx = tpl.shape.nx, ny = tpl.shape.ny, nz = tpl.shape.nz;
  auto jitter = [&](QuadraticSurface& q) {
    q.a += rng.uniform(-1.0, 1.0) * 0.015 * nz;
    q.bx += rng.uniform(-1.0, 1.0) * 0.02 * nz / nx;
    q.by += rng.uniform(-1.0, 1.0) * 0.02 * nz / ny;
    q.cxx += rng.uniform(-1.0, 1.0) * 0.01 * nz / (nx * nx);
    q.cxy += rng.uniform(-1.0, 1.0) * 0.01 * nz / (nx * ny);
    q.cyy += rng.uniform(-1.0, 1.0) * 0.01 * nz / (ny * ny);
  };
  jitter(spec.left_oblique);
  jitter(spec.right_upper);
  jitter(spec.right_lower);
  return spec;
}

/// Case k draws seed base_seed+k and a jittered copy of the template's
/// surfaces. With a non-empty out_dir, writes case_<k>_img.vvol and
/// case_<k>_lab.vvol per case.
inline std::vector<PhantomCase> generate_dataset(const PhantomSpec& tpl, int n_cases,
                                                 std::uint64_t base_seed,
                                                 const std::string& out_dir = "") {
  if (n_cases < 1) throw ParameterError("generate_dataset: n_cases must be >= 1");
  std::vector<PhantomCase> cases;
  cases.reserve(n_cases);
  for (int k = 0; k < n_cases; ++k) {
    const PhantomSpec spec = jitter_spec(tpl, base_seed + static_cast<std::uint64_t>(k));
    cases.push_back(generate_phantom(spec));
    if (!out_dir.empty()) {
      const std::string stem = out_dir + "/case_" + std::to_string(k);
      write_volume(stem + "_img.vvol", cases.back().image);
      write_volume(stem + "_lab.vvol", cases.back().lobes);
    }
  }
  return cases;
}

}  // namespace lobeseg
