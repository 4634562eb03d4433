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

// Deterministic differentiable registration operators. Each one maps a
// (moving, fixed) image pair to a 3-channel displacement field in voxel
// units, differentiable with respect to the moving image.
//
// Two kinds:
//   demons      - K iterations of the classic demons force, Gaussian
//                 smoothed. phi(A, A) is exactly zero, so its
//                 self-registration offset vanishes.
//   seeded-conv - a frozen random two-layer 3x3x3 conv stack over the
//                 (moving, fixed) pair. phi(A, A) is generally nonzero,
//                 which exercises the self-registration offset path.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lobeseg/autodiff.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/rng.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

enum class RegistrationKind { demons, seeded_conv };

struct RegistrationConfig {
  RegistrationKind kind = RegistrationKind::demons;
  int iterations = 3;    // demons
  double sigma = 1.0;    // demons
  std::uint64_t seed = 0;  // seeded-conv
};

namespace detail {

/// Central differences of the fixed image per axis, borders clamped to the
/// edge sample: g[0] = (f[1]-f[0])/2, g[n-1] = (f[n-1]-f[n-2])/2.
inline ChannelVolume central_gradient(const ScalarVolume& f) {
  const Shape3& s = f.shape;
  ChannelVolume g(3, s, 0.0);
  for (int z = 0; z < s.nz; ++z)
    for (int y = 0; y < s.ny; ++y)
      for (int x = 0; x < s.nx; ++x) {
        const std::size_t i = s.index(x, y, z);
        const auto clamped = [&](int xx, int yy, int zz) {
          xx = std::clamp(xx, 0, s.nx - 1);
          yy = std::clamp(yy, 0, s.ny - 1);
          zz = std::clamp(zz, 0, s.nz - 1);
          return f.data[s.index(xx, yy, zz)];
        };
        g.channel(0)[i] = 0.5 * (clamped(x + 1, y, z) - clamped(x - 1, y, z));
        g.channel(1)[i] = 0.5 * (clamped(x, y + 1, z) - clamped(x, y - 1, z));
        g.channel(2)[i] = 0.5 * (clamped(x, y, z + 1) - clamped(x, y, z - 1));
      }
  return g;
}

}  // namespace detail

/// Demons update, K accumulations of the smoothed force
///   F = (m - f) * grad(f) / (|grad f|^2 + (m - f)^2 + eps),  eps = 1e-6,
/// with central-difference gradients of the fixed image. The force does not
/// feed back into itself, so the result is the step-by-step sum of K equal
/// smoothed increments, all on-tape with respect to the moving image.
inline NodeId demons_register(Tape& tape, NodeId moving, const ScalarVolume& fixed,
                              int iterations = 3, double sigma = 1.0) {
  constexpr double kEps = 1e-6;
  if (iterations < 1) throw ParameterError("demons_register: iterations must be >= 1");
  if (!(sigma > 0.0)) throw ParameterError("demons_register: sigma must be > 0");
  const ChannelVolume& m = tape.value(moving);
  if (m.channels != 1) throw ParameterError("demons_register: moving must be single-channel");
  if (m.shape != fixed.shape)
    throw ParameterError("demons_register: shape mismatch " + m.shape.str() + " vs " +
                         fixed.shape.str());

  const ChannelVolume grad_f = detail::central_gradient(fixed);
  ScalarVolume grad_mag2(fixed.shape);
  for (std::size_t i = 0; i < grad_mag2.data.size(); ++i) {
    const double gx = grad_f.channel(0)[i];
    const double gy = grad_f.channel(1)[i];
    const double gz = grad_f.channel(2)[i];
    grad_mag2.data[i] = gx * gx + gy * gy + gz * gz;
  }

  NodeId f_node = tape.constant(fixed);
  NodeId diff = tape.sub(moving, f_node);
  NodeId denom =
      tape.scalar_add(tape.add(tape.constant(grad_mag2), tape.mul(diff, diff)), kEps);

  std::vector<NodeId> force_axes;
  force_axes.reserve(3);
  for (int axis = 0; axis < 3; ++axis) {
    ChannelVolume ga(1, fixed.shape);
    for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] = grad_f.channel(axis)[i];
    force_axes.push_back(tape.div(tape.mul(diff, tape.constant(std::move(ga))), denom));
  }
  NodeId step = tape.gaussian_smooth(tape.concat_channels(force_axes), sigma);

  NodeId field = step;
  for (int k = 1; k < iterations; ++k) field = tape.add(field, step);
  return field;
}

/// Frozen random registration net: two 3x3x3 conv layers (hidden width 8,
/// tanh) over the stacked (moving, fixed) pair, weights drawn once from the
/// seed. Differentiable in the moving image; weights never train.
class SeededConvRegistration {
 public:
  explicit SeededConvRegistration(std::uint64_t seed) {
    Rng rng(seed);
    w1_ = random_kernel(rng, kHidden, 2);
    b1_ = random_bias(rng, kHidden);
    w2_ = random_kernel(rng, 3, kHidden);
    b2_ = random_bias(rng, 3);
  }

  NodeId run(Tape& tape, NodeId moving, const ScalarVolume& fixed) const {
    const ChannelVolume& m = tape.value(moving);
    if (m.channels != 1)
      throw ParameterError("conv_register: moving must be single-channel");
    if (m.shape != fixed.shape)
      throw ParameterError("conv_register: shape mismatch " + m.shape.str() + " vs " +
                           fixed.shape.str());
    NodeId x = tape.concat_channels({moving, tape.constant(fixed)});
    NodeId h = tape.tanh(tape.conv3d(x, tape.constant(w1_), tape.constant(b1_), kHidden));
    return tape.conv3d(h, tape.constant(w2_), tape.constant(b2_), 3);
  }

 private:
  static constexpr int kHidden = 8;

  static ChannelVolume random_kernel(Rng& rng, int out_ch, int in_ch) {
    const double scale = std::sqrt(1.0 / (in_ch * 27.0));
    ChannelVolume w(out_ch * in_ch, Shape3(3, 3, 3));
    for (double& v : w.data) v = rng.uniform(-scale, scale);
    return w;
  }

  static ChannelVolume random_bias(Rng& rng, int out_ch) {
    ChannelVolume b(out_ch, Shape3(1, 1, 1));
    for (double& v : b.data) v = rng.uniform(-0.05, 0.05);
    return b;
  }

  ChannelVolume w1_, b1_, w2_, b2_;
};

/// Operator facade selected by the run config. Immutable after construction;
/// identical inputs and parameters give bitwise identical fields.
class RegistrationOperator {
 public:
  explicit RegistrationOperator(RegistrationConfig cfg) : cfg_(cfg) {
    if (cfg_.kind == RegistrationKind::seeded_conv)
      conv_.emplace(cfg_.seed);
    else if (cfg_.iterations < 1 || !(cfg_.sigma > 0.0))
      throw ParameterError("RegistrationOperator: demons needs iterations >= 1, sigma > 0");
  }

  static RegistrationOperator demons(int iterations = 3, double sigma = 1.0) {
    RegistrationConfig c;
    c.kind = RegistrationKind::demons;
    c.iterations = iterations;
    c.sigma = sigma;
    return RegistrationOperator(c);
  }

  static RegistrationOperator seeded_conv(std::uint64_t seed) {
    RegistrationConfig c;
    c.kind = RegistrationKind::seeded_conv;
    c.seed = seed;
    return RegistrationOperator(c);
  }

  const RegistrationConfig& config() const { return cfg_; }

  /// Displacement field of (moving, fixed), recorded on the caller's tape.
  NodeId displacement(Tape& tape, NodeId moving, const ScalarVolume& fixed) const {
    if (cfg_.kind == RegistrationKind::demons)
      return demons_register(tape, moving, fixed, cfg_.iterations, cfg_.sigma);
    return conv_->run(tape, moving, fixed);
  }

  /// Same computation on a scratch tape; bitwise identical to the on-tape
  /// path by construction. Used to cache self-registration fields.
  ChannelVolume displacement_plain(const ScalarVolume& moving,
                                   const ScalarVolume& fixed) const {
    Tape tape;
    NodeId m = tape.leaf(moving);
    NodeId out = displacement(tape, m, fixed);
    return tape.value(out);
  }

 private:
  RegistrationConfig cfg_;
  std::optional<SeededConvRegistration> conv_;
};

}  // namespace lobeseg
