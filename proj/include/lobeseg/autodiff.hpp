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

// Reverse-mode automatic differentiation over volume-valued expressions.
//
// A Tape records a topologically ordered list of nodes; every node owns its
// forward ChannelVolume (a scalar is a 1-channel 1x1x1 volume) and, after
// backward(), its adjoint of the same layout. The operation set is closed:
// exactly what the segmentation losses, the fissure generation pipeline, the
// registration surrogates and the toy models need, each with an individually
// testable adjoint rule. No broadcasting, no higher-order derivatives.
//
// Determinism: all loops run in the fixed x-fastest linearization order, so
// identical inputs give bitwise identical values and adjoints.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <utility>
#include <vector>

#include "lobeseg/errors.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

struct NodeId {
  std::uint32_t index = 0;
};

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScalarMul,
  kScalarAdd,
  kLog,
  kExp,
  kTanh,
  kOneMinus,
  kSoftmaxChannels,
  kMaxPool3,
  kSelectChannel,
  kConcatChannels,
  kChannelProduct,
  kNormalizeChannels,
  kConv3d,
  kGaussianSmooth,
  kSumAll,
  kMeanAll,
  kL1Norm,
  kDetach,
};

class Tape {
 public:
  // log() clamps its argument at this floor; predicted probabilities can
  // underflow and the loss must stay finite.
  static constexpr double kLogFloor = 1e-12;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- node construction -------------------------------------------------

  NodeId leaf(ChannelVolume v) { return push(OpKind::kLeaf, std::move(v)); }

  NodeId leaf(const ScalarVolume& v) {
    return push(OpKind::kLeaf, ChannelVolume(1, v.shape, v.data));
  }

  /// A constant participates in the forward value but its adjoint is never
  /// read. Recorded as an ordinary leaf.
  NodeId constant(ChannelVolume v) { return leaf(std::move(v)); }
  NodeId constant(const ScalarVolume& v) { return leaf(v); }

  NodeId scalar(double v) { return push(OpKind::kLeaf, scalar_volume(v)); }

  // ---- elementwise -------------------------------------------------------

  NodeId add(NodeId a, NodeId b) {
    return binary(OpKind::kAdd, a, b, [](double x, double y) { return x + y; });
  }

  NodeId sub(NodeId a, NodeId b) {
    return binary(OpKind::kSub, a, b, [](double x, double y) { return x - y; });
  }

  NodeId mul(NodeId a, NodeId b) {
    return binary(OpKind::kMul, a, b, [](double x, double y) { return x * y; });
  }

  NodeId div(NodeId a, NodeId b) {
    return binary(OpKind::kDiv, a, b, [](double x, double y) { return x / y; });
  }

  NodeId scalar_mul(NodeId a, double c) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v *= c;
    return push(OpKind::kScalarMul, std::move(out), a, {}, {}, c);
  }

  NodeId scalar_add(NodeId a, double c) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v += c;
    return push(OpKind::kScalarAdd, std::move(out), a, {}, {}, c);
  }

  /// ln(max(v, kLogFloor)). The adjoint is zero where the floor was active.
  NodeId log(NodeId a) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v = std::log(v > kLogFloor ? v : kLogFloor);
    return push(OpKind::kLog, std::move(out), a);
  }

  NodeId exp(NodeId a) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v = std::exp(v);
    return push(OpKind::kExp, std::move(out), a);
  }

  NodeId tanh(NodeId a) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    return push(OpKind::kTanh, std::move(out), a);
  }

  NodeId one_minus(NodeId a) {
    ChannelVolume out = value(a);
    for (double& v : out.data) v = 1.0 - v;
    return push(OpKind::kOneMinus, std::move(out), a);
  }

  // ---- structural --------------------------------------------------------

  NodeId softmax_channels(NodeId logits) {
    const ChannelVolume& in = value(logits);
    if (in.channels < 2)
      throw ParameterError("softmax_channels: requires >= 2 channels");
    for (double v : in.data)
      if (!std::isfinite(v)) throw NumericError("softmax_channels: non-finite input");
    ChannelVolume out(in.channels, in.shape);
    const std::size_t n = in.voxels();
    for (std::size_t i = 0; i < n; ++i) {
      double m = in.data[i];
      for (int c = 1; c < in.channels; ++c)
        m = std::max(m, in.data[static_cast<std::size_t>(c) * n + i]);
      double sum = 0.0;
      for (int c = 0; c < in.channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(c) * n + i;
        out.data[k] = std::exp(in.data[k] - m);
        sum += out.data[k];
      }
      for (int c = 0; c < in.channels; ++c) out.data[static_cast<std::size_t>(c) * n + i] /= sum;
    }
    return push(OpKind::kSoftmaxChannels, std::move(out), logits);
  }

  /// Per channel, per voxel: maximum over the cubic window of edge
  /// 2*radius+1 with out-of-volume positions counting as 0.0 (valid for
  /// probability maps, and equal to border-clipped binary dilation on 0/1
  /// input). The adjoint routes each output adjoint to the first in-bounds
  /// window position attaining the maximum, scanning x-fastest; if only the
  /// zero padding attains it, the adjoint is dropped.
  NodeId maxpool3(NodeId a, int radius) {
    if (radius < 1) throw ParameterError("maxpool3: radius must be >= 1");
    const ChannelVolume& in = value(a);
    const Shape3& s = in.shape;
    const std::size_t n = s.voxels();
    ChannelVolume out(in.channels, s);
    std::vector<std::int64_t> route(in.total(), -1);
    for (int c = 0; c < in.channels; ++c) {
      const double* src = in.channel(c);
      double* dst = out.channel(c);
      const std::size_t base = static_cast<std::size_t>(c) * n;
      for (int z = 0; z < s.nz; ++z)
        for (int y = 0; y < s.ny; ++y)
          for (int x = 0; x < s.nx; ++x) {
            const bool touches_border =
                x - radius < 0 || x + radius >= s.nx || y - radius < 0 ||
                y + radius >= s.ny || z - radius < 0 || z + radius >= s.nz;
            double best = touches_border ? 0.0 : -std::numeric_limits<double>::infinity();
            for (int dz = -radius; dz <= radius; ++dz) {
              const int zz = z + dz;
              if (zz < 0 || zz >= s.nz) continue;
              for (int dy = -radius; dy <= radius; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= s.ny) continue;
                for (int dx = -radius; dx <= radius; ++dx) {
                  const int xx = x + dx;
                  if (xx < 0 || xx >= s.nx) continue;
                  best = std::max(best, src[s.index(xx, yy, zz)]);
                }
              }
            }
            std::int64_t arg = -1;
            for (int dz = -radius; dz <= radius && arg < 0; ++dz) {
              const int zz = z + dz;
              if (zz < 0 || zz >= s.nz) continue;
              for (int dy = -radius; dy <= radius && arg < 0; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= s.ny) continue;
                for (int dx = -radius; dx <= radius; ++dx) {
                  const int xx = x + dx;
                  if (xx < 0 || xx >= s.nx) continue;
                  if (src[s.index(xx, yy, zz)] == best) {
                    arg = static_cast<std::int64_t>(s.index(xx, yy, zz));
                    break;
                  }
                }
              }
            }
            const std::size_t oi = s.index(x, y, z);
            dst[oi] = best;
            route[base + oi] = arg < 0 ? -1 : arg + static_cast<std::int64_t>(base);
          }
    }
    NodeId id = push(OpKind::kMaxPool3, std::move(out), a, {}, {}, 0.0, radius);
    nodes_[id.index].route = std::move(route);
    return id;
  }

  NodeId select_channel(NodeId a, int c) {
    const ChannelVolume& in = value(a);
    if (c < 0 || c >= in.channels)
      throw ParameterError("select_channel: channel " + std::to_string(c) + " out of range");
    const std::size_t n = in.voxels();
    ChannelVolume out(1, in.shape);
    const double* src = in.channel(c);
    for (std::size_t i = 0; i < n; ++i) out.data[i] = src[i];
    return push(OpKind::kSelectChannel, std::move(out), a, {}, {}, 0.0, c);
  }

  NodeId concat_channels(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ParameterError("concat_channels: no inputs");
    const Shape3 shape = value(parts[0]).shape;
    int channels = 0;
    for (NodeId p : parts) {
      if (value(p).shape != shape)
        throw ParameterError("concat_channels: shape mismatch");
      channels += value(p).channels;
    }
    ChannelVolume out(channels, shape);
    std::size_t off = 0;
    for (NodeId p : parts) {
      const ChannelVolume& v = value(p);
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
      off += v.data.size();
    }
    NodeId id = push(OpKind::kConcatChannels, std::move(out));
    for (NodeId p : parts) nodes_[id.index].in_list.push_back(p.index);
    return id;
  }

  /// Per-voxel product across all channels of the input, producing one channel.
  NodeId channel_product(NodeId a) {
    const ChannelVolume& in = value(a);
    const std::size_t n = in.voxels();
    ChannelVolume out(1, in.shape, 1.0);
    for (int c = 0; c < in.channels; ++c) {
      const double* src = in.channel(c);
      for (std::size_t i = 0; i < n; ++i) out.data[i] *= src[i];
    }
    return push(OpKind::kChannelProduct, std::move(out), a);
  }

  /// Divides each channel by the per-voxel channel sum.
  NodeId normalize_channels(NodeId a) {
    const ChannelVolume& in = value(a);
    const std::size_t n = in.voxels();
    ChannelVolume out(in.channels, in.shape);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (int c = 0; c < in.channels; ++c) sum += in.data[static_cast<std::size_t>(c) * n + i];
      for (int c = 0; c < in.channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(c) * n + i;
        out.data[k] = in.data[k] / sum;
      }
    }
    return push(OpKind::kNormalizeChannels, std::move(out), a);
  }

  /// 3x3x3 convolution with stride 1 and zero padding (same output shape).
  /// Weight layout: `weights` has out_ch*in_ch channels over a 3x3x3 grid,
  /// channel index co*in_ch+ci; `bias` has out_ch channels over 1x1x1.
  /// Differentiable in the input, the weights, and the bias.
  NodeId conv3d(NodeId input, NodeId weights, NodeId bias, int out_ch) {
    const ChannelVolume& x = value(input);
    const ChannelVolume& w = value(weights);
    const ChannelVolume& b = value(bias);
    const int in_ch = x.channels;
    if (w.shape != Shape3(3, 3, 3) || w.channels != out_ch * in_ch)
      throw ParameterError("conv3d: weights must be (out_ch*in_ch) channels of 3x3x3");
    if (b.shape != Shape3(1, 1, 1) || b.channels != out_ch)
      throw ParameterError("conv3d: bias must be out_ch channels of 1x1x1");
    const Shape3& s = x.shape;
    ChannelVolume out(out_ch, s);
    for (int co = 0; co < out_ch; ++co) {
      double* dst = out.channel(co);
      const double bias_v = b.data[co];
      const std::size_t n = s.voxels();
      for (std::size_t i = 0; i < n; ++i) dst[i] = bias_v;
      for (int ci = 0; ci < in_ch; ++ci) {
        const double* src = x.channel(ci);
        const double* ker = w.channel(co * in_ch + ci);
        for (int z = 0; z < s.nz; ++z)
          for (int y = 0; y < s.ny; ++y)
            for (int x0 = 0; x0 < s.nx; ++x0) {
              double acc = 0.0;
              for (int dz = -1; dz <= 1; ++dz) {
                const int zz = z + dz;
                if (zz < 0 || zz >= s.nz) continue;
                for (int dy = -1; dy <= 1; ++dy) {
                  const int yy = y + dy;
                  if (yy < 0 || yy >= s.ny) continue;
                  for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x0 + dx;
                    if (xx < 0 || xx >= s.nx) continue;
                    acc += ker[kernel_index(dx, dy, dz)] * src[s.index(xx, yy, zz)];
                  }
                }
              }
              dst[s.index(x0, y, z)] += acc;
            }
      }
    }
    return push(OpKind::kConv3d, std::move(out), input, weights, bias, 0.0, out_ch);
  }

  /// Separable Gaussian blur per channel: one 1-D pass per axis (x, then y,
  /// then z), kernel truncated at 3*sigma and normalized to sum 1; at the
  /// borders the clipped kernel is renormalized.
  NodeId gaussian_smooth(NodeId a, double sigma) {
    if (!(sigma > 0.0)) throw ParameterError("gaussian_smooth: sigma must be > 0");
    ChannelVolume out = value(a);
    const std::vector<double> kernel = gaussian_kernel(sigma);
    for (int axis = 0; axis < 3; ++axis) smooth_pass(out, kernel, axis, /*adjoint=*/false);
    return push(OpKind::kGaussianSmooth, std::move(out), a, {}, {}, sigma);
  }

  // ---- reductions --------------------------------------------------------

  NodeId sum_all(NodeId a) {
    const ChannelVolume& in = value(a);
    double s = 0.0;
    for (double v : in.data) s += v;
    return push(OpKind::kSumAll, scalar_volume(s), a);
  }

  NodeId mean_all(NodeId a) {
    const ChannelVolume& in = value(a);
    double s = 0.0;
    for (double v : in.data) s += v;
    return push(OpKind::kMeanAll, scalar_volume(s / static_cast<double>(in.total())), a);
  }

  /// Sum of absolute values over all entries. sign(0) is taken as 0 in the
  /// adjoint.
  NodeId l1_norm(NodeId a) {
    const ChannelVolume& in = value(a);
    double s = 0.0;
    for (double v : in.data) s += std::abs(v);
    return push(OpKind::kL1Norm, scalar_volume(s), a);
  }

  /// Identity on the value; stops gradient flow.
  NodeId detach(NodeId a) {
    ChannelVolume out = value(a);
    return push(OpKind::kDetach, std::move(out), a);
  }

  // ---- access ------------------------------------------------------------

  const ChannelVolume& value(NodeId id) const { return nodes_.at(id.index).value; }

  double scalar_value(NodeId id) const {
    const ChannelVolume& v = value(id);
    if (v.total() != 1) throw ContractError("scalar_value: node is not scalar");
    return v.data[0];
  }

  /// Adjoint of a node; valid after backward(). Nodes unreachable from the
  /// root report an all-zero adjoint.
  const ChannelVolume& grad(NodeId id) const {
    if (!ran_backward_) throw ContractError("grad: backward() has not run");
    const Node& nd = nodes_.at(id.index);
    if (nd.grad.total() == 0)
      nd.grad = ChannelVolume(nd.value.channels, nd.value.shape, 0.0);
    return nd.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- backward ----------------------------------------------------------

  /// Reverse sweep from a scalar root; fills leaf adjoints. One backward per
  /// tape.
  void backward(NodeId root) {
    if (ran_backward_) throw ContractError("backward: tape already consumed");
    Node& r = nodes_.at(root.index);
    if (r.value.total() != 1)
      throw ContractError("backward: root must be scalar-valued");
    ensure_grad(root.index).data[0] = 1.0;
    for (std::uint32_t i = root.index + 1; i-- > 0;) {
      Node& nd = nodes_[i];
      if (nd.grad.total() == 0) continue;  // not reached from the root
      propagate(nd);
    }
    ran_backward_ = true;
  }

 private:
  struct Node {
    OpKind kind;
    std::array<std::uint32_t, 3> in{};
    std::uint8_t n_in = 0;
    double darg = 0.0;
    int iarg = 0;
    ChannelVolume value;
    mutable ChannelVolume grad;         // empty until reached in backward
    std::vector<std::uint32_t> in_list; // concat only
    std::vector<std::int64_t> route;    // maxpool only
  };

  static ChannelVolume scalar_volume(double v) {
    ChannelVolume out(1, Shape3(1, 1, 1));
    out.data[0] = v;
    return out;
  }

  static std::size_t kernel_index(int dx, int dy, int dz) {
    return static_cast<std::size_t>((dx + 1) + 3 * ((dy + 1) + 3 * (dz + 1)));
  }

  static std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
      k[t + radius] = std::exp(-0.5 * (t * t) / (sigma * sigma));
      sum += k[t + radius];
    }
    for (double& v : k) v /= sum;
    return k;
  }

  // One 1-D renormalized-border pass along `axis`. The forward map is
  // out[i] = sum_t k[t] in[i+t] / W[i] with W[i] the in-bounds kernel mass;
  // its matrix transpose (needed by backward) is out[j] = sum_t k[t] g[j+t]
  // with g pre-divided by W, which is what adjoint=true computes.
  static void smooth_pass(ChannelVolume& v, const std::vector<double>& kernel, int axis,
                          bool adjoint) {
    const Shape3& s = v.shape;
    const int n[3] = {s.nx, s.ny, s.nz};
    const int radius = (static_cast<int>(kernel.size()) - 1) / 2;
    const int len = n[axis];

    std::vector<double> weight(len);
    for (int i = 0; i < len; ++i) {
      double w = 0.0;
      for (int t = -radius; t <= radius; ++t)
        if (i + t >= 0 && i + t < len) w += kernel[t + radius];
      weight[i] = w;
    }

    std::vector<double> line(len), tmp(len);
    for (int c = 0; c < v.channels; ++c) {
      double* ch = v.channel(c);
      const int nu = axis == 0 ? s.ny : s.nx;
      const int nv = axis == 2 ? s.ny : s.nz;
      for (int b = 0; b < nv; ++b)
        for (int a = 0; a < nu; ++a) {
          for (int i = 0; i < len; ++i) line[i] = ch[line_index(s, axis, a, b, i)];
          if (adjoint)
            for (int i = 0; i < len; ++i) line[i] /= weight[i];
          for (int i = 0; i < len; ++i) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
              const int j = i + t;
              if (j < 0 || j >= len) continue;
              acc += kernel[t + radius] * line[j];
            }
            tmp[i] = adjoint ? acc : acc / weight[i];
          }
          for (int i = 0; i < len; ++i) ch[line_index(s, axis, a, b, i)] = tmp[i];
        }
    }
  }

  static std::size_t line_index(const Shape3& s, int axis, int a, int b, int i) {
    switch (axis) {
      case 0: return s.index(i, a, b);
      case 1: return s.index(a, i, b);
      default: return s.index(a, b, i);
    }
  }

  NodeId push(OpKind kind, ChannelVolume value, NodeId a = {}, NodeId b = {}, NodeId c = {},
              double darg = 0.0, int iarg = 0) {
    if (ran_backward_) throw ContractError("Tape: cannot record after backward()");
    Node nd;
    nd.kind = kind;
    nd.darg = darg;
    nd.iarg = iarg;
    nd.value = std::move(value);
    if (kind != OpKind::kLeaf) {
      nd.in[0] = a.index;
      nd.n_in = 1;
      if (kind == OpKind::kAdd || kind == OpKind::kSub || kind == OpKind::kMul ||
          kind == OpKind::kDiv) {
        nd.in[1] = b.index;
        nd.n_in = 2;
      } else if (kind == OpKind::kConv3d) {
        nd.in[1] = b.index;
        nd.in[2] = c.index;
        nd.n_in = 3;
      }
    }
    nodes_.push_back(std::move(nd));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  template <class Fn>
  NodeId binary(OpKind kind, NodeId a, NodeId b, Fn f) {
    const ChannelVolume& va = value(a);
    const ChannelVolume& vb = value(b);
    if (!va.same_layout(vb)) throw ParameterError("elementwise op: layout mismatch");
    ChannelVolume out(va.channels, va.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(va.data[i], vb.data[i]);
    return push(kind, std::move(out), a, b);
  }

  ChannelVolume& ensure_grad(std::uint32_t idx) {
    Node& nd = nodes_[idx];
    if (nd.grad.total() == 0) nd.grad = ChannelVolume(nd.value.channels, nd.value.shape, 0.0);
    return nd.grad;
  }

  void propagate(Node& nd) {
    const ChannelVolume& g = nd.grad;
    switch (nd.kind) {
      case OpKind::kLeaf:
      case OpKind::kDetach:
        break;
      case OpKind::kAdd: {
        auto& ga = ensure_grad(nd.in[0]);
        auto& gb = ensure_grad(nd.in[1]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] += g.data[i];
        }
        break;
      }
      case OpKind::kSub: {
        auto& ga = ensure_grad(nd.in[0]);
        auto& gb = ensure_grad(nd.in[1]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i];
          gb.data[i] -= g.data[i];
        }
        break;
      }
      case OpKind::kMul: {
        const auto& va = nodes_[nd.in[0]].value;
        const auto& vb = nodes_[nd.in[1]].value;
        auto& ga = ensure_grad(nd.in[0]);
        auto& gb = ensure_grad(nd.in[1]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i] * vb.data[i];
          gb.data[i] += g.data[i] * va.data[i];
        }
        break;
      }
      case OpKind::kDiv: {
        const auto& va = nodes_[nd.in[0]].value;
        const auto& vb = nodes_[nd.in[1]].value;
        auto& ga = ensure_grad(nd.in[0]);
        auto& gb = ensure_grad(nd.in[1]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          ga.data[i] += g.data[i] / vb.data[i];
          gb.data[i] -= g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
        }
        break;
      }
      case OpKind::kScalarMul: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += nd.darg * g.data[i];
        break;
      }
      case OpKind::kScalarAdd: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
        break;
      }
      case OpKind::kLog: {
        const auto& va = nodes_[nd.in[0]].value;
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          if (va.data[i] > kLogFloor) ga.data[i] += g.data[i] / va.data[i];
        break;
      }
      case OpKind::kExp: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * nd.value.data[i];
        break;
      }
      case OpKind::kTanh: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * (1.0 - nd.value.data[i] * nd.value.data[i]);
        break;
      }
      case OpKind::kOneMinus: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] -= g.data[i];
        break;
      }
      case OpKind::kSoftmaxChannels: {
        const ChannelVolume& y = nd.value;
        auto& ga = ensure_grad(nd.in[0]);
        const std::size_t n = y.voxels();
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (int c = 0; c < y.channels; ++c) {
            const std::size_t k = static_cast<std::size_t>(c) * n + i;
            dot += g.data[k] * y.data[k];
          }
          for (int c = 0; c < y.channels; ++c) {
            const std::size_t k = static_cast<std::size_t>(c) * n + i;
            ga.data[k] += y.data[k] * (g.data[k] - dot);
          }
        }
        break;
      }
      case OpKind::kMaxPool3: {
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
          const std::int64_t r = nd.route[i];
          if (r >= 0) ga.data[static_cast<std::size_t>(r)] += g.data[i];
        }
        break;
      }
      case OpKind::kSelectChannel: {
        auto& ga = ensure_grad(nd.in[0]);
        const std::size_t n = nd.value.voxels();
        const std::size_t off = static_cast<std::size_t>(nd.iarg) * n;
        for (std::size_t i = 0; i < n; ++i) ga.data[off + i] += g.data[i];
        break;
      }
      case OpKind::kConcatChannels: {
        std::size_t off = 0;
        for (std::uint32_t src : nd.in_list) {
          auto& ga = ensure_grad(src);
          for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += g.data[off + i];
          off += ga.data.size();
        }
        break;
      }
      case OpKind::kChannelProduct: {
        const auto& va = nodes_[nd.in[0]].value;
        auto& ga = ensure_grad(nd.in[0]);
        const std::size_t n = va.voxels();
        const int C = va.channels;
        // Prefix/suffix products per voxel: exact at zeros, no division.
        std::vector<double> pre(C + 1), suf(C + 1);
        for (std::size_t i = 0; i < n; ++i) {
          pre[0] = 1.0;
          for (int c = 0; c < C; ++c)
            pre[c + 1] = pre[c] * va.data[static_cast<std::size_t>(c) * n + i];
          suf[C] = 1.0;
          for (int c = C; c-- > 0;)
            suf[c] = suf[c + 1] * va.data[static_cast<std::size_t>(c) * n + i];
          for (int c = 0; c < C; ++c)
            ga.data[static_cast<std::size_t>(c) * n + i] += g.data[i] * pre[c] * suf[c + 1];
        }
        break;
      }
      case OpKind::kNormalizeChannels: {
        const auto& va = nodes_[nd.in[0]].value;
        const ChannelVolume& y = nd.value;
        auto& ga = ensure_grad(nd.in[0]);
        const std::size_t n = va.voxels();
        for (std::size_t i = 0; i < n; ++i) {
          double sum = 0.0, dot = 0.0;
          for (int c = 0; c < va.channels; ++c) {
            const std::size_t k = static_cast<std::size_t>(c) * n + i;
            sum += va.data[k];
            dot += g.data[k] * y.data[k];
          }
          for (int c = 0; c < va.channels; ++c) {
            const std::size_t k = static_cast<std::size_t>(c) * n + i;
            ga.data[k] += (g.data[k] - dot) / sum;
          }
        }
        break;
      }
      case OpKind::kConv3d: {
        const auto& x = nodes_[nd.in[0]].value;
        const auto& w = nodes_[nd.in[1]].value;
        auto& gx = ensure_grad(nd.in[0]);
        auto& gw = ensure_grad(nd.in[1]);
        auto& gb = ensure_grad(nd.in[2]);
        const Shape3& s = x.shape;
        const int out_ch = nd.iarg;
        const int in_ch = x.channels;
        const std::size_t n = s.voxels();
        for (int co = 0; co < out_ch; ++co) {
          const double* gout = g.channel(co);
          double bsum = 0.0;
          for (std::size_t i = 0; i < n; ++i) bsum += gout[i];
          gb.data[co] += bsum;
          for (int ci = 0; ci < in_ch; ++ci) {
            const double* src = x.channel(ci);
            const double* ker = w.channel(co * in_ch + ci);
            double* gsrc = gx.channel(ci);
            double* gker = gw.channel(co * in_ch + ci);
            for (int z = 0; z < s.nz; ++z)
              for (int y = 0; y < s.ny; ++y)
                for (int x0 = 0; x0 < s.nx; ++x0) {
                  const double gv = gout[s.index(x0, y, z)];
                  if (gv == 0.0) continue;
                  for (int dz = -1; dz <= 1; ++dz) {
                    const int zz = z + dz;
                    if (zz < 0 || zz >= s.nz) continue;
                    for (int dy = -1; dy <= 1; ++dy) {
                      const int yy = y + dy;
                      if (yy < 0 || yy >= s.ny) continue;
                      for (int dx = -1; dx <= 1; ++dx) {
                        const int xx = x0 + dx;
                        if (xx < 0 || xx >= s.nx) continue;
                        const std::size_t si = s.index(xx, yy, zz);
                        const std::size_t ki = kernel_index(dx, dy, dz);
                        gsrc[si] += gv * ker[ki];
                        gker[ki] += gv * src[si];
                      }
                    }
                  }
                }
          }
        }
        break;
      }
      case OpKind::kGaussianSmooth: {
        ChannelVolume gt = g;
        const std::vector<double> kernel = gaussian_kernel(nd.darg);
        for (int axis = 2; axis >= 0; --axis) smooth_pass(gt, kernel, axis, /*adjoint=*/true);
        auto& ga = ensure_grad(nd.in[0]);
        for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gt.data[i];
        break;
      }
      case OpKind::kSumAll: {
        auto& ga = ensure_grad(nd.in[0]);
        const double gv = g.data[0];
        for (double& v : ga.data) v += gv;
        break;
      }
      case OpKind::kMeanAll: {
        auto& ga = ensure_grad(nd.in[0]);
        const double gv = g.data[0] / static_cast<double>(ga.data.size());
        for (double& v : ga.data) v += gv;
        break;
      }
      case OpKind::kL1Norm: {
        const auto& va = nodes_[nd.in[0]].value;
        auto& ga = ensure_grad(nd.in[0]);
        const double gv = g.data[0];
        for (std::size_t i = 0; i < ga.data.size(); ++i) {
          if (va.data[i] > 0.0)
            ga.data[i] += gv;
          else if (va.data[i] < 0.0)
            ga.data[i] -= gv;
        }
        break;
      }
    }
  }

  // Deque keeps references from value()/grad() stable while new nodes are
  // recorded.
  std::deque<Node> nodes_;
  bool ran_backward_ = false;
};

}  // namespace lobeseg
