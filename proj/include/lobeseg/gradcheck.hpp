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

// Finite-difference verification of every differentiable loss and operator.
// The checker rebuilds the forward graph from scratch for each perturbed
// input, so it is independent of the adjoint rules it validates.
//
// Central differences at h = 1e-6 cannot resolve gradient entries that sit
// on a kink or are vanishingly small, so instance generation rejects
// candidates that violate the margins:
//   - pooled windows need a top-two gap >= 1e-3 (max-pool ties),
//   - probabilities must stay >= 1e-3 (log floor),
//   - registration field deviations must be exactly 0 or >= 1e-3 in
//     magnitude (L1 kink),
//   - nonzero analytic entries must be >= 1e-4 (FD resolution at h = 1e-6).
// Rejected seeds advance deterministically, so a (op, trials, seed) triple
// always checks the same instances.

#include <functional>
#include <string>
#include <vector>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/autodiff.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/fgm.hpp"
#include "lobeseg/losses.hpp"
#include "lobeseg/morphology.hpp"
#include "lobeseg/registration.hpp"
#include "lobeseg/rng.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

struct FdResult {
  double max_rel_err = 0.0;
  std::size_t worst_entry = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using GraphBuilder = std::function<NodeId(Tape&, NodeId leaf)>;

inline double eval_scalar(const ChannelVolume& x, const GraphBuilder& build) {
  Tape tape;
  NodeId leaf = tape.leaf(x);
  return tape.scalar_value(build(tape, leaf));
}

/// Compares the tape adjoint of `build`'s scalar output against central
/// finite differences over every entry of the leaf.
inline FdResult finite_difference_check(const ChannelVolume& x0, const GraphBuilder& build,
                                        double h = 1e-6) {
  Tape tape;
  NodeId leaf = tape.leaf(x0);
  NodeId root = build(tape, leaf);
  tape.backward(root);
  const ChannelVolume analytic = tape.grad(leaf);

  FdResult result;
  ChannelVolume x = x0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double orig = x.data[i];
    x.data[i] = orig + h;
    const double fp = eval_scalar(x, build);
    x.data[i] = orig - h;
    const double fm = eval_scalar(x, build);
    x.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data[i];
    const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-8);
    if (rel > result.max_rel_err) {
      result.max_rel_err = rel;
      result.worst_entry = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  return result;
}

/// Analytic gradient of the leaf for margin screening.
inline ChannelVolume analytic_gradient(const ChannelVolume& x0, const GraphBuilder& build) {
  Tape tape;
  NodeId leaf = tape.leaf(x0);
  tape.backward(build(tape, leaf));
  return tape.grad(leaf);
}

namespace gradcheck_detail {

constexpr double kTieMargin = 1e-3;
constexpr double kMinResolvableGrad = 1e-5;
// |field - offset| entries this close to the |.| kink (but nonzero) can flip
// sign under the h = 1e-6 probe; their per-entry sensitivity is well below
// 1e-2, so 1e-5 clears the crossing zone with an order of magnitude to spare.
constexpr double kFieldKinkMargin = 1e-5;

/// Smallest top-two window gap of a max-pool over this volume; the zero
/// padding counts as a candidate value at clipped windows.
inline double min_pool_gap(const ChannelVolume& v, int radius) {
  const Shape3& s = v.shape;
  double min_gap = std::numeric_limits<double>::infinity();
  for (int c = 0; c < v.channels; ++c) {
    const double* src = v.channel(c);
    for (int z = 0; z < s.nz; ++z)
      for (int y = 0; y < s.ny; ++y)
        for (int x = 0; x < s.nx; ++x) {
          double best = -std::numeric_limits<double>::infinity();
          double second = -std::numeric_limits<double>::infinity();
          auto feed = [&](double val) {
            if (val > best) {
              second = best;
              best = val;
            } else if (val > second) {
              second = val;
            }
          };
          bool clipped = false;
          for (int dz = -radius; dz <= radius; ++dz)
            for (int dy = -radius; dy <= radius; ++dy)
              for (int dx = -radius; dx <= radius; ++dx) {
                const int xx = x + dx, yy = y + dy, zz = z + dz;
                if (!s.contains(xx, yy, zz)) {
                  clipped = true;
                  continue;
                }
                feed(src[s.index(xx, yy, zz)]);
              }
          if (clipped) feed(0.0);
          if (second > -std::numeric_limits<double>::infinity())
            min_gap = std::min(min_gap, best - second);
        }
  }
  return min_gap;
}

/// Every entry resolvable by central differences, and at least one nonzero
/// (an identically flat instance would verify nothing).
inline bool grads_resolvable(const ChannelVolume& g) {
  bool any = false;
  for (double v : g.data) {
    const double a = std::abs(v);
    if (a != 0.0 && a < kMinResolvableGrad) return false;
    any = any || a != 0.0;
  }
  return any;
}

/// Entries of a registration field deviation must be far from the |.| kink
/// or identically zero.
inline bool field_diff_ok(const ChannelVolume& diff) {
  for (double v : diff.data) {
    const double a = std::abs(v);
    if (a != 0.0 && a < kFieldKinkMargin) return false;
  }
  return true;
}

inline ChannelVolume softmax_plain(const ChannelVolume& logits) {
  Tape t;
  return t.value(t.softmax_channels(t.leaf(logits)));
}

}  // namespace gradcheck_detail

/// One randomized desk-scale problem: 3 lobes on a 4x4x4 grid with the
/// two-fissure chain adjacency.
struct GradInstance {
  ChannelVolume logits;      // 4 channels (background + 3 lobes)
  LabelVolume labels;        // foreground lobe classes 1..3
  LabelVolume fissure_gt;    // derived with radius 1
  FissureAdjacency adj;
  double alpha = 0.5;
  int radius = 1;
};

inline GradInstance make_grad_instance(std::uint64_t seed) {
  GradInstance inst;
  inst.adj = FissureAdjacency({{1, 1, 2}, {2, 2, 3}});
  const Shape3 shape(4, 4, 4);
  Rng rng(seed);
  inst.logits = ChannelVolume(4, shape);
  for (double& v : inst.logits.data) v = rng.uniform(-1.0, 1.0);
  // Layered labels (lobe 1 under lobe 2 under lobe 3 along z, with jittered
  // interfaces) so the fissure bands have structure instead of covering the
  // whole grid.
  LabelVolume labels(shape, 4);
  for (int y = 0; y < shape.ny; ++y)
    for (int x = 0; x < shape.nx; ++x) {
      const double t1 = 0.8 + rng.uniform(0.0, 1.0);
      const double t2 = 2.3 + rng.uniform(0.0, 1.0);
      for (int z = 0; z < shape.nz; ++z)
        labels.at(x, y, z) = static_cast<std::uint8_t>(z < t1 ? 1 : (z < t2 ? 2 : 3));
    }
  inst.labels = std::move(labels);
  inst.fissure_gt = fissure_gt_from_lobes(inst.labels, inst.radius, inst.adj);
  inst.alpha = rng.uniform(0.1, 0.9);
  return inst;
}

enum class CheckableOp {
  softmax,
  maxpool,
  ace,
  dice,
  fgm,           // soft Dice through the generated fissure map
  reg_demons,
  reg_conv,
  combined,
};

inline const char* checkable_op_name(CheckableOp op) {
  switch (op) {
    case CheckableOp::softmax: return "softmax";
    case CheckableOp::maxpool: return "maxpool";
    case CheckableOp::ace: return "ace";
    case CheckableOp::dice: return "dice";
    case CheckableOp::fgm: return "fgm";
    case CheckableOp::reg_demons: return "reg-demons";
    case CheckableOp::reg_conv: return "reg-conv";
    case CheckableOp::combined: return "combined";
  }
  return "?";
}

inline bool parse_checkable_op(const std::string& name, CheckableOp& out) {
  for (CheckableOp op : {CheckableOp::softmax, CheckableOp::maxpool, CheckableOp::ace,
                         CheckableOp::dice, CheckableOp::fgm, CheckableOp::reg_demons,
                         CheckableOp::reg_conv, CheckableOp::combined}) {
    if (name == checkable_op_name(op)) {
      out = op;
      return true;
    }
  }
  return false;
}

struct TrialOutcome {
  std::uint64_t seed = 0;   // accepted instance seed
  double max_rel_err = 0.0;
  bool pass = false;
};

/// Builds the scalar graph for `op` over the instance, taking the leaf as
/// the lobe logits (or the raw pool input for CheckableOp::maxpool).
inline GraphBuilder graph_for(CheckableOp op, const GradInstance& inst,
                              const RegistrationOperator* reg,
                              const ChannelVolume* pool_weights) {
  switch (op) {
    case CheckableOp::softmax: {
      ChannelVolume w = *pool_weights;
      return [w](Tape& t, NodeId leaf) {
        return t.sum_all(t.mul(t.softmax_channels(leaf), t.constant(w)));
      };
    }
    case CheckableOp::maxpool: {
      ChannelVolume w = *pool_weights;
      const int radius = inst.radius;
      return [w, radius](Tape& t, NodeId leaf) {
        return t.sum_all(t.mul(t.maxpool3(leaf, radius), t.constant(w)));
      };
    }
    case CheckableOp::ace: {
      const LabelVolume labels = inst.labels;
      const double alpha = inst.alpha;
      return [labels, alpha](Tape& t, NodeId leaf) {
        return attentive_ce(t, t.softmax_channels(leaf), labels, alpha);
      };
    }
    case CheckableOp::dice: {
      const LabelVolume labels = inst.labels;
      return [labels](Tape& t, NodeId leaf) {
        return soft_dice_loss(t, t.softmax_channels(leaf), labels);
      };
    }
    case CheckableOp::fgm: {
      const LabelVolume fissures = inst.fissure_gt;
      const FissureAdjacency adj = inst.adj;
      const int radius = inst.radius;
      return [fissures, adj, radius](Tape& t, NodeId leaf) {
        NodeId gen = fgm_forward(t, t.softmax_channels(leaf), adj, radius);
        return fissure_dice_loss(t, gen, fissures);
      };
    }
    case CheckableOp::reg_demons:
    case CheckableOp::reg_conv: {
      const LabelVolume fissures = inst.fissure_gt;
      const FissureAdjacency adj = inst.adj;
      const int radius = inst.radius;
      const RegistrationOperator op_copy = *reg;
      return [fissures, adj, radius, op_copy](Tape& t, NodeId leaf) {
        NodeId gen = fgm_forward(t, t.softmax_channels(leaf), adj, radius);
        return registration_loss(t, gen, fissures, op_copy);
      };
    }
    case CheckableOp::combined: {
      const GradInstance inst_copy = inst;
      const RegistrationOperator op_copy = *reg;
      Schedules schedules;
      schedules.alpha = AlphaSchedule(0.9, 1000);
      schedules.weights = LossWeights(1.0, 1.0, 1000);
      return [inst_copy, op_copy, schedules](Tape& t, NodeId leaf) {
        return combined_objective(t, t.softmax_channels(leaf), inst_copy.labels,
                                  inst_copy.fissure_gt, inst_copy.adj, inst_copy.radius,
                                  /*step=*/500, schedules, op_copy);
      };
    }
  }
  throw ParameterError("graph_for: unknown op");
}

/// Deterministic margin screening; advances the seed until acceptable.
inline bool instance_acceptable(CheckableOp op, const GradInstance& inst,
                                const GraphBuilder& build,
                                const RegistrationOperator* reg) {
  using namespace gradcheck_detail;
  if (op != CheckableOp::maxpool) {
    const ChannelVolume probs = softmax_plain(inst.logits);
    double min_prob = 1.0;
    for (double v : probs.data) min_prob = std::min(min_prob, v);
    if (min_prob < kTieMargin) return false;
    if (op == CheckableOp::fgm || op == CheckableOp::reg_demons ||
        op == CheckableOp::reg_conv || op == CheckableOp::combined) {
      if (min_pool_gap(probs, inst.radius) < kTieMargin) return false;
    }
    if (op == CheckableOp::reg_demons || op == CheckableOp::reg_conv ||
        op == CheckableOp::combined) {
      // Screen the |field - offset| kink on the forward values.
      Tape t;
      NodeId gen = fgm_forward(t, t.softmax_channels(t.leaf(inst.logits)), inst.adj,
                               inst.radius);
      NodeId sheet = t.one_minus(t.select_channel(gen, 0));
      const ScalarVolume ref = fissure_sheet(inst.fissure_gt);
      NodeId field = reg->displacement(t, sheet, ref);
      ChannelVolume diff = t.value(field);
      const ChannelVolume self_field = reg->displacement_plain(ref, ref);
      for (std::size_t i = 0; i < diff.data.size(); ++i)
        diff.data[i] -= self_field.data[i];
      if (!field_diff_ok(diff)) return false;
    }
  }
  return grads_resolvable(analytic_gradient(inst.logits, build));
}

/// Runs `trials` accepted instances of the finite-difference suite for one
/// op. Seeds advance from `seed`; rejected candidates are skipped
/// deterministically.
inline std::vector<TrialOutcome> run_gradcheck(CheckableOp op, int trials,
                                               std::uint64_t seed,
                                               double tolerance = 1e-5) {
  std::vector<TrialOutcome> outcomes;
  std::uint64_t candidate = seed;
  int guard = 0;
  while (static_cast<int>(outcomes.size()) < trials) {
    if (++guard > 20000)
      throw NumericError("run_gradcheck: margin screening rejected 20000 candidates");
    GradInstance inst = make_grad_instance(candidate);

    ChannelVolume pool_weights;
    if (op == CheckableOp::softmax || op == CheckableOp::maxpool) {
      Rng wrng = Rng(candidate).fork(3);
      pool_weights = ChannelVolume(op == CheckableOp::softmax ? 4 : 2, inst.logits.shape);
      for (double& v : pool_weights.data) v = wrng.uniform(-1.0, 1.0);
      if (op == CheckableOp::maxpool) {
        // The pool input is the leaf itself for this check.
        ChannelVolume x(2, inst.logits.shape);
        Rng xrng = Rng(candidate).fork(4);
        for (double& v : x.data) v = xrng.uniform(0.05, 1.0);
        inst.logits = std::move(x);
        if (gradcheck_detail::min_pool_gap(inst.logits, inst.radius) <
            gradcheck_detail::kTieMargin) {
          ++candidate;
          continue;
        }
      }
    }

    RegistrationOperator reg = (op == CheckableOp::reg_conv)
                                   ? RegistrationOperator::seeded_conv(candidate ^ 0x9e37)
                                   : RegistrationOperator::demons(2, 0.7);
    const GraphBuilder build = graph_for(op, inst, &reg, &pool_weights);
    if (!instance_acceptable(op, inst, build, &reg)) {
      ++candidate;
      continue;
    }

    const FdResult fd = finite_difference_check(inst.logits, build);
    TrialOutcome out;
    out.seed = candidate;
    out.max_rel_err = fd.max_rel_err;
    out.pass = fd.max_rel_err < tolerance;
    outcomes.push_back(out);
    ++candidate;
  }
  return outcomes;
}

}  // namespace lobeseg
