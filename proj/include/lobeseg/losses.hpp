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
#include <vector>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/autodiff.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/fgm.hpp"
#include "lobeseg/morphology.hpp"
#include "lobeseg/registration.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

/// Attention weight ramp: alpha(t) rises linearly from 0 to alpha_max over
/// total_steps. Starting at zero keeps the early, still-random
/// misclassifications from dominating the loss.
struct AlphaSchedule {
  double alpha_max = 0.9;
  long total_steps = 2000;

  AlphaSchedule() = default;
  AlphaSchedule(double max_v, long steps) : alpha_max(max_v), total_steps(steps) {
    if (alpha_max < 0.0 || alpha_max > 1.0)
      throw ParameterError("AlphaSchedule: alpha_max must be in [0,1]");
    if (total_steps < 1) throw ParameterError("AlphaSchedule: total_steps must be >= 1");
  }

  double at(long step) const {
    const long t = std::clamp(step, 0L, total_steps);
    return alpha_max * (static_cast<double>(t) / static_cast<double>(total_steps));
  }
};

/// Loss mixing weights: lambda1 (attentive CE) and lambda2 (lobe Dice) are
/// fixed, lambda3 (auxiliary fissure loss) ramps linearly from 0 to 1.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  long total_steps = 2000;

  LossWeights() = default;
  LossWeights(double l1, double l2, long steps)
      : lambda1(l1), lambda2(l2), total_steps(steps) {
    if (total_steps < 1) throw ParameterError("LossWeights: total_steps must be >= 1");
  }

  double lambda3_at(long step) const {
    const long t = std::clamp(step, 0L, total_steps);
    return static_cast<double>(t) / static_cast<double>(total_steps);
  }
};

struct Schedules {
  AlphaSchedule alpha;
  LossWeights weights;
};

/// Cross entropy with per-voxel attention: each voxel is weighted by
/// w = 1 - alpha * y_true, so confidently correct voxels fade out and the
/// hard voxels around the fissures keep full weight. alpha = 0 reduces to
/// plain mean cross entropy (bitwise: the weight map is exactly 1).
inline NodeId attentive_ce(Tape& tape, NodeId lobe_probs, const LabelVolume& labels,
                           double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ParameterError("attentive_ce: alpha must be in [0,1]");
  const ChannelVolume& probs = tape.value(lobe_probs);
  if (probs.shape != labels.shape) throw ParameterError("attentive_ce: shape mismatch");
  NodeId target = tape.constant(one_hot(labels, probs.channels));

  NodeId true_log = tape.mul(target, tape.log(lobe_probs));  // zero off the true channel
  NodeId true_prob = tape.mul(target, lobe_probs);
  NodeId weight = tape.one_minus(tape.scalar_mul(true_prob, alpha));
  NodeId weighted = tape.mul(weight, true_log);
  return tape.scalar_mul(tape.sum_all(weighted),
                         -1.0 / static_cast<double>(labels.shape.voxels()));
}

/// Plain mean cross entropy; the alpha = 0 reference point of attentive_ce.
inline NodeId cross_entropy(Tape& tape, NodeId lobe_probs, const LabelVolume& labels) {
  const ChannelVolume& probs = tape.value(lobe_probs);
  if (probs.shape != labels.shape) throw ParameterError("cross_entropy: shape mismatch");
  NodeId target = tape.constant(one_hot(labels, probs.channels));
  NodeId true_log = tape.mul(target, tape.log(lobe_probs));
  return tape.scalar_mul(tape.sum_all(true_log),
                         -1.0 / static_cast<double>(labels.shape.voxels()));
}

/// Soft Dice loss, averaged over foreground classes only (background
/// dominates the volume and is excluded).
inline NodeId soft_dice_loss(Tape& tape, NodeId probs, const LabelVolume& labels) {
  constexpr double kEps = 1e-5;
  const int channels = tape.value(probs).channels;
  if (tape.value(probs).shape != labels.shape)
    throw ParameterError("soft_dice_loss: shape mismatch");
  if (channels < 2) throw ParameterError("soft_dice_loss: needs a foreground channel");
  const ChannelVolume target = one_hot(labels, channels);
  NodeId target_node = tape.constant(target);
  NodeId overlap = tape.mul(probs, target_node);

  NodeId dice_sum{};
  const int num_fg = channels - 1;
  for (int c = 1; c < channels; ++c) {
    NodeId inter = tape.sum_all(tape.select_channel(overlap, c));
    NodeId p_sum = tape.sum_all(tape.select_channel(probs, c));
    double t_sum = 0.0;
    const double* tc = target.channel(c);
    for (std::size_t i = 0; i < target.voxels(); ++i) t_sum += tc[i];
    NodeId numer = tape.scalar_add(tape.scalar_mul(inter, 2.0), kEps);
    NodeId denom = tape.scalar_add(p_sum, t_sum + kEps);
    NodeId dice = tape.div(numer, denom);
    dice_sum = (c == 1) ? dice : tape.add(dice_sum, dice);
  }
  return tape.one_minus(tape.scalar_mul(dice_sum, 1.0 / static_cast<double>(num_fg)));
}

/// Soft Dice of a generated fissure probability map against the fissure
/// label map; the Dice-supervised variant of the auxiliary task.
inline NodeId fissure_dice_loss(Tape& tape, NodeId gen_fissure,
                                const LabelVolume& fissure_gt) {
  return soft_dice_loss(tape, gen_fissure, fissure_gt);
}

enum class RegLossMode { collapsed_sheet, per_class };

/// Registration-based auxiliary loss. The generated fissure map and the
/// reference mask are registered; the loss is the mean absolute deviation of
/// that field from the operator's self-registration field phi(G, G), which
/// offsets the operator's intrinsic error. The offset field is detached, so
/// gradients flow only through the generated fissure.
///
/// In collapsed_sheet mode (default) both inputs are reduced to a
/// single-channel "any fissure" image: the reference is the union of the
/// one-hot foreground channels and the generated side is 1 - Z_background.
/// per_class mode registers each fissure channel separately and averages.
inline NodeId registration_loss(Tape& tape, NodeId gen_fissure,
                                const LabelVolume& fissure_gt,
                                const RegistrationOperator& op,
                                RegLossMode mode = RegLossMode::collapsed_sheet,
                                const ChannelVolume* cached_self_field = nullptr) {
  const ChannelVolume& gen = tape.value(gen_fissure);
  if (gen.shape != fissure_gt.shape)
    throw ParameterError("registration_loss: shape mismatch");
  if (gen.channels != fissure_gt.num_classes)
    throw ParameterError("registration_loss: generated channels " +
                         std::to_string(gen.channels) + " != fissure classes " +
                         std::to_string(fissure_gt.num_classes));

  auto field_term = [&](NodeId moving, const ScalarVolume& reference) {
    NodeId field = op.displacement(tape, moving, reference);
    ChannelVolume self_field = cached_self_field && mode == RegLossMode::collapsed_sheet
                                   ? *cached_self_field
                                   : op.displacement_plain(reference, reference);
    if (!self_field.same_layout(tape.value(field)))
      throw ParameterError("registration_loss: cached self-field layout mismatch");
    NodeId offset = tape.detach(tape.constant(std::move(self_field)));
    NodeId diff = tape.sub(field, offset);
    const double entries = static_cast<double>(tape.value(diff).total());
    return tape.scalar_mul(tape.l1_norm(diff), 1.0 / entries);
  };

  if (mode == RegLossMode::collapsed_sheet) {
    NodeId gen_sheet = tape.one_minus(tape.select_channel(gen_fissure, 0));
    return field_term(gen_sheet, fissure_sheet(fissure_gt));
  }

  NodeId total{};
  const int num_fissures = fissure_gt.num_classes - 1;
  for (int c = 1; c < fissure_gt.num_classes; ++c) {
    ScalarVolume ref(fissure_gt.shape);
    for (std::size_t i = 0; i < ref.data.size(); ++i)
      ref.data[i] = fissure_gt.data[i] == c ? 1.0 : 0.0;
    NodeId term = field_term(tape.select_channel(gen_fissure, c), ref);
    total = (c == 1) ? term : tape.add(total, term);
  }
  return tape.scalar_mul(total, 1.0 / static_cast<double>(num_fissures));
}

/// The full training objective
///   L = lambda1 * L_ace(alpha(t)) + lambda2 * L_dice + lambda3(t) * L_reg
/// with the fissure probability map generated on-tape from the lobe
/// probabilities.
inline NodeId combined_objective(Tape& tape, NodeId lobe_probs, const LabelVolume& labels,
                                 const LabelVolume& fissure_gt, const FissureAdjacency& adj,
                                 int radius, long step, const Schedules& schedules,
                                 const RegistrationOperator& op,
                                 const ChannelVolume* cached_self_field = nullptr) {
  if (step > schedules.weights.total_steps || step < 0)
    throw ParameterError("combined_objective: step outside 0..total_steps");
  const double alpha = schedules.alpha.at(step);
  const double lambda3 = schedules.weights.lambda3_at(step);

  NodeId ace = attentive_ce(tape, lobe_probs, labels, alpha);
  NodeId dice = soft_dice_loss(tape, lobe_probs, labels);
  NodeId gen = fgm_forward(tape, lobe_probs, adj, radius);
  NodeId reg = registration_loss(tape, gen, fissure_gt, op, RegLossMode::collapsed_sheet,
                                 cached_self_field);

  NodeId total = tape.add(tape.scalar_mul(ace, schedules.weights.lambda1),
                          tape.scalar_mul(dice, schedules.weights.lambda2));
  return tape.add(total, tape.scalar_mul(reg, lambda3));
}

}  // namespace lobeseg
