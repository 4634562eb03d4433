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

// Toy differentiable predictors and the optimization loop. Two models:
//
//   direct-logit - one trainable logit per voxel per class for a single
//                  case. Any pathology in a training curve is then
//                  attributable to the loss, not to a network.
//   tiny-conv    - two 3x3x3 conv layers (hidden width 8, tanh) over the
//                  image stacked with normalized voxel coordinates; checks
//                  that gradients propagate through shared weights and can
//                  predict held-out cases.
//
// The ablation harness trains four arms on shared data and seeds and emits a
// per-arm table of lobe DSC and fissure ASSD columns.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/autodiff.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/fgm.hpp"
#include "lobeseg/losses.hpp"
#include "lobeseg/metrics.hpp"
#include "lobeseg/morphology.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/registration.hpp"
#include "lobeseg/rng.hpp"
#include "lobeseg/volume.hpp"

namespace lobeseg {

enum class ModelKind { direct_logit, tiny_conv };
enum class OptimizerKind { adam, sgd };
enum class Arm { baseline_ce, ace, ace_dice_fissure, ace_reg };

inline const char* arm_name(Arm arm) {
  switch (arm) {
    case Arm::baseline_ce: return "baseline-ce";
    case Arm::ace: return "ace";
    case Arm::ace_dice_fissure: return "ace+dice-fissure";
    case Arm::ace_reg: return "ace+reg";
  }
  return "?";
}

inline bool parse_arm(const std::string& name, Arm& out) {
  for (Arm a : {Arm::baseline_ce, Arm::ace, Arm::ace_dice_fissure, Arm::ace_reg})
    if (name == arm_name(a)) {
      out = a;
      return true;
    }
  return false;
}

struct TrainConfig {
  long total_steps = 2000;
  double learning_rate = 0.001;
  double weight_decay = 1e-4;
  OptimizerKind optimizer = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double alpha_max = 0.9;
  int pool_radius = 1;
  RegistrationConfig registration;
  std::uint64_t seed = 0;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  ModelKind model = ModelKind::direct_logit;
  double input_noise_sigma = 0.0;  // optional augmentation, off by default

  void validate() const {
    if (total_steps < 1) throw ConfigError("TrainConfig: total_steps must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig: learning_rate must be > 0");
    if (pool_radius < 1) throw ConfigError("TrainConfig: pool_radius must be >= 1");
    if (alpha_max < 0.0 || alpha_max > 1.0)
      throw ConfigError("TrainConfig: alpha_max must be in [0,1]");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (input_noise_sigma < 0.0)
      throw ConfigError("TrainConfig: input_noise_sigma must be >= 0");
  }
};

class Model {
 public:
  static constexpr int kHidden = 8;
  static constexpr int kConvInputs = 4;  // image + 3 normalized coordinates

  static Model direct_logit(Shape3 shape, int num_classes, std::uint64_t seed) {
    Model m;
    m.kind_ = ModelKind::direct_logit;
    m.num_classes_ = num_classes;
    Rng rng = Rng(seed).fork(11);
    ChannelVolume logits(num_classes, shape);
    for (double& v : logits.data) v = rng.normal(0.0, 0.01);
    m.params_.push_back(std::move(logits));
    return m;
  }

  static Model tiny_conv(int num_classes, std::uint64_t seed) {
    Model m;
    m.kind_ = ModelKind::tiny_conv;
    m.num_classes_ = num_classes;
    Rng rng = Rng(seed).fork(12);
    const double s1 = std::sqrt(1.0 / (kConvInputs * 27.0));
    ChannelVolume w1(kHidden * kConvInputs, Shape3(3, 3, 3));
    for (double& v : w1.data) v = rng.uniform(-s1, s1);
    ChannelVolume b1(kHidden, Shape3(1, 1, 1), 0.0);
    const double s2 = std::sqrt(1.0 / (kHidden * 27.0));
    ChannelVolume w2(num_classes * kHidden, Shape3(3, 3, 3));
    for (double& v : w2.data) v = rng.uniform(-s2, s2);
    ChannelVolume b2(num_classes, Shape3(1, 1, 1), 0.0);
    m.params_.push_back(std::move(w1));
    m.params_.push_back(std::move(b1));
    m.params_.push_back(std::move(w2));
    m.params_.push_back(std::move(b2));
    return m;
  }

  ModelKind kind() const { return kind_; }
  int num_classes() const { return num_classes_; }
  std::vector<ChannelVolume>& params() { return params_; }
  const std::vector<ChannelVolume>& params() const { return params_; }

  /// Records the current parameters as leaves and returns (leaves, logits).
  std::pair<std::vector<NodeId>, NodeId> logits(Tape& tape, const ScalarVolume& image) const {
    std::vector<NodeId> leaves;
    leaves.reserve(params_.size());
    for (const ChannelVolume& p : params_) leaves.push_back(tape.leaf(p));
    if (kind_ == ModelKind::direct_logit) {
      if (params_[0].shape != image.shape)
        throw ParameterError("direct-logit model built for a different case shape");
      return {leaves, leaves[0]};
    }
    NodeId input = tape.constant(conv_input(image));
    NodeId h = tape.tanh(tape.conv3d(input, leaves[0], leaves[1], kHidden));
    NodeId out = tape.conv3d(h, leaves[2], leaves[3], num_classes_);
    return {leaves, out};
  }

  static ChannelVolume conv_input(const ScalarVolume& image) {
    const Shape3& s = image.shape;
    ChannelVolume input(kConvInputs, s);
    const std::size_t n = s.voxels();
    for (std::size_t i = 0; i < n; ++i) input.data[i] = image.data[i];
    for (int z = 0; z < s.nz; ++z)
      for (int y = 0; y < s.ny; ++y)
        for (int x = 0; x < s.nx; ++x) {
          const std::size_t i = s.index(x, y, z);
          input.channel(1)[i] = (x + 0.5) / s.nx - 0.5;
          input.channel(2)[i] = (y + 0.5) / s.ny - 0.5;
          input.channel(3)[i] = (z + 0.5) / s.nz - 0.5;
        }
    return input;
  }

 private:
  ModelKind kind_ = ModelKind::direct_logit;
  int num_classes_ = 0;
  std::vector<ChannelVolume> params_;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long t = 0;

  static AdamState for_params(const std::vector<ChannelVolume>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.data.size(), 0.0);
      s.v.emplace_back(p.data.size(), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam with weight decay added to the gradient.
inline void adam_update(std::vector<ChannelVolume>& params,
                        const std::vector<const ChannelVolume*>& grads, AdamState& state,
                        const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& theta = params[p].data;
    const std::vector<double>& g0 = grads[p]->data;
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = g0[i] + cfg.weight_decay * theta[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_eps);
    }
  }
}

inline void sgd_update(std::vector<ChannelVolume>& params,
                       const std::vector<const ChannelVolume*>& grads,
                       const TrainConfig& cfg) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& theta = params[p].data;
    const std::vector<double>& g0 = grads[p]->data;
    for (std::size_t i = 0; i < theta.size(); ++i)
      theta[i] -= cfg.learning_rate * (g0[i] + cfg.weight_decay * theta[i]);
  }
}

struct StepRecord {
  long step = 0;
  double l_ace = 0.0;
  double l_dice = 0.0;
  double l_aux = 0.0;  // the arm's auxiliary fissure loss (Dice or registration)
  double total = 0.0;
  double alpha = 0.0;
  double lambda3 = 0.0;
};

struct TrainReport {
  Arm arm = Arm::ace_reg;
  std::vector<StepRecord> steps;
  std::vector<MetricsReport> final_metrics;  // one per training case
  std::vector<LabelVolume> predictions;      // final argmax predictions per case
  double wall_clock_seconds = 0.0;           // excluded from canonical outputs

  double final_mean_foreground_dsc() const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : final_metrics) {
      s += r.mean_dsc();
      ++n;
    }
    return n == 0 ? 0.0 : s / n;
  }

  static std::string csv_header() { return "step,l_ace,l_dice,l_aux,total,alpha,lambda3"; }

  /// Full-precision per-step log; byte-identical across reruns of the same
  /// seeded configuration.
  std::string log_csv() const {
    std::string out = csv_header() + "\n";
    char buf[256];
    for (const StepRecord& r : steps) {
      std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step,
                    r.l_ace, r.l_dice, r.l_aux, r.total, r.alpha, r.lambda3);
      out += buf;
    }
    return out;
  }

  nlohmann::ordered_json summary_json() const {
    nlohmann::ordered_json j;
    j["arm"] = arm_name(arm);
    j["steps"] = steps.size();
    if (!steps.empty()) {
      j["first_step"] = {{"total", steps.front().total},
                         {"alpha", steps.front().alpha},
                         {"lambda3", steps.front().lambda3}};
      j["last_step"] = {{"total", steps.back().total},
                        {"alpha", steps.back().alpha},
                        {"lambda3", steps.back().lambda3}};
    }
    j["final_mean_foreground_dsc"] = final_mean_foreground_dsc();
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& r : final_metrics) j["cases"].push_back(r.to_json());
    return j;
  }
};

namespace detail {

struct CaseContext {
  const PhantomCase* data = nullptr;
  LabelVolume fissure_gt;
  ChannelVolume self_field;  // cached phi(G,G) for the registration arm
  bool has_self_field = false;
};

}  // namespace detail

/// Runs total_steps of forward/backward/update for one ablation arm.
/// Batch size is one case per step, round-robin over the training cases.
inline TrainReport train(Model& model, const std::vector<PhantomCase>& cases,
                         const TrainConfig& cfg, Arm arm, const FissureAdjacency& adj) {
  cfg.validate();
  if (cases.empty()) throw ParameterError("train: no cases");
  if (model.kind() == ModelKind::direct_logit && cases.size() != 1)
    throw ParameterError("train: the direct-logit model holds logits for exactly one case");

  const auto t_start = std::chrono::steady_clock::now();
  const RegistrationOperator reg_op{cfg.registration};
  Schedules schedules;
  schedules.alpha = AlphaSchedule(cfg.alpha_max, cfg.total_steps);
  schedules.weights = LossWeights(cfg.lambda1, cfg.lambda2, cfg.total_steps);

  std::vector<detail::CaseContext> contexts(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    contexts[i].data = &cases[i];
    contexts[i].fissure_gt = fissure_gt_from_lobes(cases[i].lobes, cfg.pool_radius, adj);
    if (arm == Arm::ace_reg) {
      const ScalarVolume sheet = fissure_sheet(contexts[i].fissure_gt);
      contexts[i].self_field = reg_op.displacement_plain(sheet, sheet);
      contexts[i].has_self_field = true;
    }
  }

  Rng noise_rng = Rng(cfg.seed).fork(21);
  AdamState adam_state = AdamState::for_params(model.params());
  TrainReport report;
  report.arm = arm;
  report.steps.reserve(cfg.total_steps);

  for (long step = 0; step < cfg.total_steps; ++step) {
    detail::CaseContext& ctx = contexts[step % contexts.size()];
    const LabelVolume& labels = ctx.data->lobes;

    ScalarVolume image = ctx.data->image;
    if (cfg.input_noise_sigma > 0.0)
      for (double& v : image.data) v += noise_rng.normal(0.0, cfg.input_noise_sigma);

    Tape tape;
    auto [leaves, logits] = model.logits(tape, image);
    NodeId probs;
    try {
      probs = tape.softmax_channels(logits);
    } catch (const NumericError&) {
      throw DivergenceError("train: non-finite activations", step);
    }

    StepRecord rec;
    rec.step = step;
    NodeId total{};
    if (arm == Arm::baseline_ce) {
      NodeId ce = attentive_ce(tape, probs, labels, 0.0);
      total = tape.scalar_mul(ce, cfg.lambda1);
      rec.l_ace = tape.scalar_value(ce);
    } else {
      const double alpha = schedules.alpha.at(step);
      rec.alpha = alpha;
      NodeId ace = attentive_ce(tape, probs, labels, alpha);
      NodeId dice = soft_dice_loss(tape, probs, labels);
      total = tape.add(tape.scalar_mul(ace, cfg.lambda1), tape.scalar_mul(dice, cfg.lambda2));
      rec.l_ace = tape.scalar_value(ace);
      rec.l_dice = tape.scalar_value(dice);
      if (arm == Arm::ace_dice_fissure || arm == Arm::ace_reg) {
        const double lambda3 = schedules.weights.lambda3_at(step);
        rec.lambda3 = lambda3;
        NodeId gen = fgm_forward(tape, probs, adj, cfg.pool_radius);
        NodeId aux = (arm == Arm::ace_dice_fissure)
                         ? fissure_dice_loss(tape, gen, ctx.fissure_gt)
                         : registration_loss(tape, gen, ctx.fissure_gt, reg_op,
                                             RegLossMode::collapsed_sheet,
                                             ctx.has_self_field ? &ctx.self_field : nullptr);
        rec.l_aux = tape.scalar_value(aux);
        total = tape.add(total, tape.scalar_mul(aux, lambda3));
      }
    }
    rec.total = tape.scalar_value(total);
    if (!std::isfinite(rec.total))
      throw DivergenceError("train: non-finite loss", step);
    report.steps.push_back(rec);

    tape.backward(total);
    std::vector<const ChannelVolume*> grads;
    grads.reserve(leaves.size());
    for (NodeId leaf : leaves) grads.push_back(&tape.grad(leaf));
    if (cfg.optimizer == OptimizerKind::adam)
      adam_update(model.params(), grads, adam_state, cfg);
    else
      sgd_update(model.params(), grads, cfg);
  }

  for (const auto& ctx : contexts) {
    Tape tape;
    auto [leaves, logits] = model.logits(tape, ctx.data->image);
    const LabelVolume pred = argmax_channel(tape.value(tape.softmax_channels(logits)));
    report.final_metrics.push_back(
        evaluate_segmentation(pred, ctx.data->lobes, adj, cfg.pool_radius));
    report.predictions.push_back(pred);
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return report;
}

/// Prediction for one case with the current parameters.
inline LabelVolume predict(const Model& model, const ScalarVolume& image) {
  Tape tape;
  auto [leaves, logits] = model.logits(tape, image);
  return argmax_channel(tape.value(tape.softmax_channels(logits)));
}

// ---- ablation harness ------------------------------------------------------

struct AblationCell {
  double mean = 0.0;
  double stddev = 0.0;  // population std over evaluation cases
  int n_defined = 0;

  static AblationCell from(const std::vector<double>& values) {
    AblationCell c;
    c.n_defined = static_cast<int>(values.size());
    if (values.empty()) return c;
    for (double v : values) c.mean += v;
    c.mean /= values.size();
    for (double v : values) c.stddev += (v - c.mean) * (v - c.mean);
    c.stddev = std::sqrt(c.stddev / values.size());
    return c;
  }
};

struct AblationRow {
  std::string arm;
  std::vector<AblationCell> lobe_dsc;      // per lobe class
  std::vector<AblationCell> fissure_assd;  // per fissure class
  AblationCell dsc_mean;
  AblationCell assd_mean;
};

struct AblationTable {
  std::vector<std::string> lobe_names;
  std::vector<std::string> fissure_names;
  std::vector<AblationRow> rows;

  static AblationRow row_from_reports(const std::string& arm,
                                      const std::vector<MetricsReport>& reports) {
    AblationRow row;
    row.arm = arm;
    if (reports.empty()) return row;
    const std::size_t n_lobes = reports[0].lobes.size();
    const std::size_t n_fissures = reports[0].fissures.size();
    std::vector<double> all_dsc;
    for (std::size_t c = 0; c < n_lobes; ++c) {
      std::vector<double> vals;
      for (const auto& r : reports) vals.push_back(r.lobes[c].dsc);
      for (double v : vals) all_dsc.push_back(v);
      row.lobe_dsc.push_back(AblationCell::from(vals));
    }
    std::vector<double> all_assd;
    for (std::size_t c = 0; c < n_fissures; ++c) {
      std::vector<double> vals;
      for (const auto& r : reports)
        if (r.fissures[c].assd) vals.push_back(*r.fissures[c].assd);
      for (double v : vals) all_assd.push_back(v);
      row.fissure_assd.push_back(AblationCell::from(vals));
    }
    row.dsc_mean = AblationCell::from(all_dsc);
    row.assd_mean = AblationCell::from(all_assd);
    return row;
  }

  /// One row per arm: five lobe DSC columns (percent), their mean, four
  /// fissure ASSD columns (voxels), their mean. Cells are "mean±std"; a cell
  /// with no defined values prints NA.
  std::string to_csv() const {
    auto cell = [](const AblationCell& c, bool percent) {
      if (c.n_defined == 0) return std::string("NA");
      char buf[64];
      if (percent)
        std::snprintf(buf, sizeof(buf), "%.2f±%.2f", 100.0 * c.mean, 100.0 * c.stddev);
      else
        std::snprintf(buf, sizeof(buf), "%.3f±%.3f", c.mean, c.stddev);
      return std::string(buf);
    };
    std::string out = "arm";
    for (const auto& n : lobe_names) out += ",dsc_" + n;
    out += ",dsc_mean";
    for (const auto& n : fissure_names) out += ",assd_" + n;
    out += ",assd_mean\n";
    for (const AblationRow& row : rows) {
      out += row.arm;
      for (const auto& c : row.lobe_dsc) out += "," + cell(c, true);
      out += "," + cell(row.dsc_mean, true);
      for (const auto& c : row.fissure_assd) out += "," + cell(c, false);
      out += "," + cell(row.assd_mean, false);
      out += "\n";
    }
    return out;
  }
};

/// Trains all four arms with shared seeds and training cases, evaluates each
/// on the held-out cases, and tabulates per-class results. Requires the
/// tiny-conv model: direct-logit has no way to predict an unseen case.
inline AblationTable run_ablation(const std::vector<PhantomCase>& cases,
                                  std::size_t n_train, const TrainConfig& cfg,
                                  const FissureAdjacency& adj) {
  if (cfg.model != ModelKind::tiny_conv)
    throw ParameterError("run_ablation: requires the tiny-conv model");
  if (n_train < 1 || n_train >= cases.size())
    throw ParameterError("run_ablation: needs >= 1 training and >= 1 held-out case");

  const std::vector<PhantomCase> train_cases(cases.begin(), cases.begin() + n_train);
  AblationTable table;
  for (const auto& e : adj.entries) {
    const char* n = adj.num_fissures() == 4 ? fissure_name(e.fissure_class) : nullptr;
    table.fissure_names.push_back(n ? n : ("fissure" + std::to_string(e.fissure_class)));
  }

  for (Arm arm : {Arm::baseline_ce, Arm::ace, Arm::ace_dice_fissure, Arm::ace_reg}) {
    Model model = Model::tiny_conv(6, cfg.seed);
    train(model, train_cases, cfg, arm, adj);
    std::vector<MetricsReport> reports;
    for (std::size_t i = n_train; i < cases.size(); ++i) {
      const LabelVolume pred = predict(model, cases[i].image);
      reports.push_back(evaluate_segmentation(pred, cases[i].lobes, adj, cfg.pool_radius));
    }
    if (table.lobe_names.empty())
      for (const auto& l : reports[0].lobes) table.lobe_names.push_back(l.name);
    table.rows.push_back(AblationTable::row_from_reports(arm_name(arm), reports));
  }
  return table;
}

}  // namespace lobeseg
