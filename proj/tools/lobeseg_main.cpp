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

// lobeseg: one binary, one config schema. Subcommands wire the library into
// reproducible experiments: phantom generation, fissure ground truth,
// training, evaluation, gradient verification and slice export.
//
// Exit codes: 0 success, 2 usage/config, 3 data/format, 4 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lobeseg/config.hpp"
#include "lobeseg/gradcheck.hpp"
#include "lobeseg/metrics.hpp"
#include "lobeseg/morphology.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/trainer.hpp"
#include "lobeseg/vvol_io.hpp"

namespace fs = std::filesystem;
using namespace lobeseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing", path);
  f << text;
  if (!f) throw IoError("write failed", path);
}

void announce(const std::string& path) { std::cout << "wrote " << path << "\n"; }

int cmd_gen_data(const std::string& spec_path, const std::string& out_dir, int cases) {
  PhantomSpec spec = PhantomSpec::default_for(Shape3(32, 32, 32));
  if (!spec_path.empty()) {
    std::ifstream f(spec_path);
    if (!f) throw IoError("cannot open spec", spec_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("spec " + spec_path + ": " + e.what());
    }
    spec = parse_phantom_spec(j);
  }
  fs::create_directories(out_dir);
  generate_dataset(spec, cases, spec.seed, out_dir);
  for (int k = 0; k < cases; ++k) {
    announce(out_dir + "/case_" + std::to_string(k) + "_img.vvol");
    announce(out_dir + "/case_" + std::to_string(k) + "_lab.vvol");
  }
  return kExitOk;
}

int cmd_fissure_gt(const std::string& labels_path, int radius, const std::string& out_path,
                   const FissureAdjacency& adj) {
  const LabelVolume lobes = read_label_volume(labels_path, adj.max_lobe() + 1);
  const LabelVolume fissures = fissure_gt_from_lobes(lobes, radius, adj);
  write_volume(out_path, fissures);
  announce(out_path);
  return kExitOk;
}

std::vector<PhantomCase> load_cases(const std::string& data_dir) {
  std::vector<PhantomCase> cases;
  for (int k = 0;; ++k) {
    const std::string img = data_dir + "/case_" + std::to_string(k) + "_img.vvol";
    const std::string lab = data_dir + "/case_" + std::to_string(k) + "_lab.vvol";
    if (!fs::exists(img) || !fs::exists(lab)) break;
    PhantomCase c;
    c.image = read_scalar_volume(img);
    c.lobes = read_label_volume(lab, 6);
    cases.push_back(std::move(c));
  }
  if (cases.empty())
    throw IoError("no case_<k>_{img,lab}.vvol pairs found", data_dir);
  return cases;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& arm_name_str, const std::string& out_dir) {
  Arm arm;
  if (!parse_arm(arm_name_str, arm))
    throw ConfigError("unknown arm \"" + arm_name_str +
                      "\"; valid: baseline-ce, ace, ace+dice-fissure, ace+reg");
  RunConfig cfg;
  if (!config_path.empty()) cfg = RunConfig::from_file(config_path);
  const std::vector<PhantomCase> cases = load_cases(data_dir);

  Model model = cfg.train.model == ModelKind::direct_logit
                    ? Model::direct_logit(cases[0].image.shape, 6, cfg.train.seed)
                    : Model::tiny_conv(6, cfg.train.seed);
  const TrainReport report = train(model, cases, cfg.train, arm, cfg.adjacency);

  fs::create_directories(out_dir);
  const std::string log_path = out_dir + "/train_log.csv";
  write_text(log_path, report.log_csv());
  announce(log_path);
  const std::string report_path = out_dir + "/report.json";
  write_text(report_path, report.summary_json().dump(2) + "\n");
  announce(report_path);
  // Wall-clock lives apart from the canonical outputs, which are
  // byte-reproducible for a pinned seed.
  nlohmann::ordered_json stats;
  stats["wall_clock_seconds"] = report.wall_clock_seconds;
  const std::string stats_path = out_dir + "/run_stats.json";
  write_text(stats_path, stats.dump(2) + "\n");
  announce(stats_path);
  for (std::size_t i = 0; i < report.predictions.size(); ++i) {
    const std::string pred_path = out_dir + "/pred_" + std::to_string(i) + ".vvol";
    write_volume(pred_path, report.predictions[i]);
    announce(pred_path);
  }
  return kExitOk;
}

int cmd_eval(const std::string& pred_path, const std::string& gt_path,
             const std::string& out_path, int radius, const FissureAdjacency& adj) {
  const LabelVolume pred = read_label_volume(pred_path, adj.max_lobe() + 1);
  const LabelVolume gt = read_label_volume(gt_path, adj.max_lobe() + 1);
  const MetricsReport report = evaluate_segmentation(pred, gt, adj, radius);
  write_text(out_path, MetricsReport::csv_header() + "\n" + report.to_csv("case"));
  announce(out_path);
  return kExitOk;
}

int cmd_gradcheck(const std::string& op_name, int trials, std::uint64_t seed) {
  CheckableOp op;
  if (!parse_checkable_op(op_name, op))
    throw ConfigError("unknown op \"" + op_name +
                      "\"; valid: softmax, maxpool, ace, dice, fgm, reg-demons, reg-conv, "
                      "combined");
  const std::vector<TrialOutcome> outcomes = run_gradcheck(op, trials, seed);
  bool all_pass = true;
  double worst = 0.0;
  for (const TrialOutcome& t : outcomes) {
    all_pass = all_pass && t.pass;
    worst = std::max(worst, t.max_rel_err);
    std::printf("%s seed=%llu max_rel_err=%.3e %s\n", op_name.c_str(),
                static_cast<unsigned long long>(t.seed), t.max_rel_err,
                t.pass ? "ok" : "FAIL");
  }
  std::printf("%s: %d trials, worst %.3e -> %s\n", op_name.c_str(),
              static_cast<int>(outcomes.size()), worst, all_pass ? "PASS" : "FAIL");
  return all_pass ? kExitOk : kExitNumeric;
}

int cmd_export_slice(const std::string& volume_path, const std::string& axis_str, int index,
                     const std::string& out_path, int channel) {
  if (axis_str != "x" && axis_str != "y" && axis_str != "z")
    throw ConfigError("axis must be x, y or z");
  const int axis = axis_str == "x" ? 0 : axis_str == "y" ? 1 : 2;

  const AnyVolume any = read_volume(volume_path);
  Shape3 shape;
  std::vector<double> values;  // slice as doubles before gray mapping
  bool is_label = false;
  int num_classes = 1;
  if (const auto* s = std::get_if<ScalarVolume>(&any)) {
    shape = s->shape;
    values = s->data;
  } else if (const auto* c = std::get_if<ChannelVolume>(&any)) {
    if (channel < 0 || channel >= c->channels)
      throw ConfigError("channel out of range for this volume");
    shape = c->shape;
    values.assign(c->channel(channel), c->channel(channel) + c->voxels());
  } else {
    const auto& l = std::get<LabelVolume>(any);
    shape = l.shape;
    values.assign(l.data.begin(), l.data.end());
    is_label = true;
    num_classes = l.num_classes;
  }

  const int extent[3] = {shape.nx, shape.ny, shape.nz};
  if (index < 0 || index >= extent[axis])
    throw ConfigError("slice index " + std::to_string(index) + " out of range 0.." +
                      std::to_string(extent[axis] - 1));

  const int w = axis == 0 ? shape.ny : shape.nx;
  const int h = axis == 2 ? shape.ny : shape.nz;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h);

  double lo = values[0], hi = values[0];
  for (double v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  auto gray = [&](double v) -> std::uint8_t {
    if (is_label) {
      // Distinct levels per class, spread over the full range.
      if (num_classes <= 1) return 0;
      return static_cast<std::uint8_t>(std::llround(v * 255.0 / (num_classes - 1)));
    }
    if (hi <= lo) return 0;
    return static_cast<std::uint8_t>(std::llround((v - lo) / (hi - lo) * 255.0));
  };
  for (int row = 0; row < h; ++row)
    for (int col = 0; col < w; ++col) {
      int x = 0, y = 0, z = 0;
      if (axis == 0) {
        x = index;
        y = col;
        z = row;
      } else if (axis == 1) {
        y = index;
        x = col;
        z = row;
      } else {
        z = index;
        x = col;
        y = row;
      }
      pixels[static_cast<std::size_t>(row) * w + col] = gray(values[shape.index(x, y, z)]);
    }

  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing", out_path);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()),
          static_cast<std::streamsize>(pixels.size()));
  if (!f) throw IoError("write failed", out_path);
  announce(out_path);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fissure-aware lung lobe segmentation toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic phantom dataset");
  std::string gen_spec, gen_out;
  int gen_cases = 1;
  gen->add_option("--spec", gen_spec, "phantom spec JSON (defaults when omitted)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--cases", gen_cases, "number of cases")->required()
      ->check(CLI::PositiveNumber);

  // fissure-gt
  auto* fgt = app.add_subcommand("fissure-gt", "derive fissure labels from lobe labels");
  std::string fgt_labels, fgt_out;
  int fgt_radius = 1;
  fgt->add_option("--labels", fgt_labels, "lobe label .vvol")->required();
  fgt->add_option("--radius", fgt_radius, "dilation radius")->check(CLI::PositiveNumber);
  fgt->add_option("--out", fgt_out, "output fissure label .vvol")->required();

  // train
  auto* tr = app.add_subcommand("train", "train one ablation arm");
  std::string tr_config, tr_data, tr_arm, tr_out;
  tr->add_option("--config", tr_config, "run config JSON (defaults when omitted)");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--arm", tr_arm, "baseline-ce | ace | ace+dice-fissure | ace+reg")
      ->required();
  tr->add_option("--out", tr_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a prediction against ground truth");
  std::string ev_pred, ev_gt, ev_out;
  int ev_radius = 1;
  ev->add_option("--pred", ev_pred, "predicted label .vvol")->required();
  ev->add_option("--gt", ev_gt, "ground-truth label .vvol")->required();
  ev->add_option("--out", ev_out, "metrics CSV path")->required();
  ev->add_option("--radius", ev_radius, "fissure band radius")->check(CLI::PositiveNumber);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_op;
  int gc_trials = 20;
  std::uint64_t gc_seed = 0;
  gc->add_option("--op", gc_op, "softmax|maxpool|ace|dice|fgm|reg-demons|reg-conv|combined")
      ->required();
  gc->add_option("--trials", gc_trials, "number of accepted instances")
      ->check(CLI::PositiveNumber);
  gc->add_option("--seed", gc_seed, "starting seed");

  // export-slice
  auto* ex = app.add_subcommand("export-slice", "export one slice as 8-bit PGM");
  std::string ex_volume, ex_axis = "z", ex_out;
  int ex_index = 0, ex_channel = 0;
  ex->add_option("--volume", ex_volume, "input .vvol")->required();
  ex->add_option("--axis", ex_axis, "x | y | z");
  ex->add_option("--index", ex_index, "slice index")->required();
  ex->add_option("--out", ex_out, "output .pgm")->required();
  ex->add_option("--channel", ex_channel, "channel for multi-channel volumes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }

  try {
    const FissureAdjacency adj = FissureAdjacency::default_lung();
    if (gen->parsed()) return cmd_gen_data(gen_spec, gen_out, gen_cases);
    if (fgt->parsed()) return cmd_fissure_gt(fgt_labels, fgt_radius, fgt_out, adj);
    if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_arm, tr_out);
    if (ev->parsed()) return cmd_eval(ev_pred, ev_gt, ev_out, ev_radius, adj);
    if (gc->parsed()) return cmd_gradcheck(gc_op, gc_trials, gc_seed);
    if (ex->parsed()) return cmd_export_slice(ex_volume, ex_axis, ex_index, ex_out, ex_channel);
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {  // ParameterError, RangeError, ContractError, ...
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
