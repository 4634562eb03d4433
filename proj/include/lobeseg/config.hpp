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

// Run configuration: one JSON file drives phantom generation, training,
// the adjacency table and the registration operator. Validation is strict:
// unknown keys are rejected so typos cannot silently fall back to defaults.

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lobeseg/adjacency.hpp"
#include "lobeseg/errors.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/registration.hpp"
#include "lobeseg/trainer.hpp"

namespace lobeseg {

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
}

inline QuadraticSurface parse_surface(const nlohmann::json& j, const std::string& where) {
  reject_unknown(j, {"a", "bx", "by", "cxx", "cxy", "cyy"}, where);
  QuadraticSurface s;
  s.a = j.value("a", 0.0);
  s.bx = j.value("bx", 0.0);
  s.by = j.value("by", 0.0);
  s.cxx = j.value("cxx", 0.0);
  s.cxy = j.value("cxy", 0.0);
  s.cyy = j.value("cyy", 0.0);
  return s;
}

}  // namespace config_detail

inline PhantomSpec parse_phantom_spec(const nlohmann::json& j) {
  config_detail::reject_unknown(j,
                                {"dims", "seed", "incompleteness", "noise_sigma",
                                 "fissure_contrast", "surfaces"},
                                "phantom");
  Shape3 shape(32, 32, 32);
  if (j.contains("dims")) {
    if (!j["dims"].is_array() || j["dims"].size() != 3)
      throw ConfigError("phantom.dims: expected [nx,ny,nz]");
    shape = Shape3(j["dims"][0].get<int>(), j["dims"][1].get<int>(), j["dims"][2].get<int>());
  }
  PhantomSpec spec = PhantomSpec::default_for(shape, j.value("seed", 0ULL));
  spec.incompleteness = j.value("incompleteness", 0.0);
  spec.noise_sigma = j.value("noise_sigma", 0.0);
  spec.fissure_contrast = j.value("fissure_contrast", 0.3);
  if (j.contains("surfaces")) {
    const auto& s = j["surfaces"];
    config_detail::reject_unknown(s, {"left_oblique", "right_upper", "right_lower"},
                                  "phantom.surfaces");
    if (s.contains("left_oblique"))
      spec.left_oblique =
          config_detail::parse_surface(s["left_oblique"], "phantom.surfaces.left_oblique");
    if (s.contains("right_upper"))
      spec.right_upper =
          config_detail::parse_surface(s["right_upper"], "phantom.surfaces.right_upper");
    if (s.contains("right_lower"))
      spec.right_lower =
          config_detail::parse_surface(s["right_lower"], "phantom.surfaces.right_lower");
  }
  spec.validate();
  return spec;
}

inline RegistrationConfig parse_registration(const nlohmann::json& j) {
  config_detail::reject_unknown(j, {"kind", "iterations", "sigma", "seed"}, "registration");
  RegistrationConfig cfg;
  const std::string kind = j.value("kind", "demons");
  if (kind == "demons")
    cfg.kind = RegistrationKind::demons;
  else if (kind == "seeded-conv")
    cfg.kind = RegistrationKind::seeded_conv;
  else
    throw ConfigError("registration.kind: expected \"demons\" or \"seeded-conv\", got \"" +
                      kind + "\"");
  cfg.iterations = j.value("iterations", 3);
  cfg.sigma = j.value("sigma", 1.0);
  cfg.seed = j.value("seed", 0ULL);
  if (cfg.kind == RegistrationKind::demons && (cfg.iterations < 1 || !(cfg.sigma > 0.0)))
    throw ConfigError("registration: demons needs iterations >= 1 and sigma > 0");
  return cfg;
}

inline FissureAdjacency parse_adjacency(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("adjacency: expected a list of [fissure,lobeA,lobeB]");
  std::vector<FissureEntry> entries;
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != 3)
      throw ConfigError("adjacency: each entry must be [fissure,lobeA,lobeB]");
    entries.push_back({row[0].get<int>(), row[1].get<int>(), row[2].get<int>()});
  }
  try {
    return FissureAdjacency(entries);
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("adjacency: ") + e.what());
  }
}

inline TrainConfig parse_train_config(const nlohmann::json& j) {
  config_detail::reject_unknown(
      j,
      {"total_steps", "learning_rate", "weight_decay", "optimizer", "beta1", "beta2",
       "adam_eps", "alpha_max", "pool_radius", "seed", "lambda1", "lambda2", "model",
       "input_noise_sigma"},
      "train");
  TrainConfig cfg;
  cfg.total_steps = j.value("total_steps", 2000L);
  cfg.learning_rate = j.value("learning_rate", 0.001);
  cfg.weight_decay = j.value("weight_decay", 1e-4);
  const std::string opt = j.value("optimizer", "adam");
  if (opt == "adam")
    cfg.optimizer = OptimizerKind::adam;
  else if (opt == "sgd")
    cfg.optimizer = OptimizerKind::sgd;
  else
    throw ConfigError("train.optimizer: expected \"adam\" or \"sgd\"");
  cfg.beta1 = j.value("beta1", 0.9);
  cfg.beta2 = j.value("beta2", 0.999);
  cfg.adam_eps = j.value("adam_eps", 1e-8);
  cfg.alpha_max = j.value("alpha_max", 0.9);
  cfg.pool_radius = j.value("pool_radius", 1);
  cfg.seed = j.value("seed", 0ULL);
  cfg.lambda1 = j.value("lambda1", 1.0);
  cfg.lambda2 = j.value("lambda2", 1.0);
  const std::string model = j.value("model", "direct-logit");
  if (model == "direct-logit")
    cfg.model = ModelKind::direct_logit;
  else if (model == "tiny-conv")
    cfg.model = ModelKind::tiny_conv;
  else
    throw ConfigError("train.model: expected \"direct-logit\" or \"tiny-conv\"");
  cfg.input_noise_sigma = j.value("input_noise_sigma", 0.0);
  cfg.validate();
  return cfg;
}

struct RunConfig {
  PhantomSpec phantom = PhantomSpec::default_for(Shape3(32, 32, 32));
  TrainConfig train;
  FissureAdjacency adjacency = FissureAdjacency::default_lung();

  static RunConfig from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(j, {"phantom", "train", "registration", "adjacency"},
                                  "config");
    RunConfig cfg;
    if (j.contains("phantom")) cfg.phantom = parse_phantom_spec(j["phantom"]);
    if (j.contains("train")) cfg.train = parse_train_config(j["train"]);
    if (j.contains("registration"))
      cfg.train.registration = parse_registration(j["registration"]);
    if (j.contains("adjacency")) cfg.adjacency = parse_adjacency(j["adjacency"]);
    return cfg;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config", path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    return from_json(j);
  }
};

}  // namespace lobeseg
