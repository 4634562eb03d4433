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

// End-to-end checks of the lobeseg binary: exit codes, file outputs,
// determinism. The binary path comes from the build system.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "lobeseg/vvol_io.hpp"

using namespace lobeseg;
namespace fs = std::filesystem;

namespace {

const std::string kCli = LOBESEG_CLI_PATH;

struct RunResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path log = fs::temp_directory_path() / ("lobeseg_cli_out_" +
                                                    std::to_string(counter++) + ".txt");
  const std::string cmd = kCli + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream f(log);
  r.output.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  fs::remove(log);
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("lobeseg_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++n;
  return n;
}

}  // namespace

TEST_CASE("gen-data writes two files per case and is reproducible") {
  const fs::path dir = fresh_dir("gendata");
  const fs::path spec = dir / "spec.json";
  std::ofstream(spec) << R"({"dims":[10,10,10],"seed":3})";
  const RunResult r =
      run_cli("gen-data --spec " + spec.string() + " --out " + (dir / "a").string() +
              " --cases 5");
  REQUIRE(r.exit_code == 0);
  CHECK(count_files(dir / "a") == 10);

  run_cli("gen-data --spec " + spec.string() + " --out " + (dir / "b").string() +
          " --cases 5");
  for (int k = 0; k < 5; ++k) {
    const std::string img = "case_" + std::to_string(k) + "_img.vvol";
    CHECK(slurp(dir / "a" / img) == slurp(dir / "b" / img));
  }
}

TEST_CASE("gen-data rejects a non-positive case count") {
  const fs::path dir = fresh_dir("gendata0");
  const RunResult r = run_cli("gen-data --out " + dir.string() + " --cases 0");
  CHECK(r.exit_code == 2);
}

TEST_CASE("gen-data rejects unknown spec keys") {
  const fs::path dir = fresh_dir("genbadspec");
  const fs::path spec = dir / "spec.json";
  std::ofstream(spec) << R"({"dims":[8,8,8],"resolution":1.0})";
  const RunResult r = run_cli("gen-data --spec " + spec.string() + " --out " + dir.string() +
                              " --cases 1");
  CHECK(r.exit_code == 2);
}

TEST_CASE("fissure-gt reproduces the line example through files") {
  const fs::path dir = fresh_dir("fgt");
  const fs::path labels = dir / "lobes.vvol";
  write_volume(labels.string(), LabelVolume(Shape3(1, 1, 4), {1, 1, 2, 2}, 3));
  const fs::path out = dir / "fissures.vvol";
  const RunResult r = run_cli("fissure-gt --labels " + labels.string() + " --radius 1 --out " +
                              out.string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find(out.string()) != std::string::npos);
  const LabelVolume f = read_label_volume(out.string());
  CHECK(f.data == std::vector<std::uint8_t>{0, 1, 1, 0});
}

TEST_CASE("fissure-gt on a single-lobe volume is all background") {
  const fs::path dir = fresh_dir("fgt1");
  const fs::path labels = dir / "lobes.vvol";
  LabelVolume lobes(Shape3(3, 3, 3), 6);
  for (auto& v : lobes.data) v = 2;
  write_volume(labels.string(), lobes);
  const fs::path out = dir / "fissures.vvol";
  REQUIRE(run_cli("fissure-gt --labels " + labels.string() + " --out " + out.string())
              .exit_code == 0);
  const LabelVolume f = read_label_volume(out.string());
  for (auto v : f.data) CHECK(v == 0);
}

TEST_CASE("fissure-gt on a missing file exits with the data code") {
  const RunResult r = run_cli("fissure-gt --labels /nonexistent/x.vvol --out /tmp/y.vvol");
  CHECK(r.exit_code == 3);
}

TEST_CASE("train smoke run writes its reports and is seed-stable") {
  const fs::path dir = fresh_dir("train");
  REQUIRE(run_cli("gen-data --out " + (dir / "data").string() + " --cases 1").exit_code == 0);
  // Shrink the default spec for speed: regenerate with a small config.
  const fs::path spec = dir / "spec.json";
  std::ofstream(spec) << R"({"dims":[8,8,8],"seed":1})";
  REQUIRE(run_cli("gen-data --spec " + spec.string() + " --out " + (dir / "data8").string() +
                  " --cases 1")
              .exit_code == 0);
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << R"({"train":{"total_steps":25,"seed":5}})";

  const RunResult r1 = run_cli("train --config " + cfg.string() + " --data " +
                               (dir / "data8").string() + " --arm ace+reg --out " +
                               (dir / "run1").string());
  REQUIRE(r1.exit_code == 0);
  CHECK(fs::exists(dir / "run1" / "train_log.csv"));
  CHECK(fs::exists(dir / "run1" / "report.json"));
  CHECK(fs::exists(dir / "run1" / "run_stats.json"));
  CHECK(fs::exists(dir / "run1" / "pred_0.vvol"));

  const RunResult r2 = run_cli("train --config " + cfg.string() + " --data " +
                               (dir / "data8").string() + " --arm ace+reg --out " +
                               (dir / "run2").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(dir / "run1" / "train_log.csv") == slurp(dir / "run2" / "train_log.csv"));
  CHECK(slurp(dir / "run1" / "report.json") == slurp(dir / "run2" / "report.json"));
  CHECK(slurp(dir / "run1" / "pred_0.vvol") == slurp(dir / "run2" / "pred_0.vvol"));
}

TEST_CASE("train rejects an unknown arm and lists the valid ones") {
  const fs::path dir = fresh_dir("badarm");
  const RunResult r =
      run_cli("train --data " + dir.string() + " --arm bogus --out " + dir.string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("ace+reg") != std::string::npos);
}

TEST_CASE("train rejects a config with unknown keys") {
  const fs::path dir = fresh_dir("badcfg");
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << R"({"train":{"total_steps":5,"momentum":0.9}})";
  const RunResult r = run_cli("train --config " + cfg.string() + " --data " + dir.string() +
                              " --arm ace --out " + dir.string());
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("momentum") != std::string::npos);
}

TEST_CASE("eval emits a perfect row for identical volumes") {
  const fs::path dir = fresh_dir("eval");
  const fs::path labels = dir / "gt.vvol";
  LabelVolume gt(Shape3(6, 6, 6), 6);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        gt.at(x, y, z) = static_cast<std::uint8_t>(x < 3 ? (z < 3 ? 2 : 1) : (z < 2 ? 5 : z < 4 ? 4 : 3));
  write_volume(labels.string(), gt);
  const fs::path out = dir / "metrics.csv";
  const RunResult r = run_cli("eval --pred " + labels.string() + " --gt " + labels.string() +
                              " --out " + out.string());
  REQUIRE(r.exit_code == 0);
  const std::string csv = slurp(out);
  CHECK(csv.find("case,lobe,1,LU,1.000000,0.000000,NA") != std::string::npos);
  CHECK(csv.find("case,mean") != std::string::npos);
}

TEST_CASE("eval rejects mismatched shapes") {
  const fs::path dir = fresh_dir("evalbad");
  write_volume((dir / "a.vvol").string(), LabelVolume(Shape3(2, 2, 2), 2));
  write_volume((dir / "b.vvol").string(), LabelVolume(Shape3(3, 2, 2), 2));
  const RunResult r = run_cli("eval --pred " + (dir / "a.vvol").string() + " --gt " +
                              (dir / "b.vvol").string() + " --out " + (dir / "m.csv").string());
  CHECK(r.exit_code == 2);
}

TEST_CASE("gradcheck subcommand passes for ace and rejects unknown ops") {
  CHECK(run_cli("gradcheck --op ace --trials 3 --seed 1").exit_code == 0);
  CHECK(run_cli("gradcheck --op fgm --trials 2 --seed 1").exit_code == 0);
  CHECK(run_cli("gradcheck --op bogus").exit_code == 2);
}

TEST_CASE("export-slice produces PGM images") {
  const fs::path dir = fresh_dir("slice");
  const fs::path vol = dir / "img.vvol";
  write_volume(vol.string(), ScalarVolume(Shape3(4, 4, 4), 0.7));
  const fs::path pgm = dir / "slice.pgm";
  REQUIRE(run_cli("export-slice --volume " + vol.string() + " --axis z --index 2 --out " +
                  pgm.string())
              .exit_code == 0);
  const std::string bytes = slurp(pgm);
  CHECK(bytes.substr(0, 3) == "P5\n");
  // Constant volume: every pixel identical.
  const std::string body = bytes.substr(bytes.find("255\n") + 4);
  REQUIRE(body.size() == 16);
  for (char c : body) CHECK(c == body[0]);

  const fs::path lab = dir / "lab.vvol";
  write_volume(lab.string(), LabelVolume(Shape3(2, 2, 1), {0, 1, 2, 3}, 4));
  const fs::path lab_pgm = dir / "lab.pgm";
  REQUIRE(run_cli("export-slice --volume " + lab.string() + " --axis z --index 0 --out " +
                  lab_pgm.string())
              .exit_code == 0);
  const std::string lab_bytes = slurp(lab_pgm);
  const std::string lab_body = lab_bytes.substr(lab_bytes.find("255\n") + 4);
  REQUIRE(lab_body.size() == 4);
  std::set<char> levels(lab_body.begin(), lab_body.end());
  CHECK(levels.size() == 4);

  CHECK(run_cli("export-slice --volume " + vol.string() + " --axis z --index 9 --out " +
                pgm.string())
            .exit_code == 2);
  CHECK(run_cli("export-slice --volume " + vol.string() + " --axis w --index 0 --out " +
                pgm.string())
            .exit_code == 2);
}

TEST_CASE("every subcommand prints produced paths") {
  const fs::path dir = fresh_dir("paths");
  const RunResult r = run_cli("gen-data --out " + dir.string() + " --cases 1");
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("case_0_img.vvol") != std::string::npos);
  CHECK(r.output.find("case_0_lab.vvol") != std::string::npos);
}
