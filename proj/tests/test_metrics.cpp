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

#include <catch2/catch_amalgamated.hpp>

#include "lobeseg/metrics.hpp"
#include "lobeseg/phantom.hpp"
#include "lobeseg/rng.hpp"
#include "oracles.hpp"

using namespace lobeseg;

namespace {

BinaryMask single_voxel(Shape3 s, int x, int y, int z) {
  BinaryMask m(s);
  m.set(x, y, z, true);
  return m;
}

}  // namespace

TEST_CASE("dsc basics") {
  const Shape3 s(4, 4, 4);
  BinaryMask a(s), b(s);
  a.set(1, 1, 1, true);
  a.set(2, 1, 1, true);
  b.set(1, 1, 1, true);
  b.set(3, 3, 3, true);
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, b) == 0.5);
  CHECK(dsc(single_voxel(s, 0, 0, 0), single_voxel(s, 3, 3, 3)) == 0.0);
  CHECK(dsc(BinaryMask(s), BinaryMask(s)) == 1.0);
  CHECK_THROWS_AS(dsc(a, BinaryMask(Shape3(2, 2, 2))), ParameterError);
}

TEST_CASE("hd95 and assd basics") {
  const Shape3 s(8, 8, 8);
  BinaryMask a = single_voxel(s, 1, 1, 1);
  BinaryMask b = single_voxel(s, 4, 1, 1);
  CHECK(hd95(a, a) == 0.0);
  CHECK(assd(a, a) == 0.0);
  CHECK(hd95(a, b) == 3.0);
  CHECK(assd(a, b) == 3.0);
  CHECK_THROWS_AS(hd95(a, BinaryMask(s)), UndefinedMetricError);
  CHECK_THROWS_AS(assd(BinaryMask(s), b), UndefinedMetricError);
}

TEST_CASE("surface extraction") {
  const Shape3 s(4, 4, 4);
  CHECK(surface_voxels(BinaryMask(s)).empty());
  BinaryMask full(s, true);
  // Only the 2x2x2 core of a full 4^3 block is interior.
  CHECK(surface_voxels(full).size() == 64 - 8);
}

TEST_CASE("distance metrics are symmetric and bounded") {
  Rng rng(113);
  for (int trial = 0; trial < 10; ++trial) {
    const Shape3 shape = oracles::random_shape(rng, 8);
    BinaryMask a = oracles::random_mask(rng, shape, 0.3);
    BinaryMask b = oracles::random_mask(rng, shape, 0.3);
    if (a.empty() || b.empty()) continue;
    CHECK(dsc(a, b) == dsc(b, a));
    CHECK(hd95(a, b) == hd95(b, a));
    CHECK(assd(a, b) == assd(b, a));

    // hd95 is bounded by the maximum pooled distance; assd by its hd100
    // analog.
    const auto sa = surface_voxels(a);
    const auto sb = surface_voxels(b);
    auto d1 = oracles::directed_distances_bruteforce(sa, sb);
    auto d2 = oracles::directed_distances_bruteforce(sb, sa);
    double maxd = 0.0;
    for (double d : d1) maxd = std::max(maxd, d);
    for (double d : d2) maxd = std::max(maxd, d);
    CHECK(hd95(a, b) <= maxd);
    CHECK(assd(a, b) <= maxd);
  }
}

TEST_CASE("hd95 and assd agree exactly with the all-pairs oracle") {
  Rng rng(127);
  int done = 0;
  while (done < 25) {
    const Shape3 shape = oracles::random_shape(rng, 12);
    BinaryMask a = oracles::random_mask(rng, shape, rng.uniform(0.05, 0.6));
    BinaryMask b = oracles::random_mask(rng, shape, rng.uniform(0.05, 0.6));
    if (a.empty() || b.empty()) continue;
    ++done;
    CHECK(hd95(a, b) == oracles::hd95_bruteforce(a, b));
    CHECK(assd(a, b) == oracles::assd_bruteforce(a, b));
    CHECK(dsc(a, b) == oracles::dsc_bruteforce(a, b));
  }
}

TEST_CASE("evaluate_segmentation of a perfect prediction") {
  const PhantomCase pc = generate_phantom(PhantomSpec::default_for(Shape3(16, 16, 16), 1));
  const MetricsReport r =
      evaluate_segmentation(pc.lobes, pc.lobes, FissureAdjacency::default_lung(), 1);
  REQUIRE(r.lobes.size() == 5);
  for (const auto& l : r.lobes) {
    CHECK(l.dsc == 1.0);
    REQUIRE(l.hd95.has_value());
    CHECK(*l.hd95 == 0.0);
  }
  for (const auto& f : r.fissures) {
    REQUIRE(f.assd.has_value());
    CHECK(*f.assd == 0.0);
  }
  CHECK(r.mean_dsc() == 1.0);
  CHECK(r.undefined_count() == 0);
}

TEST_CASE("one mislabeled voxel moves DSC by the counting ratio") {
  const PhantomCase pc = generate_phantom(PhantomSpec::default_for(Shape3(16, 16, 16), 2));
  LabelVolume pred = pc.lobes;
  std::size_t idx = 0;
  while (pred.data[idx] != 1) ++idx;
  pred.data[idx] = 2;
  const MetricsReport r =
      evaluate_segmentation(pred, pc.lobes, FissureAdjacency::default_lung(), 1);

  std::size_t n1 = 0, n2 = 0;
  for (auto v : pc.lobes.data) {
    n1 += v == 1;
    n2 += v == 2;
  }
  // Class 1 lost one predicted voxel: DSC = 2(n1-1)/(2n1-1).
  CHECK(r.lobes[0].dsc ==
        Catch::Approx(2.0 * (n1 - 1) / (2.0 * n1 - 1.0)).margin(1e-12));
  CHECK(r.lobes[1].dsc ==
        Catch::Approx(2.0 * n2 / (2.0 * n2 + 1.0)).margin(1e-12));
}

TEST_CASE("a fully missing class reports DSC zero and undefined distances") {
  LabelVolume gt(Shape3(4, 4, 4), 3);
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) gt.at(x, y, z) = z < 2 ? 1 : 2;
  LabelVolume pred = gt;
  for (auto& v : pred.data) v = 1;  // class 2 never predicted
  pred.num_classes = 3;
  const MetricsReport r = evaluate_segmentation(pred, gt, FissureAdjacency({{1, 1, 2}}), 1);
  CHECK(r.lobes[1].dsc == 0.0);
  CHECK_FALSE(r.lobes[1].hd95.has_value());
  CHECK(r.undefined_count() > 0);

  const std::string csv = r.to_csv("case0");
  CHECK(csv.find("NA") != std::string::npos);
  const auto j = r.to_json();
  CHECK(j["lobes"][1]["hd95"].is_null());
}
