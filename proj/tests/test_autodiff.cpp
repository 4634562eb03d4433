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

#include <cstring>

#include "lobeseg/autodiff.hpp"
#include "lobeseg/gradcheck.hpp"
#include "lobeseg/rng.hpp"

using namespace lobeseg;

namespace {

ChannelVolume random_volume(Rng& rng, int channels, Shape3 shape, double lo, double hi) {
  ChannelVolume v(channels, shape);
  for (auto& x : v.data) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape t;
  NodeId y = t.softmax_channels(t.leaf(ChannelVolume(2, Shape3(1, 1, 1), {0.0, 0.0})));
  CHECK(t.value(y).data[0] == 0.5);
  CHECK(t.value(y).data[1] == 0.5);
}

TEST_CASE("softmax is shift invariant") {
  for (double shift : {-3.0, 1.0, 17.5}) {
    Tape t1, t2;
    ChannelVolume a(3, Shape3(1, 1, 1), {0.3, -0.2, 1.1});
    ChannelVolume b = a;
    for (auto& v : b.data) v += shift;
    const ChannelVolume& y1 = t1.value(t1.softmax_channels(t1.leaf(a)));
    const ChannelVolume& y2 = t2.value(t2.softmax_channels(t2.leaf(b)));
    for (int c = 0; c < 3; ++c)
      CHECK(y1.data[c] == Catch::Approx(y2.data[c]).margin(1e-12));
  }
}

TEST_CASE("softmax channels sum to one within 1e-12") {
  Rng rng(17);
  Tape t;
  NodeId y = t.softmax_channels(t.leaf(random_volume(rng, 5, Shape3(3, 3, 3), -4.0, 4.0)));
  const ChannelVolume& v = t.value(y);
  const std::size_t n = v.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int c = 0; c < 5; ++c) sum += v.data[c * n + i];
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax gradient matches finite differences to 1e-6") {
  Rng rng(23);
  const ChannelVolume x = random_volume(rng, 3, Shape3(2, 2, 2), -1.0, 1.0);
  ChannelVolume w = random_volume(rng, 3, Shape3(2, 2, 2), -1.0, 1.0);
  const FdResult fd = finite_difference_check(x, [w](Tape& t, NodeId leaf) {
    return t.sum_all(t.mul(t.softmax_channels(leaf), t.constant(w)));
  });
  CHECK(fd.max_rel_err < 1e-6);
}

TEST_CASE("softmax rejects non-finite inputs") {
  Tape t;
  // Overflow exp() on the tape; constructors would reject an inf leaf.
  NodeId big = t.exp(t.leaf(ChannelVolume(2, Shape3(1, 1, 1), {800.0, 0.0})));
  CHECK_THROWS_AS(t.softmax_channels(big), NumericError);
  CHECK_THROWS_AS(
      ChannelVolume(2, Shape3(1, 1, 1),
                    std::vector<double>{std::numeric_limits<double>::infinity(), 0.0}),
      NumericError);
}

TEST_CASE("maxpool3 window maximum on a line") {
  Tape t;
  NodeId p = t.maxpool3(t.leaf(ChannelVolume(1, Shape3(1, 1, 3), {1.0, 3.0, 2.0})), 1);
  CHECK(t.value(p).data == std::vector<double>{3.0, 3.0, 3.0});
}

TEST_CASE("maxpool3 adjoint routes to the single argmax") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 3), {1.0, 3.0, 2.0}));
  t.backward(t.sum_all(t.maxpool3(leaf, 1)));  // upstream grad 1 at each output
  CHECK(t.grad(leaf).data == std::vector<double>{0.0, 3.0, 0.0});
}

TEST_CASE("maxpool3 of zeros stays zero through an l1 root") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(2, 2, 2), 0.0));
  NodeId pooled = t.maxpool3(leaf, 1);
  for (double v : t.value(pooled).data) CHECK(v == 0.0);
  t.backward(t.l1_norm(pooled));
  for (double v : t.grad(leaf).data) CHECK(v == 0.0);
}

TEST_CASE("maxpool3 zero padding wins over negative borders") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 2), {-1.0, -2.0}));
  NodeId pooled = t.maxpool3(leaf, 1);
  CHECK(t.value(pooled).data == std::vector<double>{0.0, 0.0});
  t.backward(t.sum_all(pooled));
  // Only the padding attains the maximum, so the adjoint is dropped.
  CHECK(t.grad(leaf).data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("maxpool3 rejects radius zero") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 1), {1.0}));
  CHECK_THROWS_AS(t.maxpool3(leaf, 0), ParameterError);
}

TEST_CASE("maxpool3 is monotone") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const Shape3 s(3, 4, 2);
    ChannelVolume a = random_volume(rng, 2, s, 0.0, 1.0);
    ChannelVolume b = a;
    for (auto& v : b.data) v += rng.uniform(0.0, 0.5);
    Tape t;
    const ChannelVolume& pa = t.value(t.maxpool3(t.leaf(a), 1));
    const ChannelVolume& pb = t.value(t.maxpool3(t.leaf(b), 1));
    for (std::size_t i = 0; i < pa.data.size(); ++i) CHECK(pa.data[i] <= pb.data[i]);
  }
}

TEST_CASE("backward of sum_all seeds every leaf entry with one") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(2, Shape3(2, 1, 1), {0.3, -0.7, 2.0, 0.1}));
  t.backward(t.sum_all(leaf));
  for (double v : t.grad(leaf).data) CHECK(v == 1.0);
}

TEST_CASE("backward of l1_norm applies the sign rule") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 4), {0.5, 1.0, 2.0, 0.25}));
  t.backward(t.l1_norm(leaf));
  for (double v : t.grad(leaf).data) CHECK(v == 1.0);

  Tape t2;
  NodeId mixed = t2.leaf(ChannelVolume(1, Shape3(1, 1, 3), {-2.0, 0.0, 3.0}));
  t2.backward(t2.l1_norm(mixed));
  CHECK(t2.grad(mixed).data == std::vector<double>{-1.0, 0.0, 1.0});
}

TEST_CASE("l1_norm is positive definite") {
  Rng rng(37);
  Tape t;
  NodeId zero = t.leaf(ChannelVolume(1, Shape3(2, 2, 2), 0.0));
  CHECK(t.scalar_value(t.l1_norm(zero)) == 0.0);
  NodeId nonzero = t.leaf(random_volume(rng, 1, Shape3(2, 2, 2), -1.0, 1.0));
  CHECK(t.scalar_value(t.l1_norm(nonzero)) > 0.0);
}

TEST_CASE("backward requires a scalar root and runs once") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 2), {1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(leaf), ContractError);
  NodeId root = t.sum_all(leaf);
  t.backward(root);
  CHECK_THROWS_AS(t.backward(root), ContractError);
}

TEST_CASE("elementwise adjoints match finite differences") {
  Rng rng(41);
  const Shape3 s(2, 2, 2);
  const ChannelVolume x = random_volume(rng, 2, s, 0.2, 1.5);
  const ChannelVolume other = random_volume(rng, 2, s, 0.5, 1.5);

  const std::vector<std::pair<const char*, GraphBuilder>> builders = {
      {"add", [other](Tape& t, NodeId a) { return t.sum_all(t.add(a, t.constant(other))); }},
      {"sub", [other](Tape& t, NodeId a) { return t.sum_all(t.sub(a, t.constant(other))); }},
      {"mul", [other](Tape& t, NodeId a) { return t.sum_all(t.mul(a, t.constant(other))); }},
      {"div", [other](Tape& t, NodeId a) { return t.sum_all(t.div(a, t.constant(other))); }},
      {"div_denom",
       [other](Tape& t, NodeId a) { return t.sum_all(t.div(t.constant(other), a)); }},
      {"log", [](Tape& t, NodeId a) { return t.sum_all(t.log(a)); }},
      {"exp", [](Tape& t, NodeId a) { return t.sum_all(t.exp(a)); }},
      {"tanh", [](Tape& t, NodeId a) { return t.sum_all(t.tanh(a)); }},
      {"one_minus", [](Tape& t, NodeId a) { return t.sum_all(t.one_minus(a)); }},
      {"scalar_mul", [](Tape& t, NodeId a) { return t.sum_all(t.scalar_mul(a, -1.7)); }},
      {"scalar_add", [](Tape& t, NodeId a) { return t.sum_all(t.scalar_add(a, 0.3)); }},
      {"mean_all", [](Tape& t, NodeId a) { return t.mean_all(a); }},
      {"normalize",
       [](Tape& t, NodeId a) { return t.mean_all(t.mul(t.normalize_channels(a), a)); }},
      {"channel_product", [](Tape& t, NodeId a) { return t.sum_all(t.channel_product(a)); }},
      {"gauss", [](Tape& t, NodeId a) { return t.mean_all(t.gaussian_smooth(a, 0.8)); }},
      {"select_concat",
       [](Tape& t, NodeId a) {
         return t.sum_all(t.mul(t.concat_channels({t.select_channel(a, 1),
                                                   t.select_channel(a, 0)}),
                                a));
       }},
  };
  for (const auto& [name, build] : builders) {
    INFO(name);
    const FdResult fd = finite_difference_check(x, build);
    CHECK(fd.max_rel_err < 1e-5);
  }
}

TEST_CASE("log is floored and its adjoint vanishes below the floor") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(1, Shape3(1, 1, 2), {1e-15, 1.0}));
  NodeId lg = t.log(leaf);
  CHECK(t.value(lg).data[0] == std::log(1e-12));
  t.backward(t.sum_all(lg));
  CHECK(t.grad(leaf).data[0] == 0.0);
  CHECK(t.grad(leaf).data[1] == 1.0);
}

TEST_CASE("channel_product adjoint is exact at zeros") {
  Tape t;
  NodeId leaf = t.leaf(ChannelVolume(2, Shape3(1, 1, 1), {0.0, 5.0}));
  t.backward(t.sum_all(t.channel_product(leaf)));
  CHECK(t.grad(leaf).data == std::vector<double>{5.0, 0.0});

  Tape t2;
  NodeId two_zeros = t2.leaf(ChannelVolume(3, Shape3(1, 1, 1), {0.0, 0.0, 4.0}));
  t2.backward(t2.sum_all(t2.channel_product(two_zeros)));
  CHECK(t2.grad(two_zeros).data == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("detach stops gradient flow") {
  Tape t;
  const ChannelVolume x(1, Shape3(1, 1, 2), {2.0, 3.0});
  NodeId leaf = t.leaf(x);
  t.backward(t.sum_all(t.mul(t.detach(leaf), leaf)));
  // Only the undetached factor contributes, so the adjoint equals the value.
  CHECK(t.grad(leaf).data == x.data);
}

TEST_CASE("conv3d adjoints match finite differences in input, weights and bias") {
  Rng rng(47);
  const Shape3 s(3, 3, 3);
  const ChannelVolume x = random_volume(rng, 2, s, -1.0, 1.0);
  const ChannelVolume w = random_volume(rng, 3 * 2, Shape3(3, 3, 3), -0.5, 0.5);
  const ChannelVolume b = random_volume(rng, 3, Shape3(1, 1, 1), -0.2, 0.2);

  const FdResult fd_x = finite_difference_check(x, [w, b](Tape& t, NodeId a) {
    return t.mean_all(t.tanh(t.conv3d(a, t.constant(w), t.constant(b), 3)));
  });
  CHECK(fd_x.max_rel_err < 1e-5);

  const FdResult fd_w = finite_difference_check(w, [x, b](Tape& t, NodeId wn) {
    return t.mean_all(t.tanh(t.conv3d(t.constant(x), wn, t.constant(b), 3)));
  });
  CHECK(fd_w.max_rel_err < 1e-5);

  const FdResult fd_b = finite_difference_check(b, [x, w](Tape& t, NodeId bn) {
    return t.mean_all(t.tanh(t.conv3d(t.constant(x), t.constant(w), bn, 3)));
  });
  CHECK(fd_b.max_rel_err < 1e-5);
}

TEST_CASE("composite loss adjoints match finite differences") {
  // ACE + Dice + registration through the full generated-fissure pipeline.
  const auto outcomes = run_gradcheck(CheckableOp::combined, 3, 99);
  for (const auto& o : outcomes) CHECK(o.max_rel_err < 1e-5);
}
