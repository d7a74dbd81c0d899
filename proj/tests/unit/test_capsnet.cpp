#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "caps/capsnet.hpp"
#include "caps/losses.hpp"
#include "routing_oracle.hpp"
#include "test_support.hpp"
#include "tiny_capsnet.hpp"

using namespace caps;
using namespace testing_support;

namespace {

std::vector<float> to_vec(std::span<const float> s) { return {s.begin(), s.end()}; }

double row_norm(std::span<const float> v, std::size_t row, std::size_t dim) {
  double sq = 0.0;
  for (std::size_t d = 0; d < dim; ++d) sq += static_cast<double>(v[row * dim + d]) * v[row * dim + d];
  return std::sqrt(sq);
}

}  // namespace

TEST(CapsNetConfig, DefaultGeometry) {
  const CapsNetConfig c;
  EXPECT_EQ(c.stem_side(), 20u);
  EXPECT_EQ(c.primary_side(), 6u);
  EXPECT_EQ(c.n_primary(), 1152u);
  EXPECT_EQ(c.decoder_output(), 784u);

  CapsNetConfig bad = c;
  bad.routing_iterations = 0;
  EXPECT_THROW(bad.validate(), ContractError);
  bad = c;
  bad.input_side = 10;  // stem leaves 2x2, too small for the 9x9 primary kernel
  EXPECT_THROW(bad.validate(), ShapeError);
}

TEST(CapsNetParameters, DefaultConfigLayerRows) {
  Rng rng(1);
  const CapsNet net(CapsNetConfig{}, rng);
  const auto report = net.count_parameters();
  const std::vector<std::pair<std::string, std::size_t>> want = {
      {"conv", 20992},          {"primary_caps", 5308672}, {"digit_caps", 1474560},
      {"decoder_fc0", 82432},   {"decoder_fc1", 525312},   {"decoder_fc2", 803600}};
  ASSERT_EQ(report.rows.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(report.rows[i].layer, want[i].first);
    EXPECT_EQ(report.rows[i].weights_and_biases, want[i].second);
  }
  EXPECT_EQ(report.rows[2].routing_weights, 11520u);
  EXPECT_EQ(report.routing, 11520u);
  EXPECT_EQ(report.total, 8227088u);
  EXPECT_EQ(report.trainable, parameter_count(net.parameters()));
}

TEST(PrimaryCapsules, DefaultShapeAndNorms) {
  Rng rng(2);
  const CapsNet net(CapsNetConfig{}, rng);
  const Tensor image = Tensor::uniform({1, 1, 28, 28}, 0.0f, 1.0f, rng);
  ForwardOptions options;
  options.reconstruct = false;
  const auto out = net.forward(image, std::nullopt, options);
  EXPECT_EQ(out.routing.coupling.shape(), (Shape{1, 1152, 10}));

  CapsNetConfig small;
  small.stem_channels = 16;
  small.primary.channels = 4;
  Rng rng2(3);
  const CapsNet net2(small, rng2);
  const Tensor stem = Tensor::uniform({2, 16, 20, 20}, 0.0f, 1.0f, rng2);
  const CapsuleBlock u = net2.primary_capsules(stem);
  ASSERT_EQ(u.values.shape(), (Shape{2, 144, 8}));
  for (std::size_t r = 0; r < 2 * 144; ++r) EXPECT_LT(row_norm(u.values.data(), r, 8), 1.0);
  EXPECT_THROW(net2.primary_capsules(Tensor::zeros({2, 8, 20, 20})), ShapeError);
}

TEST(PrimaryCapsules, RegroupsChannelsIntoCapsules) {
  // Capsule (c, y, x) collects channels c*D .. c*D+D-1 at one location.
  CapsNetConfig c = tiny_capsnet_config();
  Rng rng(4);
  CapsNet net(c, rng);
  const Tensor stem = Tensor::uniform({1, 2, 6, 6}, 0.0f, 1.0f, rng);
  const CapsuleBlock u = net.primary_capsules(stem);
  const auto params = net.parameters();
  const Tensor maps = conv2d(stem, params[2].tensor, params[3].tensor, c.primary_spec());  // [1, 4, 2, 2]
  const std::size_t side = c.primary_side(), dim = c.primary.capsule_dim;
  for (std::size_t ch = 0; ch < c.primary.channels; ++ch)
    for (std::size_t p = 0; p < side * side; ++p) {
      std::vector<double> s(dim);
      for (std::size_t d = 0; d < dim; ++d) s[d] = maps.data()[(ch * dim + d) * side * side + p];
      const auto v = oracle_squash(s, 1, dim);
      for (std::size_t d = 0; d < dim; ++d) {
        EXPECT_NEAR(u.values.at({0, ch * side * side + p, d}), v[d], 1e-6);
      }
    }
}

TEST(Votes, IdentityZeroAndOracle) {
  Rng rng(5);
  const Tensor u = Tensor::uniform({3, 4}, -1.0f, 1.0f, rng);
  std::vector<float> eye(3 * 2 * 4 * 4, 0.0f);
  for (std::size_t ij = 0; ij < 6; ++ij)
    for (std::size_t d = 0; d < 4; ++d) eye[ij * 16 + d * 4 + d] = 1.0f;
  const VoteTensor same = compute_votes({u}, Tensor::from_data({3, 2, 4, 4}, eye));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t d = 0; d < 4; ++d) EXPECT_EQ(same.votes.at({i, j, d}), u.at({i, d}));

  const Tensor w = Tensor::uniform({3, 2, 4, 5}, -1.0f, 1.0f, rng);
  const VoteTensor zero = compute_votes({Tensor::zeros({3, 4})}, w);
  for (float x : zero.votes.data()) EXPECT_EQ(x, 0.0f);

  const VoteTensor v = compute_votes({u}, w);
  ASSERT_EQ(v.votes.shape(), (Shape{3, 2, 5}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t d = 0; d < 5; ++d) {
        double acc = 0.0;
        for (std::size_t p = 0; p < 4; ++p) acc += static_cast<double>(u.at({i, p})) * w.at({i, j, p, d});
        EXPECT_NEAR(v.votes.at({i, j, d}), acc, 1e-6);
      }
  EXPECT_THROW(compute_votes({Tensor::zeros({3, 5})}, w), ShapeError);
  EXPECT_THROW(compute_votes({Tensor::zeros({2, 4})}, w), ShapeError);
}

TEST(Votes, Gradients) {
  Rng rng(6);
  auto u = random_leaf({2, 3, 4}, rng);
  auto w = random_leaf({3, 2, 4, 5}, rng);
  EXPECT_LT(check_gradients([&] { return project(compute_votes({u}, w).votes); }, {u, w}).rel_error, 1e-3);
}

TEST(Squash, Examples) {
  EXPECT_EQ(to_vec(squash(Tensor::zeros({1, 3})).data()), (std::vector<float>{0, 0, 0}));
  const Tensor unit = squash(Tensor::from_data({1, 2}, {0.6f, 0.8f}));
  EXPECT_NEAR(row_norm(unit.data(), 0, 2), 0.5, 1e-6);
  const Tensor three = squash(Tensor::from_data({1, 2}, {0.0f, 3.0f}));
  EXPECT_NEAR(row_norm(three.data(), 0, 2), 0.9, 1e-6);
}

TEST(Squash, DirectionNormAndMonotonicity) {
  Rng rng(7);
  double previous = -1.0;
  for (int k = 1; k <= 200; ++k) {
    const float len = 0.05f * static_cast<float>(k);
    std::vector<float> s(5);
    double sq = 0.0;
    for (auto& x : s) {
      x = rng.uniform(-1.0f, 1.0f);
      sq += static_cast<double>(x) * x;
    }
    for (auto& x : s) x = static_cast<float>(x * len / std::sqrt(sq));
    const Tensor v = squash(Tensor::from_data({1, 5}, s));
    const double nv = row_norm(v.data(), 0, 5);
    const double ns = len;
    EXPECT_NEAR(nv, ns * ns / (1.0 + ns * ns), 1e-6);
    EXPECT_LT(nv, 1.0);
    EXPECT_GT(nv, previous);
    previous = nv;
    // Positively collinear: v = (nv / ns) s.
    for (std::size_t d = 0; d < 5; ++d) EXPECT_NEAR(v.data()[d], nv / ns * s[d], 1e-6);
  }
}

TEST(Squash, GradientsIncludingZero) {
  Rng rng(8);
  auto s = random_leaf({4, 3}, rng, -2.0f, 2.0f);
  EXPECT_LT(check_gradients([&] { return project(squash(s)); }, {s}).rel_error, 1e-3);
  auto z = Tensor::zeros({2, 3}, true);
  project(squash(z)).backward();
  for (float g : z.grad()) EXPECT_EQ(g, 0.0f);
}

TEST(Routing, SingleIterationIsSquashedMean) {
  Rng rng(9);
  const std::size_t n_in = 7, n_out = 4, dim = 3;
  const Tensor votes = Tensor::uniform({n_in, n_out, dim}, -1.0f, 1.0f, rng);
  const auto r = dynamic_routing({votes}, 1);
  std::vector<double> mean(n_out * dim, 0.0);
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t k = 0; k < n_out * dim; ++k) mean[k] += votes.data()[i * n_out * dim + k] / n_out;
  const auto want = oracle_squash(mean, n_out, dim);
  EXPECT_LT(max_abs_diff(r.digit_caps.values.data(), std::vector<float>(want.begin(), want.end())), 1e-6);
  for (float c : r.state.coupling.data()) EXPECT_NEAR(c, 0.25f, 1e-7);
}

TEST(Routing, SinglePrimaryCapsuleCouplesFully) {
  Rng rng(10);
  const Tensor votes = Tensor::uniform({1, 3, 4}, -1.0f, 1.0f, rng);
  for (std::size_t iters : {1u, 2u, 5u}) {
    const auto r = dynamic_routing({votes}, iters);
    // Softmax over classes for one capsule: c is 1/N_class per class.
    std::vector<double> s(12);
    for (std::size_t k = 0; k < 12; ++k) s[k] = votes.data()[k] * r.state.coupling.data()[k / 4];
    const auto want = oracle_squash(s, 3, 4);
    EXPECT_LT(max_abs_diff(r.digit_caps.values.data(), std::vector<float>(want.begin(), want.end())), 1e-6);
  }
}

TEST(Routing, MatchesScalarOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_in = 1 + rng.below(6), n_out = 1 + rng.below(5), dim = 1 + rng.below(4);
    const std::size_t iters = 1 + rng.below(4);
    const Tensor votes = Tensor::uniform({n_in, n_out, dim}, -1.0f, 1.0f, rng);
    const auto got = dynamic_routing({votes}, iters);
    const auto want = oracle_routing({votes.data().begin(), votes.data().end()}, n_in, n_out, dim, iters);
    for (std::size_t k = 0; k < want.v.size(); ++k) EXPECT_NEAR(got.digit_caps.values.data()[k], want.v[k], 1e-6);
    for (std::size_t k = 0; k < want.coupling.size(); ++k) {
      EXPECT_NEAR(got.state.coupling.data()[k], want.coupling[k], 1e-6);
      EXPECT_NEAR(got.state.logits.data()[k], want.logits[k], 1e-5);
    }
  }
}

TEST(Routing, AgreementRaisesCoupling) {
  // Capsules 0 and 2 agree on class 0, capsule 1 opposes them.
  const std::vector<float> v = {1.0f, 0.0f, 0.1f, 0.2f,    // capsule 0: class 0, class 1
                                -1.0f, 0.0f, 0.2f, -0.1f,  // capsule 1
                                1.0f, 0.1f, -0.1f, 0.1f};  // capsule 2
  const auto r = dynamic_routing({Tensor::from_data({3, 2, 2}, v)}, 2);
  EXPECT_GT(r.state.coupling.at({0, 0}), r.state.coupling.at({1, 0}));
  const auto oracle = oracle_routing({v.begin(), v.end()}, 3, 2, 2, 2);
  EXPECT_GT(oracle.coupling_history[1][0], oracle.coupling_history[1][2]);
}

TEST(Routing, CouplingRowsAreDistributions) {
  Rng rng(12);
  const Tensor votes = Tensor::uniform({2, 20, 6, 4}, -2.0f, 2.0f, rng);
  const auto r = dynamic_routing({votes}, 3);
  for (std::size_t row = 0; row < 40; ++row) {
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      const float c = r.state.coupling.data()[row * 6 + j];
      EXPECT_GT(c, 0.0f);
      total += c;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Routing, BatchMatchesPerSample) {
  Rng rng(13);
  const Tensor votes = Tensor::uniform({3, 5, 4, 2}, -1.0f, 1.0f, rng);
  const auto batched = dynamic_routing({votes}, 3);
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<float> one(votes.data().begin() + b * 40, votes.data().begin() + (b + 1) * 40);
    const auto single = dynamic_routing({Tensor::from_data({5, 4, 2}, one)}, 3);
    for (std::size_t k = 0; k < 8; ++k) {
      EXPECT_EQ(batched.digit_caps.values.data()[b * 8 + k], single.digit_caps.values.data()[k]);
    }
  }
}

TEST(Routing, ErrorsAndFrozenCoupling) {
  Rng rng(14);
  const Tensor votes = Tensor::uniform({4, 3, 2}, -1.0f, 1.0f, rng);
  EXPECT_THROW(dynamic_routing({votes}, 0), ContractError);
  const auto routed = dynamic_routing({votes}, 3);
  const auto frozen = dynamic_routing({votes}, 3, &routed.state.coupling);
  EXPECT_EQ(to_vec(frozen.digit_caps.values.data()), to_vec(routed.digit_caps.values.data()));
  const Tensor wrong = Tensor::zeros({2, 3});
  EXPECT_THROW(dynamic_routing({votes}, 3, &wrong), ShapeError);
}

TEST(Routing, GradientWithCouplingHeldConstant) {
  Rng rng(15);
  auto votes = random_leaf({5, 3, 4}, rng);
  const Tensor coupling = dynamic_routing({votes.detach()}, 3).state.coupling;
  const auto r = check_gradients(
      [&] { return project(dynamic_routing({votes}, 3, &coupling).digit_caps.values); }, {votes});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(ClassProbabilities, Examples) {
  const Tensor zeros = class_probabilities({Tensor::zeros({4, 3})});
  for (float s : zeros.data()) EXPECT_EQ(s, 0.0f);
  std::vector<float> caps(10 * 2, 0.0f);
  caps[0] = 0.3f;
  caps[1] = 0.4f;
  const Tensor scores = class_probabilities({Tensor::from_data({10, 2}, caps)});
  EXPECT_FLOAT_EQ(scores.data()[0], 0.5f);
  for (std::size_t k = 1; k < 10; ++k) EXPECT_EQ(scores.data()[k], 0.0f);
}

TEST(ClassProbabilities, ArgmaxInvariantUnderPositiveScaling) {
  Rng rng(16);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor s = Tensor::uniform({6, 4}, -1.0f, 1.0f, rng);
    const float factor = rng.uniform(0.1f, 10.0f);
    const auto a = argmax_rows(reshape(class_probabilities(squash(CapsuleBlock{s})), {1, 6}));
    const auto b = argmax_rows(reshape(class_probabilities(squash(CapsuleBlock{scale(s, factor)})), {1, 6}));
    EXPECT_EQ(a, b);
  }
}

TEST(ClassProbabilities, ArgmaxTiesGoLow) {
  EXPECT_EQ(argmax_rows(Tensor::from_data({2, 3}, {0.2f, 0.7f, 0.7f, 0.5f, 0.5f, 0.5f})),
            (std::vector<std::size_t>{1, 0}));
}

TEST(Decoder, MaskingIgnoresOtherCapsules) {
  CapsNetConfig c = tiny_capsnet_config();
  c.n_class = 2;
  Rng rng(17);
  const CapsNet net(c, rng);
  Tensor caps = Tensor::uniform({1, 2, 2}, -0.5f, 0.5f, rng);
  const std::vector<std::size_t> label{0};
  const auto before = to_vec(net.decode({caps}, label).data());
  caps.mutable_data()[2] = 0.9f;
  caps.mutable_data()[3] = -0.9f;
  EXPECT_EQ(to_vec(net.decode({caps}, label).data()), before);

  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(net.decode({caps}, bad), ContractError);
}

TEST(Decoder, ZeroCapsulesGiveBiasImageInUnitRange) {
  Rng rng(18);
  const CapsNet net(CapsNetConfig{}, rng);
  const Tensor out = net.decode({Tensor::zeros({2, 10, 16})}, std::nullopt);
  ASSERT_EQ(out.shape(), (Shape{2, 784}));
  for (std::size_t p = 0; p < 784; ++p) {
    EXPECT_EQ(out.data()[p], out.data()[784 + p]);
    EXPECT_GE(out.data()[p], 0.0f);
    EXPECT_LE(out.data()[p], 1.0f);
  }
}

TEST(Decoder, InferenceMasksLongestCapsule) {
  CapsNetConfig c = tiny_capsnet_config();
  Rng rng(19);
  const CapsNet net(c, rng);
  const Tensor caps = Tensor::from_data({1, 3, 2}, {0.1f, 0.0f, 0.0f, 0.6f, 0.2f, 0.2f});
  const std::vector<std::size_t> longest{1};
  EXPECT_EQ(to_vec(net.decode({caps}, std::nullopt).data()), to_vec(net.decode({caps}, longest).data()));
}

TEST(Forward, ScoresInUnitIntervalAndShapeChecks) {
  Rng rng(20);
  const CapsNet net(tiny_capsnet_config(), rng);
  const Tensor images = Tensor::uniform({4, 1, 8, 8}, 0.0f, 1.0f, rng);
  const auto out = net.forward(images);
  ASSERT_EQ(out.class_scores.shape(), (Shape{4, 3}));
  for (float s : out.class_scores.data()) {
    EXPECT_GE(s, 0.0f);
    EXPECT_LT(s, 1.0f);
  }
  EXPECT_EQ(out.reconstruction.shape(), (Shape{4, 64}));
  EXPECT_THROW(net.forward(Tensor::zeros({1, 1, 9, 9})), ShapeError);
  EXPECT_EQ(net.forward(Tensor::zeros({1, 8, 8})).class_scores.shape(), (Shape{1, 3}));
}

TEST(Forward, RoutingIterationOverride) {
  Rng rng(21);
  const CapsNet net(tiny_capsnet_config(), rng);
  const Tensor images = Tensor::uniform({2, 1, 8, 8}, 0.0f, 1.0f, rng);
  ForwardOptions one;
  one.routing_iterations = 1;
  const auto a = net.forward(images, std::nullopt, one);
  // One iteration: uniform coupling.
  for (float c : a.routing.coupling.data()) EXPECT_NEAR(c, 1.0f / 3.0f, 1e-7);
}

TEST(Forward, ClassPermutationEquivariance) {
  const CapsNetConfig c = tiny_capsnet_config();
  Rng r1(22), r2(22);
  const CapsNet a(c, r1);
  CapsNet b(c, r2);
  // Rotate the class axis of W^DC in b: class j of b is class perm[j] of a.
  const std::vector<std::size_t> perm{2, 0, 1};
  const std::size_t n_in = c.n_primary(), n_out = c.n_class;
  const std::size_t block = c.primary.capsule_dim * c.digit_dim;
  const auto src = to_vec(a.digit_weights().data());
  auto dst = Tensor(b.digit_weights()).mutable_data();
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t j = 0; j < n_out; ++j)
      std::copy_n(src.begin() + (i * n_out + perm[j]) * block, block, dst.begin() + (i * n_out + j) * block);

  Rng rng(23);
  const Tensor images = Tensor::uniform({3, 1, 8, 8}, 0.0f, 1.0f, rng);
  ForwardOptions o;
  o.reconstruct = false;
  const auto oa = a.forward(images, std::nullopt, o);
  const auto ob = b.forward(images, std::nullopt, o);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t j = 0; j < n_out; ++j) {
      EXPECT_NEAR(ob.class_scores.at({s, j}), oa.class_scores.at({s, perm[j]}), 1e-6);
      for (std::size_t d = 0; d < c.digit_dim; ++d) {
        EXPECT_NEAR(ob.digit_caps.values.at({s, j, d}), oa.digit_caps.values.at({s, perm[j], d}), 1e-6);
      }
    }
}

TEST(Forward, FullModelGradientTinyConfig) {
  for (std::uint64_t seed : {24u, 25u, 26u}) {
    Rng rng(seed);
    const CapsNet net(tiny_capsnet_config(), rng);
    const Tensor images = Tensor::uniform({2, 1, 8, 8}, 0.0f, 1.0f, rng);
    Rng pick(seed + 100);
    const auto r = full_model_gradient_check(net, images, {0, 2}, 20, pick);
    EXPECT_NEAR(r.library_loss, r.reference_loss, 1e-5);
    EXPECT_LT(r.grad.rel_error, 1e-2) << "analytic " << r.grad.analytic_norm << " numeric " << r.grad.numeric_norm;
  }
}

TEST(Forward, ReferenceLossSeesEveryParameterTensor) {
  // Guards the reference itself: nudging any parameter tensor moves its loss.
  Rng rng(27);
  const CapsNet net(tiny_capsnet_config(), rng);
  const Tensor images = Tensor::uniform({2, 1, 8, 8}, 0.0f, 1.0f, rng);
  const std::vector<std::size_t> labels{1, 0};
  const Tensor coupling = net.forward(images, labels).routing.coupling;
  const std::vector<double> c(coupling.data().begin(), coupling.data().end());
  const std::vector<double> x(images.data().begin(), images.data().end());
  const ReferenceParams base = reference_params(net);
  const double l0 = reference_total_loss(net.config(), base, x, labels, c);
  for (std::size_t t = 0; t < base.tensors.size(); ++t) {
    ReferenceParams moved = base;
    for (auto& v : moved.tensors[t]) v += 0.05;
    EXPECT_NE(reference_total_loss(net.config(), moved, x, labels, c), l0) << "tensor " << t;
  }
}

TEST(Decoder, GradientAgainstDoubleReference) {
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    const CapsNet net(testing_support::tiny_capsnet_config(), rng);
    auto caps = random_leaf({2, 3, 2}, rng);
    const auto r = testing_support::decoder_gradient_check(net, caps, {rng.below(3), rng.below(3)});
    EXPECT_LT(r.rel_error, 1e-3) << "seed " << seed;
    EXPECT_GT(r.coordinates, 1000u);
  }
}
