#include "tempogen/checkpoint.hpp"
#include "tempogen/optim.hpp"
#include "tempogen/tensor.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

using namespace tempogen;
using tempogen::testing::gradcheck;
using tempogen::testing::weighted_sum;

namespace {

constexpr int kInstances = 20;
constexpr double kOpTol = 1e-4;

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Matmul, IdentityAndScalar) {
  auto id = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values(matmul(id, b)), (std::vector<double>{5, 6, 7, 8}));
  EXPECT_EQ(matmul(Tensor::from({1, 1}, {2}), Tensor::from({1, 1}, {3})).item(), 6.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < kInstances; ++i) {
    auto a = Tensor::randn({3, 4}, 1.0, rng);
    auto b = Tensor::randn({4, 2}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {a, b}), kOpTol);
    auto ba = Tensor::randn({2, 3, 4}, 1.0, rng);
    auto bb = Tensor::randn({2, 4, 5}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {ba, bb}), kOpTol);
    auto sb = Tensor::randn({4, 5}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(matmul(in[0], in[1])); }, {ba, sb}), kOpTol);
  }
}

TEST(Linear, EqualsMatmulPlusBiasWithGradients) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < kInstances; ++i) {
    auto x = Tensor::randn({2, 3, 4}, 1.0, rng);
    auto w = Tensor::randn({4, 5}, 1.0, rng);
    auto b = Tensor::randn({5}, 1.0, rng);
    const auto fused = values(linear(x, w, b));
    const auto ref = values(add(matmul(x, w), b));
    for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(fused[j], ref[j], 1e-12);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(linear(in[0], in[1], in[2])); }, {x, w, b}), kOpTol);
  }
}

TEST(Elementwise, TrivialCases) {
  EXPECT_EQ(values(exp(Tensor::zeros({2}))), (std::vector<double>{1, 1}));
  auto x = Tensor::from({3}, {1.5, -2, 0.25});
  EXPECT_EQ(values(add(x, Tensor::zeros({3}))), values(x));
  EXPECT_EQ(values(add(x, Tensor::scalar(0.0))), values(x));
  EXPECT_EQ(values(relu(x)), (std::vector<double>{1.5, 0, 0.25}));
  EXPECT_EQ(values(scale(x, 2.0)), (std::vector<double>{3, -4, 0.5}));
}

TEST(Elementwise, BroadcastIncompatibilityRejected) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(mul(Tensor::zeros({2, 3}), Tensor::zeros({3, 3})), ShapeError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  using F = std::function<Tensor(const std::vector<Tensor>&)>;
  const std::vector<std::pair<const char*, F>> binary{
      {"add", [](auto& in) { return weighted_sum(add(in[0], in[1])); }},
      {"sub", [](auto& in) { return weighted_sum(sub(in[0], in[1])); }},
      {"mul", [](auto& in) { return weighted_sum(mul(in[0], in[1])); }},
  };
  for (int i = 0; i < kInstances; ++i) {
    for (const auto& [name, f] : binary) {
      EXPECT_LT(gradcheck(f, {Tensor::randn({2, 3}, 1.0, rng), Tensor::randn({2, 3}, 1.0, rng)}), kOpTol) << name;
      EXPECT_LT(gradcheck(f, {Tensor::randn({2, 3}, 1.0, rng), Tensor::randn({3}, 1.0, rng)}), kOpTol) << name;
    }
    auto x = Tensor::randn({2, 3}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(exp(in[0])); }, {x}), kOpTol);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(scale(in[0], -1.7)); }, {x}), kOpTol);
    EXPECT_LT(gradcheck([](auto& in) { return mean(in[0]); }, {x}), kOpTol);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(reshape(in[0], {3, 2})); }, {x}), kOpTol);
    std::vector<double> pos(6), away(6);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    std::bernoulli_distribution sign(0.5);
    for (std::size_t j = 0; j < 6; ++j) {
      pos[j] = u(rng);
      away[j] = sign(rng) ? u(rng) : -u(rng);  // at least 0.2 from the kink
    }
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(log(in[0])); }, {Tensor::from({2, 3}, pos)}), kOpTol);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(relu(in[0])); }, {Tensor::from({2, 3}, away)}), kOpTol);
  }
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  auto x = Tensor::full({1, 4}, 3.0);
  auto out = layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowUnchanged) {
  auto out = layer_norm(Tensor::from({1, 2}, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  EXPECT_NEAR(out.data()[0], 1.0, 1e-9);
  EXPECT_NEAR(out.data()[1], -1.0, 1e-9);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < kInstances; ++i) {
    auto x = Tensor::randn({4, 8}, 1.0, rng);
    auto g = Tensor::randn({8}, 1.0, rng);
    auto b = Tensor::randn({8}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2], 1e-5)); }, {x, g, b}),
              kOpTol);
  }
}

TEST(Indexing, GatherSplitMergeGradients) {
  std::mt19937_64 rng(5);
  const std::vector<int> ids{2, 0, -1, 2, 1};
  for (int i = 0; i < kInstances; ++i) {
    auto table = Tensor::randn({3, 4}, 1.0, rng);
    EXPECT_LT(gradcheck([&](auto& in) { return weighted_sum(gather_rows(in[0], ids)); }, {table}), kOpTol);
    auto x = Tensor::randn({2, 3, 4}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(split_heads(in[0], 2)); }, {x}), kOpTol);
    auto h = Tensor::randn({2, 2, 3, 2}, 1.0, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(merge_heads(in[0])); }, {h}), kOpTol);
  }
  auto x = Tensor::randn({2, 3, 4}, 1.0, rng);
  EXPECT_EQ(values(merge_heads(split_heads(x, 2))), values(x));
  auto g = gather_rows(Tensor::from({2, 2}, {1, 2, 3, 4}), std::vector<int>{1, -1});
  EXPECT_EQ(values(g), (std::vector<double>{3, 4, 0, 0}));
}

TEST(Dropout, GradientWithFixedMask) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < kInstances; ++i) {
    auto x = Tensor::randn({3, 5}, 1.0, rng);
    const std::uint64_t seed = rng();
    EXPECT_LT(gradcheck(
                  [seed](auto& in) {
                    std::mt19937_64 r(seed);
                    return weighted_sum(dropout(in[0], 0.3, r));
                  },
                  {x}),
              kOpTol);
  }
  std::mt19937_64 r(0);
  auto ones = Tensor::full({10000}, 1.0);
  auto d = dropout(ones, 0.25, r);
  double kept = 0.0;
  for (double v : d.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 4.0 / 3.0) < 1e-15);
    kept += v != 0.0;
  }
  EXPECT_NEAR(kept / 10000.0, 0.75, 0.02);
  EXPECT_EQ(values(dropout(ones, 0.0, r)), values(ones));
}

TEST(CrossEntropy, TrivialCases) {
  const int t0[] = {0};
  const std::uint8_t on[] = {1};
  EXPECT_NEAR(cross_entropy_logits(Tensor::from({1, 2}, {0, 0}), t0, on).item(), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(cross_entropy_logits(Tensor::from({1, 2}, {1e9, 0}), t0, on).item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  std::mt19937_64 rng(7);
  auto logits = Tensor::randn({5, 7}, 3.0, rng);
  const std::vector<int> targets{3, 0, 6, 2, 2};
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
  const auto v = logits.data();
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < 5; ++i) {
    if (!mask[i]) continue;
    double mx = -1e300;
    for (int j = 0; j < 7; ++j) mx = std::max(mx, v[i * 7 + j]);
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += std::exp(v[i * 7 + j] - mx);
    total += mx + std::log(s) - v[i * 7 + targets[i]];
    ++count;
  }
  EXPECT_NEAR(cross_entropy_logits(logits, targets, mask).item(), total / count, 1e-10);
  EXPECT_LT(gradcheck([&](auto& in) { return cross_entropy_logits(in[0], targets, mask); }, {logits}), kOpTol);
}

TEST(CrossEntropy, AllMaskedIsZeroWithZeroGradient) {
  auto logits = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<int> targets{0, 1};
  const std::vector<std::uint8_t> mask{0, 0};
  auto loss = cross_entropy_logits(logits, targets, mask);
  EXPECT_EQ(loss.item(), 0.0);
  backward(add(loss, scale(sum(logits), 0.0)));
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);
}

TEST(BinaryCrossEntropy, TrivialAndOracle) {
  const int one[] = {1};
  EXPECT_NEAR(binary_cross_entropy_logits(Tensor::from({1}, {0.0}), one).item(), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(binary_cross_entropy_logits(Tensor::from({1}, {40.0}), one).item(), 0.0, 1e-15);
  std::mt19937_64 rng(8);
  auto logits = Tensor::randn({4}, 2.0, rng);
  const std::vector<int> labels{1, 0, 0, 1};
  double ref = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-logits.data()[i]));
    ref -= labels[i] ? std::log(s) : std::log(1.0 - s);
  }
  EXPECT_NEAR(binary_cross_entropy_logits(logits, labels).item(), ref / 4.0, 1e-10);
  EXPECT_LT(gradcheck([&](auto& in) { return binary_cross_entropy_logits(in[0], labels); }, {logits}), kOpTol);
}

TEST(Backward, TrivialGradients) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  auto y = Tensor::from({1}, {3.0}, true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(y.grad()[0], 6.0);
}

TEST(Backward, ReusedTensorAccumulates) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  backward(add(sum(x), sum(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalarAndConsumedTape) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
  auto loss = sum(exp(x));
  backward(loss);
  EXPECT_THROW(backward(loss), std::logic_error);
}

TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < kInstances; ++i) {
    auto a = Tensor::randn({3, 4}, 0.5, rng);
    auto b = Tensor::randn({4, 2}, 0.5, rng);
    EXPECT_LT(gradcheck([](auto& in) { return weighted_sum(exp(matmul(in[0], in[1]))); }, {a, b}), kOpTol);
  }
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(10);
    auto a = Tensor::randn({6, 5}, 1.0, rng, true);
    auto b = Tensor::randn({5, 3}, 1.0, rng, true);
    backward(weighted_sum(layer_norm(matmul(a, b), Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5)));
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, ZeroGradNoDecayLeavesParams) {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.0, 0.0};
  AdamMoments mom;
  AdamWSettings s;
  for (long t = 1; t <= 3; ++t) adamw_step(p, g, mom, t, 0.1, s, 0.0);
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(AdamW, HandExecutedFirstStep) {
  // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1; p -= 0.1 * 1 / (1 + eps).
  std::vector<double> p{1.0};
  const std::vector<double> g{1.0};
  AdamMoments mom;
  AdamWSettings s;
  adamw_step(p, g, mom, 1, 0.1, s, 0.0);
  EXPECT_NEAR(p[0], 1.0 - 0.1 / (1.0 + s.eps), 1e-12);
  EXPECT_NEAR(p[0], 0.9, 1e-8);
}

TEST(AdamW, DecoupledWeightDecay) {
  std::vector<double> p{2.0};
  const std::vector<double> g{0.0};
  AdamMoments mom;
  adamw_step(p, g, mom, 1, 0.1, AdamWSettings{}, 0.5);
  EXPECT_NEAR(p[0], 2.0 * (1.0 - 0.1 * 0.5), 1e-12);
}

TEST(CosineSchedule, Endpoints) {
  EXPECT_NEAR(cosine_multiplier(0, 100), 1.0, 1e-12);
  EXPECT_NEAR(cosine_multiplier(50, 100), 0.5, 1e-12);
  EXPECT_NEAR(cosine_multiplier(100, 100), 0.0, 1e-9);
}

TEST(ClipGradNorm, RescalesToMaxNorm) {
  auto a = Tensor::from({2}, {0, 0}, true);
  backward(sum(mul(a, Tensor::from({2}, {3, 4}))));
  std::vector<Tensor> ps{a};
  EXPECT_NEAR(clip_grad_norm(ps, 1.0), 5.0, 1e-12);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-12);
  EXPECT_NEAR(a.grad()[1], 0.8, 1e-12);
  EXPECT_NEAR(grad_norm(ps), 1.0, 1e-12);
}

TEST(Checkpoint, LosslessRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "tempogen_test_container.ckpt";
  Container c;
  c.config = {{"d_model", 8}};
  c.metadata = {{"epoch", 3}};
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  NamedArray a{"w", {2, 3}, {}};
  for (int i = 0; i < 6; ++i) a.values.push_back(n(rng) * 1e-300 + n(rng));
  a.values[0] = std::nextafter(1.0, 2.0);
  c.arrays.push_back(a);
  c.arrays.push_back({"empty", {0}, {}});
  write_container(path, c);
  const auto back = read_container(path);
  EXPECT_EQ(back.config, c.config);
  EXPECT_EQ(back.metadata, c.metadata);
  ASSERT_EQ(back.arrays.size(), 2u);
  EXPECT_EQ(back.array("w").values, a.values);
  EXPECT_EQ(back.array("w").shape, a.shape);
  EXPECT_FALSE(back.has("missing"));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptFileRejected) {
  const auto path = std::filesystem::temp_directory_path() / "tempogen_test_corrupt.ckpt";
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(read_container(path), CheckpointError);
  std::filesystem::remove(path);
}

}  // namespace
