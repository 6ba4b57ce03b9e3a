#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracle/scalar_oracle.hpp"
#include "pnd/errors.hpp"
#include "pnd/gradcheck.hpp"
#include "pnd/objectives.hpp"
#include "test_helpers.hpp"

namespace pnd {
namespace {

using testing::random_tensor;

oracle::Mat to_mat(const Tensor& t) {
  oracle::Mat m(t.dim(0), oracle::Row(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.data()[i * t.dim(1) + j];
  return m;
}

std::vector<oracle::Mat> to_mats(const std::vector<Tensor>& ts) {
  std::vector<oracle::Mat> out;
  for (const auto& t : ts) out.push_back(to_mat(t));
  return out;
}

std::vector<Tensor> random_logits(std::size_t M, std::size_t N, std::size_t C, std::mt19937_64& rng,
                                  real spread = 3.0f) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < M; ++i) out.push_back(random_tensor({N, C}, rng, -spread, spread));
  return out;
}

std::vector<int> random_labels(std::size_t N, std::size_t C, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(C) - 1);
  std::vector<int> y(N);
  for (auto& v : y) v = d(rng);
  return y;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-12); }

// --- frozen scalar values -------------------------------------------------

TEST(Gce, CertainPredictionIsZero) {
  const std::vector<real> p{0.0f, 1.0f, 0.0f};
  EXPECT_EQ(gce(p, 1, 0.7f), 0.0);
}

TEST(Gce, HalfProbabilityAtDefaultExponent) {
  const std::vector<real> p{0.5f, 0.5f};
  EXPECT_NEAR(gce(p, 0, 0.7f), 0.5492, 5e-5);
  EXPECT_NEAR(oracle::gce_prob(0.5, 0.7), 0.5492, 5e-5);
}

TEST(Gce, ZeroProbabilityGivesFiniteLimit) {
  const std::vector<real> p{0.0f, 1.0f};
  EXPECT_DOUBLE_EQ(gce(p, 0, 0.7f), 1.0 / 0.7f);
}

TEST(Gce, SmallExponentApproachesCrossEntropy) {
  for (real py : {0.2f, 0.5f, 0.9f}) {
    const std::vector<real> p{py, 1.0f - py};
    EXPECT_LE(std::abs(gce(p, 0, 1e-4f) - (-std::log(static_cast<double>(py)))), 1e-3) << py;
  }
}

TEST(DebiasWeight, Examples) {
  EXPECT_FLOAT_EQ(debias_weight(0.7f, 0.7f), 0.5f);
  EXPECT_FLOAT_EQ(debias_weight(0.4f, 0.0f), 0.0f);
  EXPECT_FLOAT_EQ(debias_weight(0.0f, 0.0f), 0.5f);
  EXPECT_NEAR(debias_weight(0.2f, 0.8f), oracle::weight(0.2, 0.8), 1e-7);
  EXPECT_NEAR(debias_weight(0.2f, 0.8f), 0.8f, 1e-7);
}

TEST(DebiasWeight, BoundedAndIncreasingInBiasLoss) {
  real prev = -1.0f;
  for (int k = 0; k <= 100; ++k) {
    const real w = debias_weight(0.3f, 0.05f * static_cast<real>(k));
    EXPECT_GE(w, 0.0f);
    EXPECT_LE(w, 1.0f);
    if (k > 0) EXPECT_GT(w, prev);
    prev = w;
  }
}

TEST(LossDiv, TwoPointDistributionExample) {
  const double k = oracle::kl({0.5, 0.5}, {0.25, 0.75});
  EXPECT_NEAR(k, 0.14384, 1e-5);
  EXPECT_NEAR(std::exp(-k), 0.8660, 5e-5);
  // Same through the tape path: logits ln p reproduce the distributions.
  Tensor p = Tensor::from({1, 2}, {std::log(0.5f), std::log(0.5f)});
  Tensor q = Tensor::from({1, 2}, {std::log(0.25f), std::log(0.75f)});
  EXPECT_NEAR(loss_div({q, p}).value(), 0.8660, 5e-5);
}

TEST(LossDiv, IdenticalExpertsGiveMMinusOne) {
  std::mt19937_64 rng(1);
  Tensor z = random_tensor({6, 10}, rng, -3, 3);
  EXPECT_NEAR(loss_div({z, z, z, z}).value(), 3.0, 1e-6);
  EXPECT_EQ(loss_div({z}).value(), 0.0);
}

TEST(LossDiv, StaysInHalfOpenRangeOnRandomLogits) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 1000; ++t) {
    const double v = loss_div(random_logits(4, 3, 10, rng, 6.0f)).value();
    EXPECT_GT(v, 0.0);
    EXPECT_LE(v, 3.0 + 1e-6);
  }
}

TEST(LossDiv, SaturatedSoftmaxStaysFinite) {
  Tensor a = Tensor::from({1, 3}, {200.0f, -200.0f, 0.0f});
  Tensor b = Tensor::from({1, 3}, {-200.0f, 200.0f, 0.0f});
  const double v = loss_div({a, b}).value();
  EXPECT_TRUE(std::isfinite(v));
  // KL is capped by the floor: p ln(1 / 1e-8) for a one-hot p.
  EXPECT_NEAR(v, std::exp(-std::log(1e8)), 1e-9);
}

TEST(LossCon, NoNegativesIsZero) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({4, 10}, rng), p = random_tensor({4, 10}, rng);
  EXPECT_EQ(loss_con(a, p, {}, 0.1f).value(), 0.0);
}

TEST(LossCon, SingleNegativeAtUnitDistance) {
  EXPECT_NEAR(oracle::con_term(0.0, {1.0}, 1.0), 0.3133, 5e-5);
  // anchor = positive = e0, negative = e1 (distance sqrt(2)); tau = sqrt(2).
  Tensor a = Tensor::from({1, 2}, {60.0f, 0.0f});
  Tensor n = Tensor::from({1, 2}, {0.0f, 60.0f});
  EXPECT_NEAR(loss_con(a, a, {n}, std::sqrt(2.0f)).value(), std::log1p(std::exp(-1.0)), 1e-5);
}

TEST(LossCon, NonNegativeAndSymmetricInNegatives) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    Tensor a = random_tensor({5, 10}, rng, -3, 3), p = random_tensor({5, 10}, rng, -3, 3);
    auto negs = random_logits(4, 5, 10, rng);
    const double v = loss_con(a, p, negs, 0.1f).value();
    EXPECT_GE(v, 0.0);
    std::vector<Tensor> shuffled{negs[2], negs[0], negs[3], negs[1]};
    EXPECT_NEAR(loss_con(a, p, shuffled, 0.1f).value(), v, 1e-6 * std::max(1.0, v));
  }
}

TEST(LossGate, UniformLogitsGiveLnTen) {
  Tensor z = Tensor::zeros({3, 10});
  EXPECT_NEAR(loss_gate(z, std::vector<int>{0, 4, 9}).value(), std::log(10.0), 1e-6);
}

TEST(LossGate, LargeMarginOneHotIsZero) {
  Tensor z = Tensor::zeros({2, 10});
  z.data()[3] = 50.0f;
  z.data()[10 + 7] = 50.0f;
  EXPECT_NEAR(loss_gate(z, std::vector<int>{3, 7}).value(), 0.0, 1e-12);
}

TEST(LossBias, CertainExpertsGiveZeroAndSumIsLinear) {
  Tensor z = Tensor::zeros({2, 4});
  z.data()[1] = 80.0f;
  z.data()[4 + 2] = 80.0f;
  const std::vector<int> y{1, 2};
  EXPECT_NEAR(loss_bias({z, z, z}, y, 0.7f).value(), 0.0, 1e-12);
  std::mt19937_64 rng(5);
  Tensor r = random_tensor({2, 4}, rng, -2, 2);
  EXPECT_DOUBLE_EQ(loss_bias({r, r}, y, 0.7f).value(), 2.0 * loss_bias({r}, y, 0.7f).value());
}

TEST(LossDebias, UnitWeightsReduceToSummedCrossEntropy) {
  std::mt19937_64 rng(6);
  auto y_d = random_logits(3, 6, 10, rng);
  const auto y = random_labels(6, 10, rng);
  // Equal bias and debiased logits give w = 0.5 everywhere.
  DebiasResult r = loss_debias(y_d, y_d, y);
  double plain = 0.0;
  for (const auto& z : y_d) plain += mean(cross_entropy(z, y)).value();
  EXPECT_NEAR(r.loss.value(), 0.5 * plain, 1e-6 * plain);
  for (const auto& we : r.w)
    for (real w : we) EXPECT_FLOAT_EQ(w, 0.5f);
}

TEST(LossDebias, FittedBiasHeadSilencesAlignedSamples) {
  Tensor y_b = Tensor::zeros({2, 3});
  y_b.data()[0] = 60.0f;  // sample 0: bias head certain and correct
  Tensor y_d = Tensor::zeros({2, 3});
  DebiasResult r = loss_debias({y_d}, {y_b}, std::vector<int>{0, 1});
  EXPECT_LT(r.w[0][0], 1e-6f);
  EXPECT_FLOAT_EQ(r.w[0][1], 0.5f);
}

// --- oracle agreement ------------------------------------------------------

TEST(OracleAgreement, EveryTermOnRandomMicroBatches) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    const std::size_t N = 2 + rng() % 15, M = 1 + rng() % 4, P = rng() % 5;
    auto y_d = random_logits(M, N, 10, rng), y_b = random_logits(M, N, 10, rng);
    Tensor y_mixed = random_tensor({N, 10}, rng, -3, 3);
    Tensor pos = random_tensor({N, 10}, rng, -3, 3);
    auto negs = random_logits(P, N, 10, rng);
    const auto y = random_labels(N, 10, rng);

    LossBundle b;
    b.L_bias = loss_bias(y_b, y, 0.7f);
    b.L_debias = loss_debias(y_d, y_b, y).loss;
    b.L_div = loss_div(y_b);
    b.L_con = loss_con(y_d[0], pos, negs, 0.1f);
    b.L_gate = loss_gate(y_mixed, y);

    const auto od = to_mats(y_d), ob = to_mats(y_b);
    const double o_bias = oracle::loss_bias(ob, y, 0.7f);
    const double o_debias = oracle::loss_debias(od, ob, y);
    const double o_div = oracle::loss_div(ob);
    const double o_con = P == 0 ? 0.0 : oracle::loss_con(od[0], to_mat(pos), to_mats(negs), 0.1f);
    const double o_gate = oracle::loss_gate(to_mat(y_mixed), y);
    EXPECT_LE(rel(b.L_bias.value(), o_bias), 1e-5);
    EXPECT_LE(rel(b.L_debias.value(), o_debias), 1e-5);
    if (M > 1) EXPECT_LE(rel(b.L_div.value(), o_div), 1e-5);
    if (P > 0) EXPECT_LE(rel(b.L_con.value(), o_con), 1e-5);
    EXPECT_LE(rel(b.L_gate.value(), o_gate), 1e-5);
    for (Phase ph : {Phase::initial, Phase::counterfactual}) {
      const bool cf = ph == Phase::counterfactual;
      const real alpha = cf ? 2.0f : 0.2f;
      const double o_total = oracle::total(cf, o_bias, o_debias, o_div, o_con, o_gate, alpha, 4.0f);
      EXPECT_LE(rel(total_loss(ph, b, alpha, 4.0f).value(), o_total), 1e-5);
    }
  }
}

// --- total loss ------------------------------------------------------------

LossBundle fixed_bundle() {
  LossBundle b;
  b.L_bias = Tensor::scalar(0.9f);
  b.L_debias = Tensor::scalar(1.7f);
  b.L_div = Tensor::scalar(2.1f);
  b.L_con = Tensor::scalar(0.4f);
  b.L_gate = Tensor::scalar(1.3f);
  return b;
}

TEST(TotalLoss, PhaseFormulas) {
  LossBundle b = fixed_bundle();
  EXPECT_NEAR(total_loss(Phase::initial, b, 0.2f, 4.0f).value(), 0.2 * 1.7 + 0.9 + 1.3 + 2.1, 1e-6);
  EXPECT_NEAR(total_loss(Phase::counterfactual, b, 2.0f, 4.0f).value(), 2.0 * 1.7 + 0.9 + 1.3 + 2.1 + 4.0 * 0.4,
              1e-6);
  EXPECT_EQ(total_loss(Phase::counterfactual, b, 0.2f, 0.0f).value(), total_loss(Phase::initial, b, 0.2f, 0.0f).value());
  EXPECT_NEAR(total_loss(Phase::initial, b, 0.0f, 4.0f).value(), 0.9 + 1.3 + 2.1, 1e-6);
}

TEST(TotalLoss, AblationSwitchesDropOneTermEach) {
  LossBundle b = fixed_bundle();
  const double full = total_loss(Phase::counterfactual, b, 2.0f, 4.0f).value();
  EXPECT_NEAR(full - total_loss(Phase::counterfactual, b, 2.0f, 4.0f, {false, true, true}).value(), 1.3, 1e-6);
  EXPECT_NEAR(full - total_loss(Phase::counterfactual, b, 2.0f, 4.0f, {true, false, true}).value(), 2.1, 1e-6);
  EXPECT_NEAR(full - total_loss(Phase::counterfactual, b, 2.0f, 4.0f, {true, true, false}).value(), 1.6, 1e-6);
}

// --- counterfactual sampler -----------------------------------------------

TEST(Counterfactuals, PairOfSamplesIsForced) {
  std::mt19937_64 rng(8);
  CounterfactualBatch cf = build_counterfactuals(2, 1, rng);
  EXPECT_EQ(cf.pos_bias_index, (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(cf.neg_target_index[0], (std::vector<std::size_t>{1}));
  EXPECT_EQ(cf.neg_target_index[1], (std::vector<std::size_t>{0}));
}

TEST(Counterfactuals, NeverPairsAnAnchorWithItself) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 10000; ++t) {
    CounterfactualBatch cf = build_counterfactuals(16, 8, rng);
    for (std::size_t j = 0; j < 16; ++j) {
      ASSERT_NE(cf.pos_bias_index[j], j);
      ASSERT_LT(cf.pos_bias_index[j], 16u);
      std::set<std::size_t> seen(cf.neg_target_index[j].begin(), cf.neg_target_index[j].end());
      ASSERT_EQ(seen.size(), 8u);
      ASSERT_EQ(seen.count(j), 0u);
      ASSERT_LT(*seen.rbegin(), 16u);
    }
  }
}

TEST(Counterfactuals, NegativeCountClampsAndSmallKIsRejected) {
  std::mt19937_64 rng(10);
  EXPECT_EQ(build_counterfactuals(4, 8, rng).P, 3u);
  EXPECT_THROW(build_counterfactuals(1, 1, rng), ContractError);
}

TEST(Counterfactuals, DefaultsMatchReferenceSettings) {
  TrainHyper h;
  EXPECT_EQ(h.K, 16u);
  EXPECT_EQ(h.P, 8u);
  EXPECT_FLOAT_EQ(h.q, 0.7f);
  EXPECT_FLOAT_EQ(h.tau, 0.1f);
  EXPECT_FLOAT_EQ(h.beta, 4.0f);
}

// --- gradients and isolation ----------------------------------------------

TEST(LossGradients, EachTermMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto y = random_labels(5, 10, rng);
  for (int t = 0; t < 10; ++t) {
    Tensor z = random_tensor({5, 10}, rng, -2, 2);
    Tensor other = random_tensor({5, 10}, rng, -2, 2, false);
    Tensor neg = random_tensor({5, 10}, rng, -2, 2, false);
    EXPECT_LE(finite_difference_check([&](const Tensor& v) { return mean(gce_per_sample(v, y, 0.7f)); }, z, testing::kFdStep),
              testing::kOpTolerance);
    EXPECT_LE(finite_difference_check([&](const Tensor& v) { return loss_div({other, v}); }, z, testing::kFdStep), testing::kOpTolerance);
    EXPECT_LE(finite_difference_check([&](const Tensor& v) { return loss_div({v, other}); }, z, testing::kFdStep), testing::kOpTolerance);
    EXPECT_LE(finite_difference_check([&](const Tensor& v) { return loss_con(v, other, {neg}, 1.0f); }, z, testing::kFdStep),
              testing::kOpTolerance);
    // w moves with the logits numerically but is a constant to the tape, so
    // the reference differentiates the weighted CE with w frozen.
    const std::vector<real> w = loss_debias({z}, {other}, y).w[0];
    Tensor wt = Tensor::from({w.size()}, w);
    EXPECT_LE(finite_difference_check([&](const Tensor& v) { return mean(mul(wt, cross_entropy(v, y))); }, z, testing::kFdStep),
              testing::kOpTolerance);
    Tensor z2 = z.clone();
    z2.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      loss_debias({z2}, {other}, y).loss.backward();
    }
    {
      Tape tape;
      TapeScope scope(tape);
      z.zero_grad();
      mean(mul(wt, cross_entropy(z, y))).backward();
    }
    for (std::size_t k = 0; k < z.numel(); ++k) EXPECT_FLOAT_EQ(z2.grad()[k], z.grad()[k]);
  }
}

// Perturbing bias logits moves w but must not move the debiased gradient path:
// the analytic gradient of L_debias w.r.t. y_b is identically zero.
TEST(LossGradients, WeightCarriesNoGradient) {
  std::mt19937_64 rng(12);
  const auto y = random_labels(4, 10, rng);
  Tensor y_d = random_tensor({4, 10}, rng, -2, 2);
  Tensor y_b = random_tensor({4, 10}, rng, -2, 2);
  Tape tape;
  {
    TapeScope scope(tape);
    loss_debias({y_d}, {y_b}, y).loss.backward();
  }
  EXPECT_FALSE(y_b.has_grad());
  EXPECT_TRUE(y_d.has_grad());
}

}  // namespace
}  // namespace pnd
