#include <cmath>

#include <gtest/gtest.h>

#include "frace/errors.hpp"
#include "frace/losses.hpp"
#include "loss_oracles.hpp"
#include "test_support.hpp"

namespace frace {
namespace {

constexpr double kTol = 1e-6;
const auto kDouble = torch::TensorOptions().dtype(torch::kFloat64);

double value(const torch::Tensor& t) { return t.item<double>(); }

TEST(AdversarialLoss, HalfEverywhere) {
  const auto half = torch::full({8}, 0.5, kDouble);
  EXPECT_NEAR(value(adversarial_loss(half, half)), 2 * std::log(0.5), kTol);
  EXPECT_NEAR(value(adversarial_loss(half, half)), -1.38629, 1e-5);
}

TEST(AdversarialLoss, PerfectDiscriminator) {
  const double eps = 1e-9;
  EXPECT_NEAR(value(adversarial_loss(torch::full({4}, 1 - eps, kDouble), torch::full({4}, eps, kDouble))),
              0.0, kTol);
}

TEST(AdversarialLoss, ClampedAtZeroAndOne) {
  const auto v = value(adversarial_loss(torch::zeros({2}, kDouble), torch::ones({2}, kDouble)));
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 2 * std::log(kLogEpsilon), kTol);
}

TEST(AdversarialLoss, NonFiniteRejected) {
  const auto ok = torch::full({2}, 0.5, kDouble);
  EXPECT_THROW(adversarial_loss(torch::tensor({0.5, std::nan("")}, kDouble), ok), ValidationError);
  EXPECT_THROW(adversarial_loss(ok, torch::tensor({HUGE_VAL, 0.5}, kDouble)), ValidationError);
}

TEST(DomainClsLoss, PerfectAndUniform) {
  const auto labels = torch::tensor({0, 3, 9}, torch::kInt64);
  const auto perfect = torch::one_hot(labels, 10).to(torch::kFloat64);
  EXPECT_NEAR(value(domain_cls_loss(perfect, labels)), 0.0, kTol);
  const auto uniform = torch::full({3, 10}, 0.1, kDouble);
  EXPECT_NEAR(value(domain_cls_loss(uniform, labels)), std::log(10.0), kTol);
  EXPECT_NEAR(value(domain_cls_loss(uniform, labels)), 2.30259, 1e-5);
}

TEST(DomainClsLoss, ZeroProbabilityIsClamped) {
  const auto probs = torch::tensor({1.0, 0.0}, kDouble).reshape({1, 2});
  const auto v = value(domain_cls_loss(probs, torch::tensor({1}, torch::kInt64)));
  EXPECT_NEAR(v, -std::log(kLogEpsilon), kTol);
}

TEST(DomainClsLoss, RejectsBadLabelsAndShapes) {
  const auto p = torch::full({2, 3}, 1.0 / 3, kDouble);
  EXPECT_THROW(domain_cls_loss(p, torch::tensor({0, 3}, torch::kInt64)), ValidationError);
  EXPECT_THROW(domain_cls_loss(p, torch::tensor({0}, torch::kInt64)), ShapeError);
}

TEST(ReconstructionLoss, TrivialCases) {
  const auto x = torch::zeros({2, 1, 3, 3}, kDouble);
  const auto g = torch::rand({2, 1, 3, 3}, kDouble);
  EXPECT_NEAR(value(reconstruction_loss(x, g, -g)), 0.0, kTol);
  EXPECT_NEAR(value(reconstruction_loss(x, torch::zeros_like(x), torch::zeros_like(x))), 0.0, kTol);
  EXPECT_NEAR(value(reconstruction_loss(x, torch::full_like(x, 0.3), torch::full_like(x, -0.1))), 0.2,
              kTol);
}

TEST(ReconstructionLoss, DependsOnXOnlyThroughShape) {
  testing::Gen gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::vector<std::int64_t> shape{gen.integer(1, 4), gen.integer(1, 3), gen.integer(1, 6),
                                          gen.integer(1, 6)};
    const auto g1 = gen.uniform(shape, -2, 2);
    const auto g2 = gen.uniform(shape, -2, 2);
    const auto a = reconstruction_loss(gen.uniform(shape, -1, 1), g1, g2);
    const auto b = reconstruction_loss(gen.uniform(shape, -1, 1), g1, g2);
    EXPECT_EQ(value(a), value(b));
  }
  EXPECT_THROW(reconstruction_loss(torch::zeros({1, 1, 2, 2}), torch::zeros({1, 1, 2, 3}),
                                   torch::zeros({1, 1, 2, 3})),
               ShapeError);
}

TEST(ExplanationLoss, PerfectAndUniformLetter) {
  const auto labels = torch::tensor({4, 25}, torch::kInt64);
  EXPECT_NEAR(value(explanation_loss(torch::one_hot(labels, 26).to(torch::kFloat64), labels)), 0.0,
              kTol);
  EXPECT_NEAR(value(explanation_loss(torch::full({2, 26}, 1.0 / 26, kDouble), labels)), std::log(26.0),
              kTol);
  EXPECT_NEAR(std::log(26.0), 3.2581, 1e-4);
}

TEST(PerturbationLoss, TrivialCases) {
  const auto z = torch::zeros({3, 1, 4, 4}, kDouble);
  EXPECT_NEAR(value(perturbation_loss(z, z)), 0.0, kTol);
  EXPECT_NEAR(value(perturbation_loss(torch::full_like(z, 0.5), z)), 0.5, kTol);
  EXPECT_THROW(perturbation_loss(z, torch::zeros({3, 1, 4, 5}, kDouble)), ShapeError);
}

TEST(TotalLosses, WorkedExample) {
  const LossTerms<double> t{-1.0, 0.5, 0.4, 0.2, 0.3, 0.1};
  const LossWeights ones;
  const auto total = total_losses(t, ones);
  EXPECT_NEAR(total.discriminator, 1.5, kTol);
  EXPECT_NEAR(total.generator, 0.0, kTol);
}

TEST(TotalLosses, AllZeroAndPlainSums) {
  const auto zero = total_losses(LossTerms<double>{0, 0, 0, 0, 0, 0}, LossWeights{});
  EXPECT_EQ(zero.discriminator, 0.0);
  EXPECT_EQ(zero.generator, 0.0);

  testing::Gen gen(2);
  for (int trial = 0; trial < 50; ++trial) {
    LossTerms<double> t{gen.real(-5, 0), gen.real(0, 3), gen.real(0, 3),
                        gen.real(0, 2),  gen.real(0, 3), gen.real(0, 2)};
    const auto r = total_losses(t, LossWeights{});
    EXPECT_NEAR(r.discriminator, -t.adv + t.cls_real, 1e-12);
    EXPECT_NEAR(r.generator, t.adv + t.cls_fake + t.rec + t.exp + t.per, 1e-12);
  }
}

TEST(TotalLosses, WeightsScaleTerms) {
  const LossTerms<double> t{-1.0, 0.5, 0.4, 0.2, 0.3, 0.1};
  const LossWeights w{2.0, 3.0, 5.0, 7.0, 11.0};
  const auto r = total_losses(t, w);
  EXPECT_NEAR(r.discriminator, 2.0 + 1.5, kTol);
  EXPECT_NEAR(r.generator, -2.0 + 1.2 + 1.0 + 2.1 + 1.1, kTol);
  // Same arithmetic on tensors.
  const LossTerms<torch::Tensor> tt{torch::tensor(-1.0, kDouble), torch::tensor(0.5, kDouble),
                                    torch::tensor(0.4, kDouble),  torch::tensor(0.2, kDouble),
                                    torch::tensor(0.3, kDouble),  torch::tensor(0.1, kDouble)};
  const auto rt = total_losses(tt, w);
  EXPECT_NEAR(value(rt.discriminator), r.discriminator, kTol);
  EXPECT_NEAR(value(rt.generator), r.generator, kTol);
}

TEST(LossWeights, DefaultsAreOneAndNegativeRejected) {
  const LossWeights w;
  for (double v : {w.lambda_adv, w.lambda_cls, w.lambda_rec, w.lambda_exp, w.lambda_per}) {
    EXPECT_EQ(v, 1.0);
  }
  EXPECT_THROW((LossWeights{1, 1, -0.1, 1, 1}.validate()), ValidationError);
  const auto back = nlohmann::json(LossWeights{1, 2, 3, 4, 5}).get<LossWeights>();
  EXPECT_EQ(back.lambda_per, 5.0);
}

TEST(LossSigns, NonNegativityProperty) {
  testing::Gen gen(13);
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = gen.integer(1, 16);
    const auto c = gen.integer(2, 12);
    const auto p = gen.prob_rows(n, c);
    const auto y = gen.labels(n, c);
    EXPECT_GE(value(domain_cls_loss(p, y)), 0.0);
    EXPECT_GE(value(explanation_loss(p, y)), 0.0);
    const auto g1 = gen.uniform({n, 1, 3, 3}, -2, 2);
    const auto g2 = gen.uniform({n, 1, 3, 3}, -2, 2);
    EXPECT_GE(value(reconstruction_loss(g1, g1, g2)), 0.0);
    EXPECT_GE(value(perturbation_loss(g1, g2)), 0.0);
    const auto dr = gen.uniform({n}, 1e-6, 1 - 1e-6);
    const auto df = gen.uniform({n}, 1e-6, 1 - 1e-6);
    EXPECT_LE(value(adversarial_loss(dr, df)), 0.0);
  }
}

TEST(LossOracles, HundredRandomBatches) {
  const auto gaps = oracle::oracle_gaps(100, 42);
  for (const auto& [name, gap] : gaps) EXPECT_LE(gap, 1e-6) << name;
}

TEST(LossGradients, CentralDifferences) {
  const auto errors = oracle::gradient_errors(7);
  for (const auto& [name, err] : errors) EXPECT_LE(err, 1e-3) << name;
}

TEST(LossGradients, FloatInputsKeepTheirDtype) {
  const auto p = torch::full({2, 3}, 1.0f / 3);
  EXPECT_EQ(domain_cls_loss(p, torch::tensor({0, 1}, torch::kInt64)).scalar_type(), torch::kFloat32);
}

}  // namespace
}  // namespace frace
