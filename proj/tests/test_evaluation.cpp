#include <chrono>
#include <thread>

#include <gtest/gtest.h>

#include "frace/errors.hpp"
#include "frace/evaluation.hpp"
#include "test_support.hpp"

namespace frace {
namespace {

using testing::Gen;

Dataset toy_test_set(std::int64_t n) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(11);
  return Dataset({"toy", {28, 28, 1}, 10, 0.5, {}}, testing::random_images(n, {28, 28, 1}, 11),
                 torch::randint(0, 10, {n}, g, torch::kInt64));
}

struct Models {
  Classifier h = testing::tiny_classifier();
  Generator g{testing::tiny_generator_options()};
  Discriminator d{testing::tiny_discriminator_options()};
  Models() {
    g->eval();
    d->eval();
  }
};

TEST(Evaluate, IdentityGeneratorIsNeverValid) {
  Models m;
  m.g->zero_output_layer();
  const auto r = evaluate(m.g, m.d, m.h, toy_test_set(20), 1, 8);
  EXPECT_EQ(r.report.n, 20);
  EXPECT_EQ(r.report.validity_rate, 0.0);
  EXPECT_EQ(r.report.mean_l1_perturbation, 0.0);
  EXPECT_EQ(r.report.mean_cycle_error, 0.0);
  for (const auto& rec : r.records) EXPECT_NE(rec.target, rec.predicted_before);
}

TEST(Evaluate, RecountMatchesReport) {
  Models m;
  const auto data = toy_test_set(30);
  const auto r = evaluate(m.g, m.d, m.h, data, 2, 7);
  ASSERT_EQ(r.records.size(), 30u);
  std::int64_t valid = 0;
  double l1 = 0;
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    const auto& rec = r.records[i];
    EXPECT_EQ(rec.ground_truth, data.labels()[i].item<std::int64_t>());
    EXPECT_NE(rec.target, rec.predicted_before);
    valid += rec.predicted_after == rec.target;
    l1 += rec.l1;
  }
  EXPECT_EQ(r.report.valid_count, valid);
  EXPECT_DOUBLE_EQ(r.report.validity_rate * 30, static_cast<double>(valid));
  EXPECT_NEAR(r.report.mean_l1_perturbation, l1 / 30, 1e-12);
  EXPECT_GT(r.report.ips, 0.0);
}

TEST(Evaluate, DeterministicApartFromTiming) {
  Models m;
  const auto data = toy_test_set(12);
  const auto a = evaluate(m.g, m.d, m.h, data, 5, 4);
  const auto b = evaluate(m.g, m.d, m.h, data, 5, 4);
  auto strip = [](EvalReport r) {
    r.ips = 0;
    return nlohmann::json(r).dump();
  };
  EXPECT_EQ(strip(a.report), strip(b.report));
  // Batch size does not change which targets are drawn.
  const auto c = evaluate(m.g, m.d, m.h, data, 5, 12);
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i].target, c.records[i].target);
  EXPECT_THROW(evaluate(m.g, m.d, m.h, data, 5, 0), ValidationError);
}

EvalRecord random_record(Gen& gen) {
  EvalRecord r;
  r.predicted_before = gen.integer(0, 9);
  r.target = gen.integer(0, 9);
  r.predicted_after = gen.integer(0, 9);
  r.l1 = gen.real(0, 2);
  r.cycle = gen.real(0, 2);
  r.realism = gen.real(0, 1);
  return r;
}

TEST(EvalAccumulator, MergeIsAssociativeProperty) {
  Gen gen(3);
  for (int trial = 0; trial < 30; ++trial) {
    EvalAccumulator a, b, c, all;
    for (auto* acc : {&a, &b, &c}) {
      const auto k = gen.integer(0, 20);
      for (std::int64_t i = 0; i < k; ++i) {
        const auto r = random_record(gen);
        acc->add(r);
        all.add(r);
      }
    }
    EvalAccumulator left = a, right = b;
    left.merge(b);
    left.merge(c);
    right.merge(c);
    EvalAccumulator right_total = a;
    right_total.merge(right);
    EXPECT_EQ(left.n, all.n);
    EXPECT_EQ(left.valid, all.valid);
    EXPECT_EQ(right_total.valid, all.valid);
    EXPECT_NEAR(left.l1_sum, right_total.l1_sum, 1e-9);
    EXPECT_NEAR(left.l1_sum, all.l1_sum, 1e-9);
  }
}

TEST(EvalAccumulator, AllValidAndEmpty) {
  EvalAccumulator acc;
  EXPECT_EQ(EvalReport::from(acc).validity_rate, 0.0);
  for (int i = 0; i < 5; ++i) acc.add({0, 1, 3, 3, 0.1, 0.0, 0.5});
  const auto r = EvalReport::from(acc);
  EXPECT_EQ(r.validity_rate, 1.0);
  EXPECT_NEAR(r.mean_l1_perturbation, 0.1, 1e-12);
}

TEST(BenchIps, SleepingStubRunsNearHundred) {
  const auto images = torch::zeros({3, 1, 2, 2});
  auto stub = [](const torch::Tensor&) { std::this_thread::sleep_for(std::chrono::milliseconds(10)); };
  BenchConfig c{1, 1, 10, 3, "test"};
  const auto a = bench_ips(stub, images, c);
  EXPECT_EQ(a.per_repetition.size(), 3u);
  EXPECT_GT(a.mean, 60.0);
  EXPECT_LE(a.mean, 100.0);
  c.timed_batches = 20;
  const auto b = bench_ips(stub, images, c);
  EXPECT_NEAR(b.mean / a.mean, 1.0, 0.25);
  const nlohmann::json j = a;
  EXPECT_TRUE(j.contains("mean_ips"));
  EXPECT_TRUE(j.contains("stddev_ips"));
}

TEST(BenchIps, WarmupIsNotTimedAndBatchesCycle) {
  const auto images = torch::arange(5).to(torch::kFloat32).view({5, 1, 1, 1});
  std::vector<float> seen;
  auto fn = [&](const torch::Tensor& b) {
    for (std::int64_t i = 0; i < b.size(0); ++i) seen.push_back(b[i].item<float>());
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  };
  bench_ips(fn, images, BenchConfig{3, 2, 2, 1, "test"});
  ASSERT_EQ(seen.size(), 12u);
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], static_cast<float>(i % 5));
}

TEST(BenchIps, ValidationAndTooShort) {
  const auto images = torch::zeros({1, 1, 1, 1});
  EXPECT_THROW((BenchConfig{0, 1, 1, 1}.validate()), ValidationError);
  EXPECT_THROW((BenchConfig{1, 1, 1, 0}.validate()), ValidationError);
  EXPECT_THROW(bench_ips([](const torch::Tensor&) {}, images, BenchConfig{1, 1, 1, 1}), Error);
}

TEST(Baseline, ZeroItersIsIdentity) {
  const auto h = testing::tiny_classifier();
  const auto x = testing::random_images(1)[0];
  const auto e = iterative_baseline_explain(h, x, 3, BaselineOptions{0.05, 0, 0.1});
  EXPECT_EQ(e.iterations, 0);
  EXPECT_TRUE(torch::equal(e.counterfactual_image, x));
  EXPECT_EQ(e.perturbation.abs().max().item<float>(), 0.0f);
}

TEST(Baseline, AlreadyTargetStopsAtOnce) {
  const auto h = testing::tiny_classifier();
  const auto x = testing::random_images(1)[0];
  const auto pred = h.predict(x).index();
  const auto e = iterative_baseline_explain(h, x, pred, BaselineOptions{});
  EXPECT_EQ(e.iterations, 0);
  EXPECT_THROW(iterative_baseline_explain(h, x, 10, BaselineOptions{}), ValidationError);
}

TEST(Baseline, ConcaveProbeAscendsMonotonically) {
  // Linear logits keep log-softmax concave in delta; small steps never go down.
  const auto w = torch::tensor({1.0f, -0.5f, -1.0f, 0.5f, 0.2f, 0.3f}).view({3, 2});
  const LogProbFn model = [&](const torch::Tensor& b) {
    return torch::log_softmax(torch::matmul(b.flatten(1), w.t()), 1);
  };
  const auto x = torch::tensor({0.1f, -0.1f}).view({1, 1, 2});
  std::vector<double> trace;
  const auto e = iterative_baseline_explain(model, 3, x, 1, BaselineOptions{0.02, 40, 0.01}, &trace);
  ASSERT_EQ(static_cast<std::int64_t>(trace.size()), e.iterations + 1);
  ASSERT_GT(e.iterations, 0);
  for (std::size_t i = 1; i < trace.size(); ++i) EXPECT_GE(trace[i], trace[i - 1] - 1e-6) << i;
}

}  // namespace
}  // namespace frace
