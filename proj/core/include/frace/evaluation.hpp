#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "frace/classifier.hpp"
#include "frace/datasets.hpp"
#include "frace/explainer.hpp"
#include "frace/models.hpp"
#include "json.hpp"

namespace frace {

struct EvalRecord {
  std::int64_t ground_truth = 0;
  std::int64_t predicted_before = 0;
  std::int64_t target = 0;
  std::int64_t predicted_after = 0;
  double l1 = 0.0;       // mean |G(x, y^c)|
  double cycle = 0.0;    // mean |G(x, y^c) + G(x^c, y*)|
  double realism = 0.0;  // D real-probability on x^c
};

/// Sums and counts; shards merge associatively and means are derived.
struct EvalAccumulator {
  std::int64_t n = 0;
  std::int64_t valid = 0;
  double l1_sum = 0.0;
  double cycle_sum = 0.0;
  double realism_sum = 0.0;
  std::int64_t timed_images = 0;
  double timed_seconds = 0.0;

  void add(const EvalRecord& record);
  void merge(const EvalAccumulator& other);
};

struct EvalReport {
  double validity_rate = 0.0;
  double mean_l1_perturbation = 0.0;
  double mean_cycle_error = 0.0;
  double mean_realism = 0.0;
  double ips = 0.0;
  std::int64_t n = 0;
  std::int64_t valid_count = 0;

  static EvalReport from(const EvalAccumulator& acc);
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct EvalResult {
  EvalReport report;
  std::vector<EvalRecord> records;
};

/// For every test image draws y^c != y* (the classifier's prediction)
/// from `seed`, explains it and accumulates the metrics.
EvalResult evaluate(const Generator& generator, const Discriminator& discriminator,
                    const Classifier& classifier, const Dataset& test_set, std::uint64_t seed,
                    std::int64_t batch_size = 64);

struct BenchConfig {
  std::int64_t batch_size = 1;
  std::int64_t warmup_batches = 5;
  std::int64_t timed_batches = 50;
  std::int64_t repetitions = 5;
  std::string hardware = "unspecified";

  void validate() const;
};

void to_json(nlohmann::json& j, const BenchConfig& c);

struct IpsResult {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> per_repetition;
};

void to_json(nlohmann::json& j, const IpsResult& r);

using BatchExplainFn = std::function<void(const torch::Tensor& batch)>;

/// Images per second of `explain_fn`, cycling through `images` in batches.
/// Warmup batches are excluded from timing. Throws Error when a
/// repetition is too short for the clock to measure.
IpsResult bench_ips(const BatchExplainFn& explain_fn, const torch::Tensor& images,
                    const BenchConfig& config);

struct BaselineOptions {
  double step_size = 0.05;
  std::int64_t max_iters = 200;
  double l1_weight = 0.1;
};

/// Batch -> log-probabilities [N, C], differentiable w.r.t. the input.
using LogProbFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// Per-query gradient search for delta maximizing
///   log H(y^c | clamp(x + delta)) - l1_weight * sum |delta|
/// by proximal gradient ascent (soft-thresholding handles the L1 term).
/// Stops once the argmax is y^c or after max_iters updates. If
/// `objective_trace` is given it receives the objective before the first
/// and after every update.
Explanation iterative_baseline_explain(const LogProbFn& model, std::int64_t num_classes,
                                       const torch::Tensor& query, std::int64_t counter_class,
                                       const BaselineOptions& options,
                                       std::vector<double>* objective_trace = nullptr);

Explanation iterative_baseline_explain(const Classifier& classifier, const torch::Tensor& query,
                                       std::int64_t counter_class, const BaselineOptions& options,
                                       std::vector<double>* objective_trace = nullptr);

}  // namespace frace
