#include "frace/evaluation.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "frace/errors.hpp"

namespace frace {

void EvalAccumulator::add(const EvalRecord& r) {
  ++n;
  if (r.predicted_after == r.target) ++valid;
  l1_sum += r.l1;
  cycle_sum += r.cycle;
  realism_sum += r.realism;
}

void EvalAccumulator::merge(const EvalAccumulator& o) {
  n += o.n;
  valid += o.valid;
  l1_sum += o.l1_sum;
  cycle_sum += o.cycle_sum;
  realism_sum += o.realism_sum;
  timed_images += o.timed_images;
  timed_seconds += o.timed_seconds;
}

EvalReport EvalReport::from(const EvalAccumulator& acc) {
  EvalReport r;
  r.n = acc.n;
  r.valid_count = acc.valid;
  if (acc.n > 0) {
    const auto n = static_cast<double>(acc.n);
    r.validity_rate = static_cast<double>(acc.valid) / n;
    r.mean_l1_perturbation = acc.l1_sum / n;
    r.mean_cycle_error = acc.cycle_sum / n;
    r.mean_realism = acc.realism_sum / n;
  }
  if (acc.timed_seconds > 0.0) r.ips = static_cast<double>(acc.timed_images) / acc.timed_seconds;
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"validity_rate", r.validity_rate},
                     {"mean_l1_perturbation", r.mean_l1_perturbation},
                     {"mean_cycle_error", r.mean_cycle_error},
                     {"mean_realism", r.mean_realism},
                     {"ips", r.ips},
                     {"n", r.n},
                     {"valid_count", r.valid_count}};
}

EvalResult evaluate(const Generator& generator, const Discriminator& discriminator,
                    const Classifier& classifier, const Dataset& test_set, std::uint64_t seed,
                    std::int64_t batch_size) {
  if (test_set.empty()) throw ValidationError("evaluation set is empty");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  const auto classes = classifier.num_classes();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> offset(1, classes - 1);

  Generator g = generator;
  Discriminator d = discriminator;
  torch::NoGradGuard no_grad;

  EvalResult result;
  EvalAccumulator acc;
  for (std::int64_t start = 0; start < test_set.size(); start += batch_size) {
    const auto end = std::min(start + batch_size, test_set.size());
    const auto images = test_set.images().slice(0, start, end);
    const auto labels = test_set.labels().slice(0, start, end);
    const auto before = argmax_rows(classifier.predict_proba(images));

    auto targets = torch::empty_like(before);
    for (std::int64_t i = 0; i < before.size(0); ++i) {
      targets[i] = (before[i].item<std::int64_t>() + offset(rng)) % classes;
    }

    const auto batch = explain_batch(generator, classifier, images, targets);
    acc.timed_images += images.size(0);
    acc.timed_seconds += batch.latency_ms / 1000.0;

    const auto after = argmax_rows(batch.probs_after);
    const auto back = g->forward(batch.counterfactual, before);
    const auto realism = discriminate(d, batch.counterfactual).real_prob;
    const auto l1 = batch.perturbation.abs().flatten(1).mean(1);
    const auto cycle = (batch.perturbation + back).abs().flatten(1).mean(1);

    for (std::int64_t i = 0; i < images.size(0); ++i) {
      EvalRecord r{labels[i].item<std::int64_t>(), before[i].item<std::int64_t>(),
                   targets[i].item<std::int64_t>(), after[i].item<std::int64_t>(),
                   l1[i].item<double>(),           cycle[i].item<double>(),
                   realism[i].item<double>()};
      acc.add(r);
      result.records.push_back(r);
    }
  }
  result.report = EvalReport::from(acc);
  return result;
}

void BenchConfig::validate() const {
  if (batch_size < 1 || warmup_batches < 1 || timed_batches < 1 || repetitions < 1) {
    throw ValidationError("benchmark counts must all be >= 1");
  }
}

void to_json(nlohmann::json& j, const BenchConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"warmup_batches", c.warmup_batches},
                     {"timed_batches", c.timed_batches},
                     {"repetitions", c.repetitions},
                     {"hardware", c.hardware}};
}

void to_json(nlohmann::json& j, const IpsResult& r) {
  j = nlohmann::json{{"mean_ips", r.mean}, {"stddev_ips", r.stddev}, {"per_repetition", r.per_repetition}};
}

IpsResult bench_ips(const BatchExplainFn& explain_fn, const torch::Tensor& images,
                    const BenchConfig& config) {
  config.validate();
  if (images.dim() < 1 || images.size(0) == 0) throw ValidationError("no benchmark images");
  using Clock = std::chrono::steady_clock;
  // Durations shorter than this many clock ticks are not trusted.
  constexpr std::int64_t kMinTicks = 1000;

  const auto n = images.size(0);
  std::int64_t cursor = 0;
  auto next_batch = [&] {
    std::vector<torch::Tensor> rows;
    for (std::int64_t i = 0; i < config.batch_size; ++i) {
      rows.push_back(images[cursor]);
      cursor = (cursor + 1) % n;
    }
    return torch::stack(rows);
  };

  for (std::int64_t i = 0; i < config.warmup_batches; ++i) explain_fn(next_batch());

  IpsResult result;
  for (std::int64_t rep = 0; rep < config.repetitions; ++rep) {
    std::vector<torch::Tensor> batches;
    for (std::int64_t i = 0; i < config.timed_batches; ++i) batches.push_back(next_batch());
    const auto start = Clock::now();
    for (const auto& b : batches) explain_fn(b);
    const auto elapsed = Clock::now() - start;
    if (elapsed.count() < kMinTicks) {
      throw Error("timed region lasted " + std::to_string(elapsed.count()) +
                  " clock ticks; increase timed_batches or batch_size");
    }
    const double seconds = std::chrono::duration<double>(elapsed).count();
    result.per_repetition.push_back(
        static_cast<double>(config.timed_batches * config.batch_size) / seconds);
  }
  const auto reps = static_cast<double>(result.per_repetition.size());
  result.mean = std::accumulate(result.per_repetition.begin(), result.per_repetition.end(), 0.0) / reps;
  if (result.per_repetition.size() > 1) {
    double ss = 0.0;
    for (double v : result.per_repetition) ss += (v - result.mean) * (v - result.mean);
    result.stddev = std::sqrt(ss / (reps - 1.0));
  }
  return result;
}

Explanation iterative_baseline_explain(const LogProbFn& model, std::int64_t num_classes,
                                       const torch::Tensor& query, std::int64_t counter_class,
                                       const BaselineOptions& options,
                                       std::vector<double>* objective_trace) {
  const DomainLabel counter(counter_class, num_classes);
  if (options.max_iters < 0 || !(options.step_size > 0.0) || !(options.l1_weight >= 0.0)) {
    throw ValidationError("invalid baseline options");
  }
  const auto start = std::chrono::steady_clock::now();
  const auto x = query.detach().unsqueeze(0);
  auto delta = torch::zeros_like(x);
  const double shrink = options.step_size * options.l1_weight;

  torch::Tensor log_probs_before;
  torch::Tensor log_probs;
  std::int64_t iterations = 0;
  while (true) {
    auto d = delta.clone().requires_grad_(true);
    const auto lp = model(torch::clamp(x + d, -1.0, 1.0));
    log_probs = lp.detach()[0];
    if (!log_probs_before.defined()) log_probs_before = log_probs;
    if (objective_trace) {
      objective_trace->push_back(log_probs[counter_class].item<double>() -
                                 options.l1_weight * delta.abs().sum().item<double>());
    }
    if (argmax_lowest(log_probs) == counter_class || iterations >= options.max_iters) break;

    const auto grad = torch::autograd::grad({lp[0][counter_class]}, {d})[0];
    if (!torch::isfinite(grad).all().item<bool>()) {
      throw DivergenceError("baseline gradient became non-finite", iterations);
    }
    const auto moved = delta + options.step_size * grad;
    delta = torch::sign(moved) * torch::clamp_min(moved.abs() - shrink, 0.0);
    ++iterations;
  }

  const auto probs_before = log_probs_before.exp();
  const auto latency =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return Explanation{query,
                     std::nullopt,
                     DomainLabel(argmax_lowest(probs_before), num_classes),
                     counter,
                     delta[0],
                     torch::clamp(x + delta, -1.0, 1.0)[0],
                     probs_before,
                     log_probs.exp(),
                     latency,
                     iterations};
}

Explanation iterative_baseline_explain(const Classifier& classifier, const torch::Tensor& query,
                                       std::int64_t counter_class, const BaselineOptions& options,
                                       std::vector<double>* objective_trace) {
  const LogProbFn model = [&classifier](const torch::Tensor& batch) {
    return torch::log_softmax(classifier.logits(batch), 1);
  };
  return iterative_baseline_explain(model, classifier.num_classes(), query, counter_class, options,
                                    objective_trace);
}

}  // namespace frace
