#include "frace/explainer.hpp"

#include <algorithm>
#include <chrono>
#include <random>
#include <sstream>

#include "frace/errors.hpp"

namespace frace {

namespace {

void check_counter_classes(const torch::Tensor& counters, std::int64_t num_classes) {
  if (counters.dim() != 1) throw ShapeError("counter classes must be a 1-D tensor");
  if (counters.numel() == 0) return;
  const auto lo = counters.min().item<std::int64_t>();
  const auto hi = counters.max().item<std::int64_t>();
  if (lo < 0 || hi >= num_classes) {
    throw ValidationError("counter class outside [0, " + std::to_string(num_classes) + ")");
  }
}

}  // namespace

ExplanationBatch explain_batch(const Generator& generator, const Classifier& classifier,
                               const torch::Tensor& images, const torch::Tensor& counter_classes) {
  check_counter_classes(counter_classes, classifier.num_classes());
  const auto& shape = classifier.input_shape();
  if (images.dim() != 4 || images.size(1) != shape.channels || images.size(2) != shape.height ||
      images.size(3) != shape.width) {
    std::ostringstream msg;
    msg << "explain expects [N, " << shape.channels << ", " << shape.height << ", " << shape.width
        << "], got " << images.sizes();
    throw ShapeError(msg.str());
  }
  if (counter_classes.size(0) != images.size(0)) {
    throw ShapeError("one counter class per image is required");
  }
  if (generator->options().num_classes != classifier.num_classes()) {
    throw ConsistencyError("generator and classifier disagree on the class count");
  }

  torch::NoGradGuard no_grad;
  Generator g = generator;
  const auto start = std::chrono::steady_clock::now();
  ExplanationBatch out;
  out.probs_before = classifier.predict_proba(images);
  out.perturbation = g->forward(images, counter_classes.to(torch::kInt64));
  out.counterfactual = torch::clamp(images + out.perturbation, -1.0, 1.0);
  out.probs_after = classifier.predict_proba(out.counterfactual);
  out.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

Explanation explain(const Generator& generator, const Classifier& classifier,
                    const torch::Tensor& query, std::int64_t counter_class) {
  const DomainLabel counter(counter_class, classifier.num_classes());
  if (query.dim() != 3) throw ShapeError("explain expects a single [ch, h, w] image");
  const auto batch = explain_batch(generator, classifier, query.unsqueeze(0),
                                   torch::tensor({counter_class}, torch::kInt64));
  const auto before = batch.probs_before[0];
  return Explanation{query,
                     std::nullopt,
                     DomainLabel(argmax_lowest(before), classifier.num_classes()),
                     counter,
                     batch.perturbation[0],
                     batch.counterfactual[0],
                     before,
                     batch.probs_after[0],
                     batch.latency_ms,
                     0};
}

Explanation explain(const Generator& generator, const Classifier& classifier,
                    const LabeledImage& query, std::int64_t counter_class) {
  auto e = explain(generator, classifier, query.pixels, counter_class);
  e.ground_truth = query.label;
  return e;
}

void OverlaySpec::validate() const {
  if (!(threshold >= 0.0 && threshold < 2.0)) throw ValidationError("threshold must lie in [0, 2)");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in (0, 1]");
}

std::vector<Mark> classify_marks(const torch::Tensor& perturbation, double threshold) {
  if (perturbation.dim() != 3) throw ShapeError("perturbation must be [ch, h, w]");
  const auto mean = perturbation.detach().to(torch::kFloat64).mean(0).contiguous();
  const auto* p = mean.data_ptr<double>();
  std::vector<Mark> marks(static_cast<std::size_t>(mean.numel()), Mark::kNone);
  for (std::int64_t i = 0; i < mean.numel(); ++i) {
    if (p[i] > threshold) {
      marks[i] = Mark::kAdd;
    } else if (p[i] < -threshold) {
      marks[i] = Mark::kErase;
    }
  }
  return marks;
}

RgbImage render_overlay(const torch::Tensor& query, const torch::Tensor& perturbation,
                        const OverlaySpec& spec) {
  spec.validate();
  if (query.sizes() != perturbation.sizes()) {
    throw ShapeError("query and perturbation shapes differ");
  }
  auto out = to_rgb(query);
  const auto marks = classify_marks(perturbation, spec.threshold);
  for (std::int64_t i = 0; i < out.height * out.width; ++i) {
    if (marks[i] == Mark::kNone) continue;
    const auto& tint = marks[i] == Mark::kAdd ? spec.positive_color : spec.negative_color;
    auto* px = &out.data[i * 3];
    for (int k = 0; k < 3; ++k) {
      const double blended = (1.0 - spec.alpha) * px[k] + spec.alpha * tint[k];
      px[k] = static_cast<std::uint8_t>(std::clamp(std::lround(blended), 0L, 255L));
    }
  }
  return out;
}

RgbImage render_overlay(const Explanation& explanation, const OverlaySpec& spec) {
  return render_overlay(explanation.query, explanation.perturbation, spec);
}

RgbImage upscale(const RgbImage& image, std::int64_t factor) {
  if (factor <= 1) return image;
  RgbImage out(image.height * factor, image.width * factor);
  for (std::int64_t r = 0; r < out.height; ++r) {
    for (std::int64_t c = 0; c < out.width; ++c) {
      const auto* src = image.pixel(r / factor, c / factor);
      std::copy_n(src, 3, out.pixel(r, c));
    }
  }
  return out;
}

ExplanationGrid explanation_grid(const Generator& generator, const Classifier& classifier,
                                 const std::vector<LabeledImage>& samples, const OverlaySpec& spec,
                                 std::int64_t scale) {
  spec.validate();
  const auto classes = classifier.num_classes();
  std::vector<const LabeledImage*> by_class(static_cast<std::size_t>(classes), nullptr);
  for (const auto& s : samples) {
    auto& slot = by_class.at(static_cast<std::size_t>(s.label.index()));
    if (slot) throw ValidationError("two representatives for class " + std::to_string(s.label.index()));
    slot = &s;
  }
  std::vector<std::int64_t> missing;
  for (std::int64_t c = 0; c < classes; ++c) {
    if (!by_class[c]) missing.push_back(c);
  }
  if (!missing.empty()) {
    std::ostringstream msg;
    msg << "missing class representative(s):";
    for (auto c : missing) msg << ' ' << c;
    throw ValidationError(msg.str());
  }

  // All C x C pairs in one batch: row i repeats query i, column j targets j.
  std::vector<torch::Tensor> queries;
  for (std::int64_t i = 0; i < classes; ++i) queries.push_back(by_class[i]->pixels);
  const auto stacked = torch::stack(queries);
  const auto images = stacked.repeat_interleave(classes, 0);
  const auto targets = torch::arange(classes, torch::kInt64).repeat({classes});
  const auto batch = explain_batch(generator, classifier, images, targets);

  const auto& shape = classifier.input_shape();
  GridLayout layout{classes, shape.height * scale, shape.width * scale, 2};
  RgbImage grid(layout.height(), layout.width(), 32);
  for (std::int64_t i = 0; i < classes; ++i) {
    const auto query_tile = upscale(to_rgb(stacked[i]), scale);
    for (std::int64_t j = 0; j < classes; ++j) {
      const auto k = i * classes + j;
      const auto overlay = upscale(render_overlay(stacked[i], batch.perturbation[k], spec), scale);
      grid.blit(query_tile, layout.cell_row(i), layout.cell_col(j));
      grid.blit(overlay, layout.cell_row(i), layout.overlay_col(j));
    }
  }
  return {std::move(grid), layout, classes * classes};
}

std::vector<LabeledImage> pick_representatives(const Dataset& dataset, const Classifier& classifier,
                                               std::uint64_t seed) {
  const auto classes = dataset.descriptor().num_classes;
  const auto predicted = predict_all(classifier, dataset.images());
  const auto* pred = predicted.data_ptr<std::int64_t>();
  const auto* lab = dataset.labels().data_ptr<std::int64_t>();

  std::vector<std::vector<std::int64_t>> correct(classes), any(classes);
  for (std::int64_t n = 0; n < dataset.size(); ++n) {
    any[lab[n]].push_back(n);
    if (pred[n] == lab[n]) correct[lab[n]].push_back(n);
  }
  std::mt19937_64 rng(seed);
  std::vector<LabeledImage> out;
  for (std::int64_t c = 0; c < classes; ++c) {
    const auto& pool = correct[c].empty() ? any[c] : correct[c];
    if (pool.empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    out.push_back(dataset.at(pool[pick(rng)]));
  }
  return out;
}

}  // namespace frace
