#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "frace/classifier.hpp"
#include "frace/datasets.hpp"
#include "frace/image_io.hpp"
#include "frace/models.hpp"

namespace frace {

struct Explanation {
  torch::Tensor query;  // [ch, h, w]
  std::optional<DomainLabel> ground_truth;
  DomainLabel predicted_class;  // y*
  DomainLabel counter_class;    // y^c
  torch::Tensor perturbation;   // G(x, y^c)
  torch::Tensor counterfactual_image;  // clamp(x + G(x, y^c), -1, 1)
  torch::Tensor probs_before;
  torch::Tensor probs_after;
  double latency_ms = 0.0;
  std::int64_t iterations = 0;  // 0 for the single-pass explainer
};

/// Batched explanation tensors; rows align with the inputs.
struct ExplanationBatch {
  torch::Tensor perturbation;
  torch::Tensor counterfactual;
  torch::Tensor probs_before;
  torch::Tensor probs_after;
  double latency_ms = 0.0;
};

/// One generator forward and two classifier forwards over the whole batch,
/// no gradient. Labels are validated before any model is run.
ExplanationBatch explain_batch(const Generator& generator, const Classifier& classifier,
                               const torch::Tensor& images, const torch::Tensor& counter_classes);

Explanation explain(const Generator& generator, const Classifier& classifier,
                    const torch::Tensor& query, std::int64_t counter_class);
Explanation explain(const Generator& generator, const Classifier& classifier,
                    const LabeledImage& query, std::int64_t counter_class);

struct OverlaySpec {
  double threshold = 0.1;
  std::array<std::uint8_t, 3> positive_color{0, 0, 255};  // "add" (blue)
  std::array<std::uint8_t, 3> negative_color{255, 0, 0};  // "erase" (red)
  double alpha = 0.6;

  void validate() const;
};

enum class Mark : std::int8_t { kErase = -1, kNone = 0, kAdd = 1 };

/// Per-pixel mark from the channel-mean perturbation: above +threshold is
/// kAdd, below -threshold is kErase. Row-major, height * width entries.
std::vector<Mark> classify_marks(const torch::Tensor& perturbation, double threshold);

/// Marked pixels are alpha-blended toward their tint over the query; the
/// rest are the query rendered to RGB unchanged.
RgbImage render_overlay(const torch::Tensor& query, const torch::Tensor& perturbation,
                        const OverlaySpec& spec);
RgbImage render_overlay(const Explanation& explanation, const OverlaySpec& spec);

/// Cell (i, j) holds the query of prediction class i next to its overlay
/// toward counter class j. Tiles are `scale` times the image size.
struct GridLayout {
  std::int64_t classes = 0;
  std::int64_t tile_height = 0;
  std::int64_t tile_width = 0;
  std::int64_t pad = 2;

  std::int64_t cell_width() const { return 2 * tile_width + pad; }
  std::int64_t height() const { return pad + classes * (tile_height + pad); }
  std::int64_t width() const { return pad + classes * (cell_width() + pad); }
  std::int64_t cell_row(std::int64_t i) const { return pad + i * (tile_height + pad); }
  std::int64_t cell_col(std::int64_t j) const { return pad + j * (cell_width() + pad); }
  std::int64_t overlay_col(std::int64_t j) const { return cell_col(j) + tile_width + pad; }
};

struct ExplanationGrid {
  RgbImage image;
  GridLayout layout;
  std::int64_t combinations = 0;
};

/// `samples` must contain exactly one image per class (by label); missing
/// or duplicated classes raise ValidationError naming them.
ExplanationGrid explanation_grid(const Generator& generator, const Classifier& classifier,
                                 const std::vector<LabeledImage>& samples, const OverlaySpec& spec,
                                 std::int64_t scale = 1);

/// A random image per class, preferring ones the classifier predicts
/// correctly so grid rows follow prediction classes.
std::vector<LabeledImage> pick_representatives(const Dataset& dataset, const Classifier& classifier,
                                               std::uint64_t seed);

RgbImage upscale(const RgbImage& image, std::int64_t factor);

}  // namespace frace
