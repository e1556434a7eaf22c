#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "frace/classifier.hpp"
#include "frace/datasets.hpp"
#include "frace/models.hpp"

namespace frace {

/// Directory layout:
///   bundle.json                shared manifest (C, input shape, class names)
///   classifier.{pt,json}
///   generator.{pt,json}
///   discriminator.{pt,json}    optional
///   samples.pt                 browsable query images with labels
struct ModelBundle {
  std::string dataset;
  ImageShape input_shape;
  std::int64_t num_classes = 0;
  std::vector<std::string> class_names;

  std::shared_ptr<Classifier> classifier;
  Generator generator{nullptr};
  Discriminator discriminator{nullptr};
  torch::Tensor sample_images;  // [S, ch, h, w]
  torch::Tensor sample_labels;  // [S]

  /// Throws ConsistencyError naming the first disagreement between members.
  void validate() const;
  void save(const std::filesystem::path& directory) const;
  static ModelBundle load(const std::filesystem::path& directory);
};

/// Bundle over trained models, keeping up to `per_class` samples of each
/// class from `samples`.
ModelBundle make_bundle(std::shared_ptr<Classifier> classifier, Generator generator,
                        Discriminator discriminator, const Dataset& samples,
                        std::int64_t per_class = 32);

}  // namespace frace
