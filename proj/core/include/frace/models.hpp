#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>

#include <torch/torch.h>

#include "frace/datasets.hpp"
#include "json.hpp"

namespace frace {

struct GeneratorOptions {
  std::int64_t image_channels = 1;
  std::int64_t num_classes = 10;
  std::int64_t base_width = 64;
  std::int64_t downsampling = 2;
  std::int64_t residual_blocks = 6;
  /// tanh head multiplier; 2 lets a perturbation move a pixel across the
  /// whole [-1, 1] range.
  double output_scale = 2.0;
};

void to_json(nlohmann::json& j, const GeneratorOptions& o);
void from_json(const nlohmann::json& j, GeneratorOptions& o);

struct DiscriminatorOptions {
  std::int64_t image_channels = 1;
  std::int64_t num_classes = 10;
  std::int64_t image_height = 28;
  std::int64_t image_width = 28;
  std::int64_t base_width = 64;
  std::int64_t downsampling = 3;
};

void to_json(nlohmann::json& j, const DiscriminatorOptions& o);
void from_json(const nlohmann::json& j, DiscriminatorOptions& o);

/// One-hot labels broadcast to C constant planes: [N] -> [N, C, h, w].
/// Throws ValidationError for labels outside [0, num_classes).
torch::Tensor condition_labels(const torch::Tensor& labels, std::int64_t num_classes,
                               std::int64_t height, std::int64_t width);

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Encoder / residual blocks / decoder network producing a perturbation
/// G(x, y^c) of the same shape as x. The counterfactual image is x + G.
class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const GeneratorOptions& options);

  /// images [N, ch, h, w] in [-1, 1], target_labels [N] int64.
  torch::Tensor forward(const torch::Tensor& images, const torch::Tensor& target_labels);

  /// Zeroes weights and bias of the output convolution, making the
  /// perturbation identically zero.
  void zero_output_layer();

  const GeneratorOptions& options() const { return options_; }
  std::int64_t input_channels() const { return options_.image_channels + options_.num_classes; }
  std::int64_t forward_calls() const { return forward_calls_.load(); }

 private:
  GeneratorOptions options_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d output_{nullptr};
  std::atomic<std::int64_t> forward_calls_{0};
};
TORCH_MODULE(Generator);

struct DiscriminatorOutput {
  torch::Tensor real_logits;    // [N]
  torch::Tensor domain_logits;  // [N, C]
};

struct Discrimination {
  torch::Tensor real_prob;    // [N], in (0, 1)
  torch::Tensor domain_prob;  // [N, C], rows sum to 1
};

/// Strided convolutional trunk with two heads: real/fake (D) and domain
/// classification (D_a), both computed in one pass.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const DiscriminatorOptions& options);

  DiscriminatorOutput forward(const torch::Tensor& images);

  const DiscriminatorOptions& options() const { return options_; }

 private:
  DiscriminatorOptions options_;
  torch::nn::Sequential trunk_{nullptr};
  torch::nn::Conv2d real_head_{nullptr};
  torch::nn::Conv2d domain_head_{nullptr};
};
TORCH_MODULE(Discriminator);

/// Validating wrapper over Generator::forward.
torch::Tensor generate_perturbation(Generator& generator, const torch::Tensor& images,
                                    const torch::Tensor& target_labels);

/// Squashed heads. Throws ShapeError if images do not match the options.
Discrimination discriminate(Discriminator& discriminator, const torch::Tensor& images);

void save_generator(const Generator& generator, const std::filesystem::path& stem,
                    const nlohmann::json& extra = nlohmann::json::object());
Generator load_generator(const std::filesystem::path& stem);
void save_discriminator(const Discriminator& discriminator, const std::filesystem::path& stem,
                        const nlohmann::json& extra = nlohmann::json::object());
Discriminator load_discriminator(const std::filesystem::path& stem);

}  // namespace frace
