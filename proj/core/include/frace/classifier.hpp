#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "frace/datasets.hpp"
#include "json.hpp"

namespace frace {

struct ResNetOptions {
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 10;
  /// Channel count of the first stage; stages use 1x, 2x, 4x, 8x.
  std::int64_t base_width = 64;
};

void to_json(nlohmann::json& j, const ResNetOptions& o);
void from_json(const nlohmann::json& j, ResNetOptions& o);

class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(std::int64_t in_planes, std::int64_t planes, std::int64_t stride);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::BatchNorm2d bn1_{nullptr}, bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// ResNet-18 for small character images: 3x3 stride-1 stem and no max
/// pool, then four stages of two basic blocks each.
class ResNet18Impl : public torch::nn::Module {
 public:
  explicit ResNet18Impl(const ResNetOptions& options);
  torch::Tensor forward(const torch::Tensor& x);  // logits [N, C]

  const ResNetOptions& options() const { return options_; }

 private:
  ResNetOptions options_;
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::BatchNorm2d stem_bn_{nullptr};
  torch::nn::Sequential stages_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ResNet18);

struct TrainSchedule {
  std::int64_t epochs = 80;
  double base_lr = 0.1;
  std::vector<std::int64_t> decay_epochs{40, 60};
  double decay_factor = 0.1;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::int64_t batch_size = 128;

  /// Throws ValidationError unless decay epochs are strictly increasing
  /// and all below `epochs`.
  void validate() const;
  double lr_at(std::int64_t epoch) const;

  static TrainSchedule reference() { return {}; }
  static TrainSchedule desk_scale() { return {10, 0.1, {6, 8}, 0.1, 1e-4, 0.9, 128}; }
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

struct ClassifierMetrics {
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::int64_t epochs_completed = 0;
};

void to_json(nlohmann::json& j, const ClassifierMetrics& m);
void from_json(const nlohmann::json& j, ClassifierMetrics& m);

/// The fixed model H being explained. After construction or loading the
/// network is in eval mode; concurrent predict calls are safe.
class Classifier {
 public:
  Classifier(const ResNetOptions& options, const ImageShape& input_shape);

  const ResNetOptions& options() const { return options_; }
  const ImageShape& input_shape() const { return input_shape_; }
  std::int64_t num_classes() const { return options_.num_classes; }
  ResNet18& network() { return network_; }
  const ResNet18& network() const { return network_; }

  /// Logits with autograd enabled, so gradients can flow to the input.
  /// Throws ShapeError when the batch is not [N, ch, h, w].
  torch::Tensor logits(const torch::Tensor& batch) const;
  /// Softmax rows, computed without autograd.
  torch::Tensor predict_proba(const torch::Tensor& batch) const;
  /// Argmax of predict_proba for a single [ch, h, w] image.
  DomainLabel predict(const torch::Tensor& image) const;

  /// Sets eval mode and clears requires_grad on every parameter.
  void freeze();
  void set_training(bool on);

  std::int64_t forward_calls() const { return forward_calls_->load(); }

  TrainSchedule schedule;
  ClassifierMetrics metrics;
  std::vector<std::string> class_names;

  void save(const std::filesystem::path& stem) const;
  static Classifier load(const std::filesystem::path& stem);

 private:
  void check_batch(const torch::Tensor& batch) const;

  ResNetOptions options_;
  ImageShape input_shape_;
  ResNet18 network_;
  std::shared_ptr<std::atomic<std::int64_t>> forward_calls_;
};

/// Index of the largest entry; ties go to the lowest index.
std::int64_t argmax_lowest(const torch::Tensor& row);
/// Row-wise argmax_lowest over a [N, C] tensor.
torch::Tensor argmax_rows(const torch::Tensor& rows);

struct EpochLog {
  std::int64_t epoch;
  double lr;
  double train_loss;
  double train_accuracy;
  double test_accuracy;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// SGD with momentum, weight decay and a step learning-rate schedule.
/// Throws DivergenceError carrying the global step index when the loss
/// becomes non-finite.
Classifier train_classifier(const Dataset& train_set, const Dataset& test_set,
                            const TrainSchedule& schedule, std::uint64_t seed,
                            std::int64_t base_width = 64, const EpochCallback& on_epoch = {});

/// Predictions of `classifier` on every image, in batches.
torch::Tensor predict_all(const Classifier& classifier, const torch::Tensor& images,
                          std::int64_t batch_size = 256);
double accuracy(const Classifier& classifier, const Dataset& dataset);

}  // namespace frace
