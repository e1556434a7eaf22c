#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "frace/classifier.hpp"
#include "frace/datasets.hpp"
#include "frace/errors.hpp"
#include "frace/losses.hpp"
#include "frace/models.hpp"
#include "json.hpp"

namespace frace {

enum class AdversarialMode {
  kLog,             // log D(x) + log(1 - D(fake)), sigmoid real/fake head
  kWassersteinGp,   // critic scores with gradient penalty
};

struct GanConfig {
  std::string dataset = "mnist";
  std::string data_dir;
  std::int64_t train_subset = 0;  // 0 = whole training split

  LossWeights weights;
  AdversarialMode adversarial = AdversarialMode::kLog;
  double gradient_penalty = 10.0;

  double lr_generator = 1e-4;
  double lr_discriminator = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;

  std::int64_t epochs = 20;
  std::int64_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Generator is updated on every n-th step; the discriminator every step.
  std::int64_t generator_interval = 1;
  std::int64_t checkpoint_every = 0;  // steps; 0 disables

  GeneratorOptions generator;
  DiscriminatorOptions discriminator;

  void validate() const;
  /// Sets the class count and image geometry of both networks.
  void fit_to(const ImageShape& shape, std::int64_t num_classes);
};

void to_json(nlohmann::json& j, const GanConfig& c);
void from_json(const nlohmann::json& j, GanConfig& c);
GanConfig read_gan_config(const std::filesystem::path& path);

struct LossReport {
  std::int64_t step = 0;
  double adv = 0.0;        // value the discriminator step optimized
  double adv_g = 0.0;      // value after the discriminator update
  double cls_real = 0.0;
  double cls_fake = 0.0;
  double rec = 0.0;
  double exp = 0.0;
  double per = 0.0;
  double gp = 0.0;
  double total_d = 0.0;
  double total_g = 0.0;
  bool generator_updated = false;

  bool finite() const;
};

void to_json(nlohmann::json& j, const LossReport& r);
void from_json(const nlohmann::json& j, LossReport& r);

/// Thrown when a step produces a non-finite loss; carries that step's report.
class TrainingDiverged : public DivergenceError {
 public:
  explicit TrainingDiverged(LossReport report)
      : DivergenceError("GAN loss became non-finite", report.step), report_(report) {}
  const LossReport& report() const { return report_; }

 private:
  LossReport report_;
};

/// Generator, discriminator, their optimizers and the frozen classifier.
/// The classifier is put in eval mode with gradients disabled on
/// construction and is never passed to an optimizer.
class GanTrainer {
 public:
  GanTrainer(const GanConfig& config, std::shared_ptr<Classifier> classifier);

  /// One discriminator update on L_D, then (every generator_interval steps)
  /// one generator update on L_G. labels are ground truth y; counterfactual
  /// targets are drawn uniformly from the other C - 1 classes.
  LossReport train_step(const torch::Tensor& images, const torch::Tensor& labels);

  /// Targets y^c != y for each label, from this trainer's sampler.
  torch::Tensor sample_counter_labels(const torch::Tensor& labels);

  Generator& generator() { return generator_; }
  Discriminator& discriminator() { return discriminator_; }
  const Classifier& classifier() const { return *classifier_; }
  const GanConfig& config() const { return config_; }
  std::int64_t step() const { return step_; }

 private:
  torch::Tensor gradient_penalty(const torch::Tensor& real, const torch::Tensor& fake);

  GanConfig config_;
  std::shared_ptr<Classifier> classifier_;
  Generator generator_{nullptr};
  Discriminator discriminator_{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  at::Generator sampler_;
  std::int64_t step_ = 0;
};

/// Newline-delimited JSON, one LossReport per line.
class LossLogWriter {
 public:
  explicit LossLogWriter(const std::filesystem::path& path);
  void append(const LossReport& report);

 private:
  std::ofstream out_;
};

std::vector<LossReport> read_loss_log(const std::filesystem::path& path);

struct GanRunOptions {
  std::optional<std::filesystem::path> output_dir;  // checkpoints + log
  std::function<void(const LossReport&)> on_step;
  std::function<void(std::int64_t epoch)> on_epoch;
};

struct GanRunResult {
  Generator generator;
  Discriminator discriminator;
  std::vector<LossReport> log;
};

/// Runs config.epochs passes over train_set in seeded random order.
GanRunResult train_gan(const GanConfig& config, const Dataset& train_set,
                       std::shared_ptr<Classifier> classifier,
                       const GanRunOptions& options = {});

/// Writes generator and discriminator checkpoints with the full config
/// (including the loss weights) in each manifest.
void save_gan_checkpoint(const std::filesystem::path& directory, const Generator& generator,
                         const Discriminator& discriminator, const GanConfig& config,
                         std::int64_t step);

}  // namespace frace
