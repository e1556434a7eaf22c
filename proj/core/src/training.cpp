#include "frace/training.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "frace/checkpoint.hpp"

namespace fs = std::filesystem;

namespace frace {

NLOHMANN_JSON_SERIALIZE_ENUM(AdversarialMode, {{AdversarialMode::kLog, "log"},
                                               {AdversarialMode::kWassersteinGp, "wgan-gp"}})

void GanConfig::validate() const {
  weights.validate();
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  if (generator_interval < 1) throw ValidationError("generator interval must be >= 1");
  if (checkpoint_every < 0) throw ValidationError("checkpoint cadence must be >= 0");
  if (!(lr_generator > 0.0) || !(lr_discriminator > 0.0)) {
    throw ValidationError("learning rates must be positive");
  }
  if (generator.num_classes != discriminator.num_classes) {
    throw ValidationError("generator and discriminator disagree on the class count");
  }
  if (generator.image_channels != discriminator.image_channels) {
    throw ValidationError("generator and discriminator disagree on the channel count");
  }
}

void GanConfig::fit_to(const ImageShape& shape, std::int64_t num_classes) {
  generator.image_channels = shape.channels;
  generator.num_classes = num_classes;
  discriminator.image_channels = shape.channels;
  discriminator.num_classes = num_classes;
  discriminator.image_height = shape.height;
  discriminator.image_width = shape.width;
}

void to_json(nlohmann::json& j, const GanConfig& c) {
  j = nlohmann::json{{"dataset", c.dataset},
                     {"data_dir", c.data_dir},
                     {"train_subset", c.train_subset},
                     {"weights", c.weights},
                     {"adversarial", c.adversarial},
                     {"gradient_penalty", c.gradient_penalty},
                     {"lr_generator", c.lr_generator},
                     {"lr_discriminator", c.lr_discriminator},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"seed", c.seed},
                     {"generator_interval", c.generator_interval},
                     {"checkpoint_every", c.checkpoint_every},
                     {"generator", c.generator},
                     {"discriminator", c.discriminator}};
}

void from_json(const nlohmann::json& j, GanConfig& c) {
  GanConfig d;
  c.dataset = j.value("dataset", d.dataset);
  c.data_dir = j.value("data_dir", d.data_dir);
  c.train_subset = j.value("train_subset", d.train_subset);
  c.weights = j.value("weights", d.weights);
  c.adversarial = j.value("adversarial", d.adversarial);
  c.gradient_penalty = j.value("gradient_penalty", d.gradient_penalty);
  c.lr_generator = j.value("lr_generator", d.lr_generator);
  c.lr_discriminator = j.value("lr_discriminator", d.lr_discriminator);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.generator_interval = j.value("generator_interval", d.generator_interval);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.generator = j.value("generator", d.generator);
  c.discriminator = j.value("discriminator", d.discriminator);
}

GanConfig read_gan_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open training config " + path.string());
  try {
    auto config = nlohmann::json::parse(in).get<GanConfig>();
    config.validate();
    return config;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad training config " + path.string() + ": " + e.what());
  }
}

bool LossReport::finite() const {
  for (double v : {adv, adv_g, cls_real, cls_fake, rec, exp, per, gp, total_d, total_g}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"step", r.step},       {"adv", r.adv},           {"adv_g", r.adv_g},
                     {"cls_real", r.cls_real}, {"cls_fake", r.cls_fake}, {"rec", r.rec},
                     {"exp", r.exp},         {"per", r.per},           {"gp", r.gp},
                     {"total_d", r.total_d}, {"total_g", r.total_g},
                     {"generator_updated", r.generator_updated}};
}

void from_json(const nlohmann::json& j, LossReport& r) {
  j.at("step").get_to(r.step);
  j.at("adv").get_to(r.adv);
  j.at("adv_g").get_to(r.adv_g);
  j.at("cls_real").get_to(r.cls_real);
  j.at("cls_fake").get_to(r.cls_fake);
  j.at("rec").get_to(r.rec);
  j.at("exp").get_to(r.exp);
  j.at("per").get_to(r.per);
  j.at("gp").get_to(r.gp);
  j.at("total_d").get_to(r.total_d);
  j.at("total_g").get_to(r.total_g);
  j.at("generator_updated").get_to(r.generator_updated);
}

GanTrainer::GanTrainer(const GanConfig& config, std::shared_ptr<Classifier> classifier)
    : config_(config),
      classifier_(std::move(classifier)),
      sampler_(at::make_generator<at::CPUGeneratorImpl>(config.seed + 1)) {
  config_.validate();
  if (!classifier_) throw ValidationError("a trained classifier is required");
  if (classifier_->num_classes() != config_.generator.num_classes) {
    throw ConsistencyError("classifier has " + std::to_string(classifier_->num_classes()) +
                           " classes, generator config has " +
                           std::to_string(config_.generator.num_classes));
  }
  classifier_->freeze();

  torch::manual_seed(config_.seed);
  generator_ = Generator(config_.generator);
  discriminator_ = Discriminator(config_.discriminator);
  generator_->train();
  discriminator_->train();
  opt_g_ = std::make_unique<torch::optim::Adam>(
      generator_->parameters(),
      torch::optim::AdamOptions(config_.lr_generator).betas({config_.beta1, config_.beta2}));
  opt_d_ = std::make_unique<torch::optim::Adam>(
      discriminator_->parameters(),
      torch::optim::AdamOptions(config_.lr_discriminator).betas({config_.beta1, config_.beta2}));
}

torch::Tensor GanTrainer::sample_counter_labels(const torch::Tensor& labels) {
  const auto c = config_.generator.num_classes;
  const auto offset = torch::randint(1, c, {labels.size(0)}, sampler_, torch::kInt64);
  return (labels.to(torch::kInt64) + offset).remainder(c);
}

torch::Tensor GanTrainer::gradient_penalty(const torch::Tensor& real, const torch::Tensor& fake) {
  const auto alpha = torch::rand({real.size(0), 1, 1, 1}, sampler_, real.options());
  auto mixed = (alpha * real + (1.0 - alpha) * fake).detach().requires_grad_(true);
  const auto score = discriminator_->forward(mixed).real_logits;
  const auto grad = torch::autograd::grad({score.sum()}, {mixed}, {}, true, true)[0];
  return (grad.flatten(1).norm(2, 1) - 1.0).pow(2).mean();
}

LossReport GanTrainer::train_step(const torch::Tensor& images, const torch::Tensor& labels) {
  const auto& w = config_.weights;
  const bool log_mode = config_.adversarial == AdversarialMode::kLog;
  LossReport report;
  report.step = step_;

  const auto& o = config_.generator;
  if (images.dim() != 4 || images.size(1) != o.image_channels) {
    throw ShapeError("training images must be [N, " + std::to_string(o.image_channels) + ", h, w]");
  }
  if (labels.dim() != 1 || labels.size(0) != images.size(0)) {
    throw ShapeError("one label per training image is required");
  }
  if (labels.numel() > 0 && (labels.min().item<std::int64_t>() < 0 ||
                             labels.max().item<std::int64_t>() >= o.num_classes)) {
    throw ValidationError("training label outside [0, " + std::to_string(o.num_classes) + ")");
  }
  // With inputs validated, a ValidationError from a loss can only mean a
  // non-finite network output.
  auto diverged = [&](bool generator_phase) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    (generator_phase ? report.total_g : report.total_d) = nan;
    return TrainingDiverged(report);
  };

  const auto target = sample_counter_labels(labels);

  // Discriminator update on L_D.
  torch::Tensor d_real_prob;
  try {
    torch::Tensor fake;
    {
      torch::NoGradGuard no_grad;
      fake = torch::clamp(images + generator_->forward(images, target), -1.0, 1.0);
    }
    opt_d_->zero_grad();
    const auto real_out = discriminator_->forward(images);
    const auto fake_out = discriminator_->forward(fake);
    torch::Tensor adv;
    if (log_mode) {
      d_real_prob = torch::sigmoid(real_out.real_logits);
      adv = adversarial_loss(d_real_prob, torch::sigmoid(fake_out.real_logits));
    } else {
      adv = real_out.real_logits.mean() - fake_out.real_logits.mean();
    }
    const auto cls_real = domain_cls_loss(torch::softmax(real_out.domain_logits, 1), labels);
    auto loss_d = -w.lambda_adv * adv + w.lambda_cls * cls_real;
    if (!log_mode) {
      const auto gp = gradient_penalty(images, fake);
      report.gp = gp.item<double>();
      loss_d = loss_d + config_.gradient_penalty * gp;
    }
    report.adv = adv.item<double>();
    report.cls_real = cls_real.item<double>();
    report.total_d = loss_d.item<double>();
    if (!report.finite()) throw TrainingDiverged(report);
    loss_d.backward();
    opt_d_->step();
    if (log_mode) d_real_prob = d_real_prob.detach();
  } catch (const ValidationError&) {
    throw diverged(false);
  }

  // Generator update on L_G.
  if (step_ % config_.generator_interval == 0) {
    try {
      opt_g_->zero_grad();
      const auto g_forward = generator_->forward(images, target);
      const auto fake = torch::clamp(images + g_forward, -1.0, 1.0);
      const auto fake_out = discriminator_->forward(fake);
      torch::Tensor adv;
      if (log_mode) {
        adv = adversarial_loss(d_real_prob, torch::sigmoid(fake_out.real_logits));
      } else {
        torch::Tensor real_score;
        {
          torch::NoGradGuard no_grad;
          real_score = discriminator_->forward(images).real_logits.mean();
        }
        adv = real_score - fake_out.real_logits.mean();
      }
      const auto cls_fake = domain_cls_loss(torch::softmax(fake_out.domain_logits, 1), target);
      const auto h_probs = torch::softmax(classifier_->logits(fake), 1);
      const auto exp = explanation_loss(h_probs, target);
      const auto g_backward = generator_->forward(fake, labels);
      const auto rec = reconstruction_loss(images, g_forward, g_backward);
      const auto per = perturbation_loss(g_forward, g_backward);

      const auto totals =
          total_losses(LossTerms<torch::Tensor>{adv, torch::zeros_like(adv), cls_fake, rec, exp, per}, w);
      report.adv_g = adv.item<double>();
      report.cls_fake = cls_fake.item<double>();
      report.exp = exp.item<double>();
      report.rec = rec.item<double>();
      report.per = per.item<double>();
      report.total_g = totals.generator.item<double>();
      report.generator_updated = true;
      if (!report.finite()) throw TrainingDiverged(report);
      totals.generator.backward();
      opt_g_->step();
    } catch (const ValidationError&) {
      throw diverged(true);
    }
  }
  ++step_;
  return report;
}

LossLogWriter::LossLogWriter(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw FormatError("cannot open training log " + path.string());
}

void LossLogWriter::append(const LossReport& report) {
  out_ << nlohmann::json(report).dump() << '\n';
  out_.flush();
}

std::vector<LossReport> read_loss_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open training log " + path.string());
  std::vector<LossReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(nlohmann::json::parse(line).get<LossReport>());
  }
  return out;
}

void save_gan_checkpoint(const fs::path& directory, const Generator& generator,
                         const Discriminator& discriminator, const GanConfig& config,
                         std::int64_t step) {
  const nlohmann::json extra{{"config", config}, {"weights", config.weights}, {"step", step}};
  save_generator(generator, directory / "generator", extra);
  save_discriminator(discriminator, directory / "discriminator", extra);
}

GanRunResult train_gan(const GanConfig& config, const Dataset& train_set,
                       std::shared_ptr<Classifier> classifier, const GanRunOptions& options) {
  GanTrainer trainer(config, std::move(classifier));
  std::optional<LossLogWriter> log_writer;
  if (options.output_dir) {
    fs::create_directories(*options.output_dir);
    fs::remove(*options.output_dir / "train_log.ndjson");
    log_writer.emplace(*options.output_dir / "train_log.ndjson");
  }

  GanRunResult result{trainer.generator(), trainer.discriminator(), {}};
  if (config.epochs > 0 && train_set.empty()) throw ValidationError("training set is empty");

  auto order = at::make_generator<at::CPUGeneratorImpl>(config.seed + 2);
  const auto n = train_set.size();
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto perm = torch::randperm(n, order, torch::kInt64);
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      const auto idx = perm.slice(0, start, std::min(start + config.batch_size, n));
      auto report = trainer.train_step(train_set.images().index_select(0, idx),
                                       train_set.labels().index_select(0, idx));
      if (log_writer) log_writer->append(report);
      if (options.on_step) options.on_step(report);
      result.log.push_back(report);
      if (options.output_dir && config.checkpoint_every > 0 &&
          trainer.step() % config.checkpoint_every == 0) {
        std::ostringstream name;
        name << "step_" << std::setw(7) << std::setfill('0') << trainer.step();
        save_gan_checkpoint(*options.output_dir / "checkpoints" / name.str(), trainer.generator(),
                            trainer.discriminator(), config, trainer.step());
      }
    }
    if (options.on_epoch) options.on_epoch(epoch);
  }
  trainer.generator()->eval();
  trainer.discriminator()->eval();
  if (options.output_dir) {
    save_gan_checkpoint(*options.output_dir / "final", trainer.generator(), trainer.discriminator(),
                        config, trainer.step());
  }
  return result;
}

}  // namespace frace
