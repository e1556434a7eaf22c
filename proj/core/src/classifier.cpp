#include "frace/classifier.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "frace/checkpoint.hpp"
#include "frace/errors.hpp"

namespace nn = torch::nn;

namespace frace {

void to_json(nlohmann::json& j, const ResNetOptions& o) {
  j = nlohmann::json{
      {"in_channels", o.in_channels}, {"num_classes", o.num_classes}, {"base_width", o.base_width}};
}

void from_json(const nlohmann::json& j, ResNetOptions& o) {
  j.at("in_channels").get_to(o.in_channels);
  j.at("num_classes").get_to(o.num_classes);
  j.at("base_width").get_to(o.base_width);
}

BasicBlockImpl::BasicBlockImpl(std::int64_t in_planes, std::int64_t planes, std::int64_t stride) {
  conv1_ = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_planes, planes, 3).stride(stride).padding(1).bias(false)));
  bn1_ = register_module("bn1", nn::BatchNorm2d(planes));
  conv2_ = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(planes, planes, 3).stride(1).padding(1).bias(false)));
  bn2_ = register_module("bn2", nn::BatchNorm2d(planes));
  shortcut_ = nn::Sequential();
  if (stride != 1 || in_planes != planes) {
    shortcut_->push_back(
        nn::Conv2d(nn::Conv2dOptions(in_planes, planes, 1).stride(stride).bias(false)));
    shortcut_->push_back(nn::BatchNorm2d(planes));
  }
  register_module("shortcut", shortcut_);
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto out = torch::relu(bn1_(conv1_(x)));
  out = bn2_(conv2_(out));
  out = out + (shortcut_->is_empty() ? x : shortcut_->forward(x));
  return torch::relu(out);
}

ResNet18Impl::ResNet18Impl(const ResNetOptions& options) : options_(options) {
  const auto w = options.base_width;
  stem_ = register_module(
      "stem", nn::Conv2d(nn::Conv2dOptions(options.in_channels, w, 3).stride(1).padding(1).bias(false)));
  stem_bn_ = register_module("stem_bn", nn::BatchNorm2d(w));
  stages_ = nn::Sequential();
  std::int64_t in_planes = w;
  const std::int64_t widths[] = {w, 2 * w, 4 * w, 8 * w};
  for (int stage = 0; stage < 4; ++stage) {
    const std::int64_t stride = stage == 0 ? 1 : 2;
    stages_->push_back(BasicBlock(in_planes, widths[stage], stride));
    stages_->push_back(BasicBlock(widths[stage], widths[stage], 1));
    in_planes = widths[stage];
  }
  register_module("stages", stages_);
  head_ = register_module("head", nn::Linear(in_planes, options.num_classes));
}

torch::Tensor ResNet18Impl::forward(const torch::Tensor& x) {
  auto out = torch::relu(stem_bn_(stem_(x)));
  out = stages_->forward(out);
  out = torch::adaptive_avg_pool2d(out, {1, 1}).flatten(1);
  return head_(out);
}

void TrainSchedule::validate() const {
  if (epochs < 0) throw ValidationError("epochs must be non-negative");
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  if (!(base_lr > 0.0)) throw ValidationError("base learning rate must be positive");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) {
      throw ValidationError("decay epochs must be strictly increasing");
    }
    if (decay_epochs[i] >= epochs) {
      throw ValidationError("decay epoch " + std::to_string(decay_epochs[i]) +
                            " is not below the epoch count " + std::to_string(epochs));
    }
  }
}

double TrainSchedule::lr_at(std::int64_t epoch) const {
  double lr = base_lr;
  for (auto boundary : decay_epochs) {
    if (epoch >= boundary) lr *= decay_factor;
  }
  return lr;
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"epochs", s.epochs},           {"base_lr", s.base_lr},
                     {"decay_epochs", s.decay_epochs}, {"decay_factor", s.decay_factor},
                     {"weight_decay", s.weight_decay}, {"momentum", s.momentum},
                     {"batch_size", s.batch_size}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  j.at("epochs").get_to(s.epochs);
  j.at("base_lr").get_to(s.base_lr);
  j.at("decay_epochs").get_to(s.decay_epochs);
  j.at("decay_factor").get_to(s.decay_factor);
  j.at("weight_decay").get_to(s.weight_decay);
  j.at("momentum").get_to(s.momentum);
  j.at("batch_size").get_to(s.batch_size);
}

void to_json(nlohmann::json& j, const ClassifierMetrics& m) {
  j = nlohmann::json{{"train_loss", m.train_loss},
                     {"train_accuracy", m.train_accuracy},
                     {"test_accuracy", m.test_accuracy},
                     {"epochs_completed", m.epochs_completed}};
}

void from_json(const nlohmann::json& j, ClassifierMetrics& m) {
  j.at("train_loss").get_to(m.train_loss);
  j.at("train_accuracy").get_to(m.train_accuracy);
  j.at("test_accuracy").get_to(m.test_accuracy);
  j.at("epochs_completed").get_to(m.epochs_completed);
}

Classifier::Classifier(const ResNetOptions& options, const ImageShape& input_shape)
    : options_(options),
      input_shape_(input_shape),
      network_(options),
      forward_calls_(std::make_shared<std::atomic<std::int64_t>>(0)) {
  if (options.in_channels != input_shape.channels) {
    throw ValidationError("classifier channel count does not match its input shape");
  }
  network_->eval();
}

void Classifier::check_batch(const torch::Tensor& batch) const {
  if (batch.dim() != 4 || batch.size(1) != input_shape_.channels ||
      batch.size(2) != input_shape_.height || batch.size(3) != input_shape_.width) {
    std::ostringstream msg;
    msg << "classifier expects [N, " << input_shape_.channels << ", " << input_shape_.height
        << ", " << input_shape_.width << "], got " << batch.sizes();
    throw ShapeError(msg.str());
  }
}

torch::Tensor Classifier::logits(const torch::Tensor& batch) const {
  check_batch(batch);
  forward_calls_->fetch_add(1);
  // Module::forward is not const in libtorch; eval-mode inference does not
  // mutate state.
  return const_cast<ResNet18&>(network_)->forward(batch);
}

torch::Tensor Classifier::predict_proba(const torch::Tensor& batch) const {
  torch::NoGradGuard no_grad;
  return torch::softmax(logits(batch), 1);
}

DomainLabel Classifier::predict(const torch::Tensor& image) const {
  if (image.dim() != 3) {
    std::ostringstream msg;
    msg << "predict expects a single [ch, h, w] image, got " << image.sizes();
    throw ShapeError(msg.str());
  }
  const auto probs = predict_proba(image.unsqueeze(0))[0];
  return DomainLabel(argmax_lowest(probs), num_classes());
}

void Classifier::freeze() {
  network_->eval();
  for (auto& p : network_->parameters()) p.set_requires_grad(false);
}

void Classifier::set_training(bool on) { network_->train(on); }

void Classifier::save(const std::filesystem::path& stem) const {
  nlohmann::json manifest{{"architecture", "resnet18-small-stem"},
                          {"options", options_},
                          {"input_shape", input_shape_},
                          {"num_classes", options_.num_classes},
                          {"schedule", schedule},
                          {"metrics", metrics},
                          {"class_names", class_names}};
  save_checkpoint(*network_, stem, std::move(manifest));
}

Classifier Classifier::load(const std::filesystem::path& stem) {
  const auto manifest = read_manifest(stem);
  if (manifest.value("architecture", "") != "resnet18-small-stem") {
    throw FormatError("checkpoint " + stem.string() + " is not a classifier");
  }
  Classifier c(manifest.at("options").get<ResNetOptions>(),
               manifest.at("input_shape").get<ImageShape>());
  load_weights(*c.network_, stem);
  c.schedule = manifest.at("schedule").get<TrainSchedule>();
  c.metrics = manifest.at("metrics").get<ClassifierMetrics>();
  c.class_names = manifest.value("class_names", std::vector<std::string>{});
  c.network_->eval();
  return c;
}

std::int64_t argmax_lowest(const torch::Tensor& row) {
  const auto r = row.detach().to(torch::kFloat64).contiguous();
  const auto* p = r.data_ptr<double>();
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < r.numel(); ++i) {
    if (p[i] > p[best]) best = i;
  }
  return best;
}

torch::Tensor argmax_rows(const torch::Tensor& rows) {
  auto out = torch::empty({rows.size(0)}, torch::kInt64);
  auto* o = out.data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < rows.size(0); ++i) o[i] = argmax_lowest(rows[i]);
  return out;
}

torch::Tensor predict_all(const Classifier& classifier, const torch::Tensor& images,
                          std::int64_t batch_size) {
  std::vector<torch::Tensor> parts;
  for (std::int64_t start = 0; start < images.size(0); start += batch_size) {
    const auto end = std::min(start + batch_size, images.size(0));
    parts.push_back(argmax_rows(classifier.predict_proba(images.slice(0, start, end))));
  }
  if (parts.empty()) return torch::empty({0}, torch::kInt64);
  return torch::cat(parts);
}

double accuracy(const Classifier& classifier, const Dataset& dataset) {
  if (dataset.empty()) return 0.0;
  const auto predicted = predict_all(classifier, dataset.images());
  return predicted.eq(dataset.labels()).sum().item<double>() / static_cast<double>(dataset.size());
}

Classifier train_classifier(const Dataset& train_set, const Dataset& test_set,
                            const TrainSchedule& schedule, std::uint64_t seed,
                            std::int64_t base_width, const EpochCallback& on_epoch) {
  schedule.validate();
  if (train_set.empty()) throw ValidationError("training set is empty");

  torch::manual_seed(seed);
  const auto& desc = train_set.descriptor();
  ResNetOptions options{desc.shape.channels, desc.num_classes, base_width};
  Classifier classifier(options, desc.shape);
  classifier.schedule = schedule;
  classifier.class_names = desc.class_names;
  auto& net = classifier.network();

  torch::optim::SGD optimizer(net->parameters(), torch::optim::SGDOptions(schedule.base_lr)
                                                     .momentum(schedule.momentum)
                                                     .weight_decay(schedule.weight_decay));

  auto order_gen = at::make_generator<at::CPUGeneratorImpl>(seed ^ 0x9e3779b97f4a7c15ull);
  const auto n = train_set.size();
  std::int64_t step = 0;

  for (std::int64_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    for (auto& group : optimizer.param_groups()) {
      static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    }
    net->train();
    const auto perm = torch::randperm(n, order_gen, torch::kInt64);
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < n; start += schedule.batch_size) {
      const auto idx = perm.slice(0, start, std::min(start + schedule.batch_size, n));
      const auto x = train_set.images().index_select(0, idx);
      const auto y = train_set.labels().index_select(0, idx);
      optimizer.zero_grad();
      const auto out = net->forward(x);
      const auto loss = torch::nn::functional::cross_entropy(out, y);
      const double loss_value = loss.item<double>();
      if (!std::isfinite(loss_value)) {
        throw DivergenceError("classifier loss became non-finite", step);
      }
      loss.backward();
      optimizer.step();
      loss_sum += loss_value * static_cast<double>(idx.size(0));
      correct += out.argmax(1).eq(y).sum().item<std::int64_t>();
      ++step;
    }
    net->eval();
    EpochLog log{epoch, lr, loss_sum / static_cast<double>(n),
                 static_cast<double>(correct) / static_cast<double>(n),
                 test_set.empty() ? 0.0 : accuracy(classifier, test_set)};
    classifier.metrics = {log.train_loss, log.train_accuracy, log.test_accuracy, epoch + 1};
    if (on_epoch) on_epoch(log);
  }
  net->eval();
  if (schedule.epochs == 0 && !test_set.empty()) {
    classifier.metrics.test_accuracy = accuracy(classifier, test_set);
  }
  return classifier;
}

}  // namespace frace
