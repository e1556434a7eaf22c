#include "frace/models.hpp"

#include <sstream>

#include "frace/checkpoint.hpp"
#include "frace/errors.hpp"

namespace nn = torch::nn;

namespace frace {

void to_json(nlohmann::json& j, const GeneratorOptions& o) {
  j = nlohmann::json{{"image_channels", o.image_channels}, {"num_classes", o.num_classes},
                     {"base_width", o.base_width},         {"downsampling", o.downsampling},
                     {"residual_blocks", o.residual_blocks}, {"output_scale", o.output_scale}};
}

void from_json(const nlohmann::json& j, GeneratorOptions& o) {
  j.at("image_channels").get_to(o.image_channels);
  j.at("num_classes").get_to(o.num_classes);
  j.at("base_width").get_to(o.base_width);
  j.at("downsampling").get_to(o.downsampling);
  j.at("residual_blocks").get_to(o.residual_blocks);
  j.at("output_scale").get_to(o.output_scale);
}

void to_json(nlohmann::json& j, const DiscriminatorOptions& o) {
  j = nlohmann::json{{"image_channels", o.image_channels}, {"num_classes", o.num_classes},
                     {"image_height", o.image_height},     {"image_width", o.image_width},
                     {"base_width", o.base_width},         {"downsampling", o.downsampling}};
}

void from_json(const nlohmann::json& j, DiscriminatorOptions& o) {
  j.at("image_channels").get_to(o.image_channels);
  j.at("num_classes").get_to(o.num_classes);
  j.at("image_height").get_to(o.image_height);
  j.at("image_width").get_to(o.image_width);
  j.at("base_width").get_to(o.base_width);
  j.at("downsampling").get_to(o.downsampling);
}

namespace {

void check_labels(const torch::Tensor& labels, std::int64_t num_classes) {
  if (labels.dim() != 1) throw ShapeError("labels must be a 1-D tensor");
  if (labels.numel() == 0) return;
  const auto lo = labels.min().item<std::int64_t>();
  const auto hi = labels.max().item<std::int64_t>();
  if (lo < 0 || hi >= num_classes) {
    throw ValidationError("target label outside [0, " + std::to_string(num_classes) + ")");
  }
}

nn::InstanceNorm2d instance_norm(std::int64_t channels) {
  return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels).affine(true).track_running_stats(false));
}

}  // namespace

torch::Tensor condition_labels(const torch::Tensor& labels, std::int64_t num_classes,
                               std::int64_t height, std::int64_t width) {
  check_labels(labels, num_classes);
  auto one_hot = torch::one_hot(labels.to(torch::kInt64), num_classes).to(torch::kFloat32);
  return one_hot.view({labels.size(0), num_classes, 1, 1}).expand({-1, -1, height, width});
}

ResidualBlockImpl::ResidualBlockImpl(std::int64_t channels) {
  body_ = nn::Sequential(
      nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)),
      instance_norm(channels), nn::ReLU(),
      nn::Conv2d(nn::Conv2dOptions(channels, channels, 3).padding(1).bias(false)),
      instance_norm(channels));
  register_module("body", body_);
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) { return x + body_->forward(x); }

GeneratorImpl::GeneratorImpl(const GeneratorOptions& options) : options_(options) {
  if (options.num_classes < 2 || options.image_channels < 1 || options.base_width < 1) {
    throw ValidationError("invalid generator options");
  }
  body_ = nn::Sequential();
  auto width = options.base_width;
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(input_channels(), width, 7).padding(3).bias(false)));
  body_->push_back(instance_norm(width));
  body_->push_back(nn::ReLU());
  for (std::int64_t i = 0; i < options.downsampling; ++i) {
    body_->push_back(
        nn::Conv2d(nn::Conv2dOptions(width, width * 2, 4).stride(2).padding(1).bias(false)));
    body_->push_back(instance_norm(width * 2));
    body_->push_back(nn::ReLU());
    width *= 2;
  }
  for (std::int64_t i = 0; i < options.residual_blocks; ++i) {
    body_->push_back(ResidualBlock(width));
  }
  for (std::int64_t i = 0; i < options.downsampling; ++i) {
    body_->push_back(nn::ConvTranspose2d(
        nn::ConvTranspose2dOptions(width, width / 2, 4).stride(2).padding(1).bias(false)));
    body_->push_back(instance_norm(width / 2));
    body_->push_back(nn::ReLU());
    width /= 2;
  }
  register_module("body", body_);
  output_ = register_module(
      "output", nn::Conv2d(nn::Conv2dOptions(width, options.image_channels, 7).padding(3).bias(true)));
}

torch::Tensor GeneratorImpl::forward(const torch::Tensor& images, const torch::Tensor& target_labels) {
  forward_calls_.fetch_add(1);
  const auto planes =
      condition_labels(target_labels, options_.num_classes, images.size(2), images.size(3))
          .to(images.dtype());
  auto h = body_->forward(torch::cat({images, planes}, 1));
  return options_.output_scale * torch::tanh(output_(h));
}

void GeneratorImpl::zero_output_layer() {
  torch::NoGradGuard no_grad;
  output_->weight.zero_();
  output_->bias.zero_();
}

DiscriminatorImpl::DiscriminatorImpl(const DiscriminatorOptions& options) : options_(options) {
  if (options.num_classes < 2 || options.downsampling < 1) {
    throw ValidationError("invalid discriminator options");
  }
  trunk_ = nn::Sequential();
  auto channels = options.image_channels;
  auto width = options.base_width;
  auto h = options.image_height;
  auto w = options.image_width;
  for (std::int64_t i = 0; i < options.downsampling; ++i) {
    trunk_->push_back(nn::Conv2d(nn::Conv2dOptions(channels, width, 4).stride(2).padding(1)));
    trunk_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.01)));
    channels = width;
    width *= 2;
    h = (h + 2 - 4) / 2 + 1;
    w = (w + 2 - 4) / 2 + 1;
    if (h < 1 || w < 1) throw ValidationError("discriminator downsamples the image below 1x1");
  }
  register_module("trunk", trunk_);
  real_head_ = register_module(
      "real_head", nn::Conv2d(nn::Conv2dOptions(channels, 1, {h, w}).bias(false)));
  domain_head_ = register_module(
      "domain_head", nn::Conv2d(nn::Conv2dOptions(channels, options.num_classes, {h, w}).bias(false)));
}

DiscriminatorOutput DiscriminatorImpl::forward(const torch::Tensor& images) {
  const auto features = trunk_->forward(images);
  return {real_head_(features).flatten(), domain_head_(features).flatten(1)};
}

torch::Tensor generate_perturbation(Generator& generator, const torch::Tensor& images,
                                    const torch::Tensor& target_labels) {
  const auto& o = generator->options();
  if (images.dim() != 4 || images.size(1) != o.image_channels) {
    std::ostringstream msg;
    msg << "generator expects [N, " << o.image_channels << ", h, w], got " << images.sizes();
    throw ShapeError(msg.str());
  }
  if (target_labels.dim() != 1 || target_labels.size(0) != images.size(0)) {
    throw ShapeError("one target label per image is required");
  }
  check_labels(target_labels, o.num_classes);
  return generator->forward(images, target_labels);
}

Discrimination discriminate(Discriminator& discriminator, const torch::Tensor& images) {
  const auto& o = discriminator->options();
  if (images.dim() != 4 || images.size(1) != o.image_channels || images.size(2) != o.image_height ||
      images.size(3) != o.image_width) {
    std::ostringstream msg;
    msg << "discriminator expects [N, " << o.image_channels << ", " << o.image_height << ", "
        << o.image_width << "], got " << images.sizes();
    throw ShapeError(msg.str());
  }
  const auto out = discriminator->forward(images);
  return {torch::sigmoid(out.real_logits), torch::softmax(out.domain_logits, 1)};
}

void save_generator(const Generator& generator, const std::filesystem::path& stem,
                    const nlohmann::json& extra) {
  nlohmann::json manifest = extra;
  manifest["architecture"] = "residual-generator";
  manifest["options"] = generator->options();
  manifest["num_classes"] = generator->options().num_classes;
  save_checkpoint(*generator, stem, std::move(manifest));
}

Generator load_generator(const std::filesystem::path& stem) {
  const auto manifest = read_manifest(stem);
  if (manifest.value("architecture", "") != "residual-generator") {
    throw FormatError("checkpoint " + stem.string() + " is not a generator");
  }
  Generator g(manifest.at("options").get<GeneratorOptions>());
  load_weights(*g, stem);
  g->eval();
  return g;
}

void save_discriminator(const Discriminator& discriminator, const std::filesystem::path& stem,
                        const nlohmann::json& extra) {
  nlohmann::json manifest = extra;
  manifest["architecture"] = "aux-discriminator";
  manifest["options"] = discriminator->options();
  manifest["num_classes"] = discriminator->options().num_classes;
  save_checkpoint(*discriminator, stem, std::move(manifest));
}

Discriminator load_discriminator(const std::filesystem::path& stem) {
  const auto manifest = read_manifest(stem);
  if (manifest.value("architecture", "") != "aux-discriminator") {
    throw FormatError("checkpoint " + stem.string() + " is not a discriminator");
  }
  Discriminator d(manifest.at("options").get<DiscriminatorOptions>());
  load_weights(*d, stem);
  d->eval();
  return d;
}

}  // namespace frace
