#include "frace/bundle.hpp"

#include <fstream>

#include "frace/checkpoint.hpp"
#include "frace/errors.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace frace {

namespace {

constexpr int kBundleFormatVersion = 1;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConsistencyError("model bundle mismatch: " + what);
}

}  // namespace

void ModelBundle::validate() const {
  require(classifier != nullptr, "no classifier");
  require(!generator.is_empty(), "no generator");
  require(classifier->num_classes() == num_classes,
          "classifier has " + std::to_string(classifier->num_classes()) + " classes, bundle " +
              std::to_string(num_classes));
  require(generator->options().num_classes == num_classes,
          "generator has " + std::to_string(generator->options().num_classes) +
              " classes, bundle " + std::to_string(num_classes));
  require(classifier->input_shape() == input_shape, "classifier input shape differs from bundle");
  require(generator->options().image_channels == input_shape.channels,
          "generator channel count differs from bundle");
  if (!discriminator.is_empty()) {
    const auto& d = discriminator->options();
    require(d.num_classes == num_classes, "discriminator class count differs from bundle");
    require(d.image_channels == input_shape.channels && d.image_height == input_shape.height &&
                d.image_width == input_shape.width,
            "discriminator input shape differs from bundle");
  }
  require(class_names.empty() || static_cast<std::int64_t>(class_names.size()) == num_classes,
          "class name count differs from class count");
  if (sample_images.defined()) {
    require(sample_images.dim() == 4 && sample_images.size(1) == input_shape.channels &&
                sample_images.size(2) == input_shape.height &&
                sample_images.size(3) == input_shape.width,
            "sample images do not match the input shape");
    require(sample_labels.defined() && sample_labels.size(0) == sample_images.size(0),
            "sample label count differs from sample count");
  }
}

void ModelBundle::save(const fs::path& directory) const {
  validate();
  fs::create_directories(directory);
  classifier->save(directory / "classifier");
  save_generator(generator, directory / "generator");
  if (!discriminator.is_empty()) save_discriminator(discriminator, directory / "discriminator");

  torch::serialize::OutputArchive archive;
  archive.write("images", sample_images.defined() ? sample_images : torch::empty({0}));
  archive.write("labels", sample_labels.defined() ? sample_labels : torch::empty({0}, torch::kInt64));
  archive.save_to((directory / "samples.pt").string());

  const nlohmann::json manifest{{"format_version", kBundleFormatVersion},
                                {"dataset", dataset},
                                {"input_shape", input_shape},
                                {"num_classes", num_classes},
                                {"class_names", class_names}};
  std::ofstream out(directory / "bundle.json");
  if (!out) throw FormatError("cannot write bundle manifest in " + directory.string());
  out << manifest.dump(2) << "\n";
}

ModelBundle ModelBundle::load(const fs::path& directory) {
  std::ifstream in(directory / "bundle.json");
  if (!in) throw FormatError("no bundle.json in " + directory.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad bundle manifest: ") + e.what());
  }
  if (manifest.value("format_version", 0) != kBundleFormatVersion) {
    throw FormatError("unsupported bundle format in " + directory.string());
  }

  ModelBundle b;
  b.dataset = manifest.value("dataset", "");
  b.input_shape = manifest.at("input_shape").get<ImageShape>();
  b.num_classes = manifest.at("num_classes").get<std::int64_t>();
  b.class_names = manifest.value("class_names", std::vector<std::string>{});
  b.classifier = std::make_shared<Classifier>(Classifier::load(directory / "classifier"));
  b.classifier->freeze();
  b.generator = load_generator(directory / "generator");
  if (fs::exists(directory / "discriminator.json")) {
    b.discriminator = load_discriminator(directory / "discriminator");
  }
  if (fs::exists(directory / "samples.pt")) {
    torch::serialize::InputArchive archive;
    archive.load_from((directory / "samples.pt").string());
    archive.read("images", b.sample_images);
    archive.read("labels", b.sample_labels);
    if (b.sample_images.numel() == 0) {
      b.sample_images = torch::Tensor();
      b.sample_labels = torch::Tensor();
    }
  }
  b.validate();
  return b;
}

ModelBundle make_bundle(std::shared_ptr<Classifier> classifier, Generator generator,
                        Discriminator discriminator, const Dataset& samples,
                        std::int64_t per_class) {
  const auto& desc = samples.descriptor();
  ModelBundle b;
  b.dataset = desc.name;
  b.input_shape = desc.shape;
  b.num_classes = desc.num_classes;
  b.class_names = desc.class_names;
  b.classifier = std::move(classifier);
  b.generator = std::move(generator);
  b.discriminator = std::move(discriminator);

  std::vector<std::int64_t> taken(static_cast<std::size_t>(desc.num_classes), 0);
  std::vector<std::int64_t> keep;
  const auto* lab = samples.labels().data_ptr<std::int64_t>();
  for (std::int64_t i = 0; i < samples.size(); ++i) {
    if (taken[lab[i]] < per_class) {
      ++taken[lab[i]];
      keep.push_back(i);
    }
  }
  const auto subset = samples.subset(keep);
  b.sample_images = subset.images();
  b.sample_labels = subset.labels();
  b.validate();
  return b;
}

}  // namespace frace
