#include "frace/datasets.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "frace/errors.hpp"

namespace fs = std::filesystem;

namespace frace {

void to_json(nlohmann::json& j, const ImageShape& s) {
  j = nlohmann::json{{"height", s.height}, {"width", s.width}, {"channels", s.channels}};
}

void from_json(const nlohmann::json& j, ImageShape& s) {
  j.at("height").get_to(s.height);
  j.at("width").get_to(s.width);
  j.at("channels").get_to(s.channels);
}

DomainLabel::DomainLabel(std::int64_t index, std::int64_t num_classes)
    : index_(index), num_classes_(num_classes) {
  if (num_classes < 1) {
    throw ValidationError("num_classes must be positive, got " + std::to_string(num_classes));
  }
  if (index < 0 || index >= num_classes) {
    throw ValidationError("class index " + std::to_string(index) + " outside [0, " +
                          std::to_string(num_classes) + ")");
  }
}

torch::Tensor DomainLabel::one_hot() const {
  auto v = torch::zeros({num_classes_});
  v[index_] = 1.0f;
  return v;
}

void DatasetDescriptor::validate() const {
  if (num_classes < 2) {
    throw ValidationError("dataset '" + name + "' needs at least 2 classes, got " +
                          std::to_string(num_classes));
  }
  if (shape.height < 1 || shape.width < 1 || shape.channels < 1) {
    throw ValidationError("dataset '" + name + "' has a non-positive image dimension");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ValidationError("test fraction must lie in (0, 1)");
  }
  if (!class_names.empty() && static_cast<std::int64_t>(class_names.size()) != num_classes) {
    throw ValidationError("class_names has " + std::to_string(class_names.size()) +
                          " entries for " + std::to_string(num_classes) + " classes");
  }
}

void to_json(nlohmann::json& j, const DatasetDescriptor& d) {
  j = nlohmann::json{{"name", d.name},
                     {"image_shape", d.shape},
                     {"num_classes", d.num_classes},
                     {"split_fractions", {{"train", d.train_fraction()}, {"test", d.test_fraction}}},
                     {"class_names", d.class_names}};
}

void from_json(const nlohmann::json& j, DatasetDescriptor& d) {
  j.at("name").get_to(d.name);
  j.at("image_shape").get_to(d.shape);
  j.at("num_classes").get_to(d.num_classes);
  d.test_fraction = j.at("split_fractions").at("test").get<double>();
  d.class_names = j.value("class_names", std::vector<std::string>{});
}

namespace {

std::vector<std::string> numbered_names(std::int64_t count) {
  std::vector<std::string> names;
  for (std::int64_t i = 0; i < count; ++i) names.push_back(std::to_string(i));
  return names;
}

}  // namespace

DatasetDescriptor mnist_descriptor() {
  return {"mnist", {28, 28, 1}, 10, 1.0 / 7.0, numbered_names(10)};
}

DatasetDescriptor letter_descriptor() {
  std::vector<std::string> names;
  for (char c = 'A'; c <= 'Z'; ++c) names.emplace_back(1, c);
  return {"letter", {28, 28, 1}, 26, 0.1, names};
}

Dataset::Dataset(DatasetDescriptor descriptor, torch::Tensor images, torch::Tensor labels)
    : descriptor_(std::move(descriptor)), images_(std::move(images)), labels_(std::move(labels)) {
  const auto& s = descriptor_.shape;
  if (images_.dim() != 4 || images_.size(1) != s.channels || images_.size(2) != s.height ||
      images_.size(3) != s.width) {
    std::ostringstream msg;
    msg << "dataset images have shape " << images_.sizes() << ", descriptor expects [N, "
        << s.channels << ", " << s.height << ", " << s.width << "]";
    throw ShapeError(msg.str());
  }
  if (labels_.dim() != 1 || labels_.size(0) != images_.size(0)) {
    throw ConsistencyError("image and label counts differ");
  }
  if (labels_.numel() > 0) {
    const auto lo = labels_.min().item<std::int64_t>();
    const auto hi = labels_.max().item<std::int64_t>();
    if (lo < 0 || hi >= descriptor_.num_classes) {
      throw ConsistencyError("label outside [0, " + std::to_string(descriptor_.num_classes) + ")");
    }
  }
  images_ = images_.to(torch::kFloat32).contiguous();
  labels_ = labels_.to(torch::kInt64).contiguous();
}

LabeledImage Dataset::at(std::int64_t index) const {
  if (index < 0 || index >= size()) {
    throw ValidationError("sample index " + std::to_string(index) + " out of range");
  }
  return {images_[index], DomainLabel(labels_[index].item<std::int64_t>(), descriptor_.num_classes)};
}

Dataset Dataset::subset(const std::vector<std::int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return Dataset(descriptor_, images_.index_select(0, idx), labels_.index_select(0, idx));
}

Dataset Dataset::head(std::int64_t count) const {
  const auto n = std::min(count, size());
  return Dataset(descriptor_, images_.slice(0, 0, n).clone(), labels_.slice(0, 0, n).clone());
}

float normalize_byte(std::uint8_t value) { return static_cast<float>(value) / 127.5f - 1.0f; }

std::uint8_t denormalize_value(float value) {
  const float scaled = std::round((value + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0f, 255.0f));
}

namespace {

constexpr std::uint8_t kIdxUnsignedByte = 0x08;

struct IdxHeader {
  std::vector<std::int64_t> dims;
};

std::uint32_t read_be32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw FormatError("truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) |
         std::uint32_t{b[3]};
}

IdxHeader read_idx_header(std::istream& in, const fs::path& path, int expected_dims) {
  std::array<unsigned char, 4> magic{};
  in.read(reinterpret_cast<char*>(magic.data()), 4);
  if (!in || magic[0] != 0 || magic[1] != 0 || magic[2] != kIdxUnsignedByte ||
      magic[3] != expected_dims) {
    std::ostringstream msg;
    msg << "bad IDX magic in " << path << ": expected 0x0000080" << expected_dims;
    throw FormatError(msg.str());
  }
  IdxHeader header;
  for (int i = 0; i < expected_dims; ++i) header.dims.push_back(read_be32(in));
  return header;
}

std::vector<std::uint8_t> read_payload(std::istream& in, std::int64_t bytes, const fs::path& path) {
  std::vector<std::uint8_t> data(static_cast<std::size_t>(bytes));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  if (in.gcount() != bytes) {
    throw FormatError("IDX payload truncated in " + path.string());
  }
  return data;
}

std::ifstream open_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return in;
}

}  // namespace

Dataset load_idx_files(const fs::path& images_file, const fs::path& labels_file,
                       const DatasetDescriptor& descriptor, const IdxLayout& layout) {
  descriptor.validate();
  if (descriptor.shape.channels != 1) {
    throw ValidationError("IDX datasets are single-channel");
  }

  auto image_stream = open_binary(images_file);
  const auto image_header = read_idx_header(image_stream, images_file, 3);
  auto label_stream = open_binary(labels_file);
  const auto label_header = read_idx_header(label_stream, labels_file, 1);

  const auto count = image_header.dims[0];
  const auto rows = image_header.dims[1];
  const auto cols = image_header.dims[2];
  if (label_header.dims[0] != count) {
    throw ConsistencyError("IDX image count " + std::to_string(count) + " != label count " +
                           std::to_string(label_header.dims[0]));
  }
  if (rows != descriptor.shape.height || cols != descriptor.shape.width) {
    throw ShapeError("IDX images are " + std::to_string(rows) + "x" + std::to_string(cols) +
                     ", descriptor expects " + std::to_string(descriptor.shape.height) + "x" +
                     std::to_string(descriptor.shape.width));
  }

  const auto pixels = read_payload(image_stream, count * rows * cols, images_file);
  const auto raw_labels = read_payload(label_stream, count, labels_file);

  auto images = torch::empty({count, 1, rows, cols}, torch::kFloat32);
  auto* dst = images.data_ptr<float>();
  for (std::int64_t n = 0; n < count; ++n) {
    const auto* src = pixels.data() + n * rows * cols;
    for (std::int64_t r = 0; r < rows; ++r) {
      for (std::int64_t c = 0; c < cols; ++c) {
        const auto s = layout.transposed ? c * rows + r : r * cols + c;
        dst[(n * rows + r) * cols + c] = normalize_byte(src[s]);
      }
    }
  }

  auto labels = torch::empty({count}, torch::kInt64);
  auto* lab = labels.data_ptr<std::int64_t>();
  for (std::int64_t n = 0; n < count; ++n) {
    const auto value = static_cast<std::int64_t>(raw_labels[n]) - layout.label_offset;
    if (value < 0 || value >= descriptor.num_classes) {
      throw ConsistencyError("label " + std::to_string(raw_labels[n]) + " at record " +
                             std::to_string(n) + " outside the descriptor's class range");
    }
    lab[n] = value;
  }
  return Dataset(descriptor, std::move(images), std::move(labels));
}

namespace {

fs::path find_idx_file(const fs::path& directory, const std::string& subset,
                       const std::string& kind) {
  std::vector<std::string> subsets{subset};
  if (subset == "test") subsets.emplace_back("t10k");
  if (subset == "t10k") subsets.emplace_back("test");
  const std::string dims = kind == "images" ? "idx3" : "idx1";
  if (!fs::is_directory(directory)) {
    throw FormatError("dataset directory " + directory.string() + " does not exist");
  }
  for (const auto& s : subsets) {
    const auto suffix = s + "-" + kind + "-" + dims + "-ubyte";
    std::vector<fs::path> hits;
    for (const auto& entry : fs::directory_iterator(directory)) {
      const auto name = entry.path().filename().string();
      if (name.size() >= suffix.size() &&
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        hits.push_back(entry.path());
      }
    }
    if (!hits.empty()) {
      std::sort(hits.begin(), hits.end());
      return hits.front();
    }
  }
  throw FormatError("no *" + subset + "-" + kind + "-" + dims + "-ubyte file in " +
                    directory.string());
}

}  // namespace

Dataset load_idx_dataset(const fs::path& directory, const DatasetDescriptor& descriptor,
                         const std::string& subset, const IdxLayout& layout) {
  return load_idx_files(find_idx_file(directory, subset, "images"),
                        find_idx_file(directory, subset, "labels"), descriptor, layout);
}

FolderLoadResult load_image_folder(const fs::path& root, const FolderOptions& options) {
  if (!fs::is_directory(root)) {
    throw FormatError("image folder " + root.string() + " does not exist");
  }
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });

  DatasetDescriptor descriptor;
  descriptor.name = root.filename().string();
  descriptor.shape = {options.height, options.width, options.rgb ? 3 : 1};
  descriptor.num_classes = static_cast<std::int64_t>(class_dirs.size());
  descriptor.test_fraction = options.test_fraction;
  for (const auto& dir : class_dirs) descriptor.class_names.push_back(dir.filename().string());
  descriptor.validate();

  std::vector<torch::Tensor> images;
  std::vector<std::int64_t> labels;
  std::vector<fs::path> skipped;
  const int read_flag = options.rgb ? cv::IMREAD_COLOR : cv::IMREAD_GRAYSCALE;

  for (std::size_t cls = 0; cls < class_dirs.size(); ++cls) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[cls])) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    if (files.empty()) {
      throw ConsistencyError("class directory " + class_dirs[cls].string() + " is empty");
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      cv::Mat img = cv::imread(file.string(), read_flag);
      if (img.empty()) {
        skipped.push_back(file);
        continue;
      }
      if (img.rows != options.height || img.cols != options.width) {
        cv::resize(img, img, cv::Size(static_cast<int>(options.width),
                                      static_cast<int>(options.height)), 0, 0, cv::INTER_AREA);
      }
      if (options.rgb) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
      cv::Mat as_float;
      img.convertTo(as_float, CV_32F, 1.0 / 127.5, -1.0);
      auto t = torch::from_blob(as_float.data, {options.height, options.width, descriptor.shape.channels},
                                torch::kFloat32)
                   .permute({2, 0, 1})
                   .clone();
      images.push_back(std::move(t));
      labels.push_back(static_cast<std::int64_t>(cls));
    }
  }
  if (!skipped.empty()) {
    std::cerr << "warning: skipped " << skipped.size() << " unreadable image(s) under " << root
              << "\n";
    for (const auto& p : skipped) std::cerr << "  " << p << "\n";
  }
  if (images.empty()) {
    throw ConsistencyError("no readable images under " + root.string());
  }
  Dataset dataset(descriptor, torch::stack(images), torch::tensor(labels, torch::kInt64));
  return {std::move(dataset), std::move(skipped)};
}

SplitIndices split_indices(std::int64_t count, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ValidationError("test fraction must lie strictly between 0 and 1");
  }
  const auto test_count = static_cast<std::int64_t>(std::llround(count * test_fraction));
  if (test_count == 0 || test_count == count) {
    throw ValidationError("split of " + std::to_string(count) + " examples at fraction " +
                          std::to_string(test_fraction) + " leaves an empty partition");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  SplitIndices out;
  out.test.assign(order.begin(), order.begin() + test_count);
  out.train.assign(order.begin() + test_count, order.end());
  std::sort(out.test.begin(), out.test.end());
  std::sort(out.train.begin(), out.train.end());
  return out;
}

TrainTestSplit split(const Dataset& dataset, double test_fraction, std::uint64_t seed) {
  const auto idx = split_indices(dataset.size(), test_fraction, seed);
  return {dataset.subset(idx.train), dataset.subset(idx.test)};
}

TrainTestSplit load_train_test(const DatasetSource& source) {
  if (source.name == "mnist") {
    const auto d = mnist_descriptor();
    return {load_idx_dataset(source.directory, d, "train"), load_idx_dataset(source.directory, d, "test")};
  }
  if (source.name == "letter") {
    const auto d = letter_descriptor();
    const IdxLayout layout{1, true};
    return {load_idx_dataset(source.directory, d, "train", layout),
            load_idx_dataset(source.directory, d, "test", layout)};
  }
  if (source.name == "folder") {
    auto loaded = load_image_folder(source.directory, source.folder);
    return split(loaded.dataset, source.folder.test_fraction, source.split_seed);
  }
  throw ValidationError("unknown dataset '" + source.name + "' (expected mnist, letter or folder)");
}

void write_descriptor_manifest(const fs::path& path, const DatasetDescriptor& descriptor) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << nlohmann::json(descriptor).dump(2) << "\n";
}

DatasetDescriptor read_descriptor_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    auto d = nlohmann::json::parse(in).get<DatasetDescriptor>();
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace frace
