#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace frace {

struct ImageShape {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t channels = 0;

  std::int64_t numel() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

void to_json(nlohmann::json& j, const ImageShape& s);
void from_json(const nlohmann::json& j, ImageShape& s);

/// Class index in [0, num_classes). Construction validates the range.
class DomainLabel {
 public:
  DomainLabel(std::int64_t index, std::int64_t num_classes);

  std::int64_t index() const { return index_; }
  std::int64_t num_classes() const { return num_classes_; }

  /// Float vector of length num_classes with a single 1 at index().
  torch::Tensor one_hot() const;

  bool operator==(const DomainLabel&) const = default;

 private:
  std::int64_t index_;
  std::int64_t num_classes_;
};

struct DatasetDescriptor {
  std::string name;
  ImageShape shape;
  std::int64_t num_classes = 0;
  double test_fraction = 0.1;
  std::vector<std::string> class_names;

  /// Throws ValidationError when C < 2, a dimension is < 1 or the
  /// test fraction is outside (0, 1).
  void validate() const;
  double train_fraction() const { return 1.0 - test_fraction; }
};

void to_json(nlohmann::json& j, const DatasetDescriptor& d);
void from_json(const nlohmann::json& j, DatasetDescriptor& d);

DatasetDescriptor mnist_descriptor();
/// EMNIST Letters with upper and lower case merged into 26 classes.
DatasetDescriptor letter_descriptor();

struct LabeledImage {
  torch::Tensor pixels;  // [channels, height, width], values in [-1, 1]
  DomainLabel label;
};

/// Immutable in-memory dataset. Images are stored as one contiguous
/// [N, C, H, W] float tensor; labels as [N] int64.
class Dataset {
 public:
  Dataset(DatasetDescriptor descriptor, torch::Tensor images, torch::Tensor labels);

  const DatasetDescriptor& descriptor() const { return descriptor_; }
  const torch::Tensor& images() const { return images_; }
  const torch::Tensor& labels() const { return labels_; }
  std::int64_t size() const { return labels_.size(0); }
  bool empty() const { return size() == 0; }

  LabeledImage at(std::int64_t index) const;
  Dataset subset(const std::vector<std::int64_t>& indices) const;
  /// First `count` examples (or all of them if fewer).
  Dataset head(std::int64_t count) const;

 private:
  DatasetDescriptor descriptor_;
  torch::Tensor images_;
  torch::Tensor labels_;
};

float normalize_byte(std::uint8_t value);
std::uint8_t denormalize_value(float value);

/// Layout quirks of IDX corpora beyond the MNIST convention.
struct IdxLayout {
  std::int64_t label_offset = 0;  // subtracted from every stored label
  bool transposed = false;        // EMNIST stores images column-major
};

Dataset load_idx_files(const std::filesystem::path& images_file,
                       const std::filesystem::path& labels_file,
                       const DatasetDescriptor& descriptor, const IdxLayout& layout = {});

/// Loads `<prefix>{subset}-images-idx3-ubyte` and the matching labels file
/// from `directory`. `subset` is "train" or "t10k"/"test".
Dataset load_idx_dataset(const std::filesystem::path& directory,
                         const DatasetDescriptor& descriptor,
                         const std::string& subset = "train", const IdxLayout& layout = {});

struct FolderOptions {
  std::int64_t height = 28;
  std::int64_t width = 28;
  bool rgb = false;
  double test_fraction = 0.1;
};

struct FolderLoadResult {
  Dataset dataset;
  std::vector<std::filesystem::path> skipped;
};

/// `root/<class_name>/<file>` layout. Classes are indexed in lexicographic
/// order of their directory names.
FolderLoadResult load_image_folder(const std::filesystem::path& root,
                                   const FolderOptions& options = {});

struct SplitIndices {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> test;
};

SplitIndices split_indices(std::int64_t count, double test_fraction, std::uint64_t seed);

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

TrainTestSplit split(const Dataset& dataset, double test_fraction, std::uint64_t seed);

/// Where a named dataset lives. "mnist" and "letter" read IDX train/test
/// files; "folder" reads an image folder and splits it with split_seed.
struct DatasetSource {
  std::string name = "mnist";
  std::filesystem::path directory;
  FolderOptions folder;
  std::uint64_t split_seed = 0;
};

TrainTestSplit load_train_test(const DatasetSource& source);

void write_descriptor_manifest(const std::filesystem::path& path,
                               const DatasetDescriptor& descriptor);
DatasetDescriptor read_descriptor_manifest(const std::filesystem::path& path);

}  // namespace frace
