#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "frace/datasets.hpp"
#include "frace/errors.hpp"
#include "frace/image_io.hpp"
#include "test_support.hpp"

namespace frace {
namespace {

using testing::Gen;
using testing::TempDir;

DatasetDescriptor tiny_descriptor(std::int64_t rows = 3, std::int64_t cols = 2) {
  return {"tiny", {rows, cols, 1}, 10, 0.5, {}};
}

TEST(Normalize, Endpoints) {
  EXPECT_FLOAT_EQ(normalize_byte(0), -1.0f);
  EXPECT_FLOAT_EQ(normalize_byte(255), 1.0f);
}

TEST(Normalize, MidByteByHand) {
  // 128 / 127.5 - 1 = 0.5 / 127.5
  EXPECT_NEAR(normalize_byte(128), 0.5 / 127.5, 1e-7);
  EXPECT_NEAR(normalize_byte(128), 0.0039, 1e-4);
}

TEST(Normalize, RoundTripEveryByte) {
  for (int b = 0; b <= 255; ++b) {
    EXPECT_EQ(denormalize_value(normalize_byte(static_cast<std::uint8_t>(b))), b);
  }
}

TEST(DomainLabel, RangeAndOneHot) {
  EXPECT_THROW(DomainLabel(10, 10), ValidationError);
  EXPECT_THROW(DomainLabel(-1, 10), ValidationError);
  EXPECT_THROW(DomainLabel(0, 0), ValidationError);
  for (std::int64_t i = 0; i < 10; ++i) {
    const auto v = DomainLabel(i, 10).one_hot();
    EXPECT_EQ(v.sum().item<float>(), 1.0f);
    EXPECT_EQ(v[i].item<float>(), 1.0f);
  }
}

TEST(DatasetDescriptor, Validation) {
  auto d = mnist_descriptor();
  EXPECT_NO_THROW(d.validate());
  EXPECT_NEAR(d.train_fraction() + d.test_fraction, 1.0, 1e-12);
  d.num_classes = 1;
  EXPECT_THROW(d.validate(), ValidationError);
  d = mnist_descriptor();
  d.shape.width = 0;
  EXPECT_THROW(d.validate(), ValidationError);
}

TEST(DatasetDescriptor, LetterHasTwentySixClasses) {
  const auto d = letter_descriptor();
  EXPECT_EQ(d.num_classes, 26);
  EXPECT_EQ(d.class_names.front(), "A");
  EXPECT_EQ(d.class_names.back(), "Z");
  EXPECT_DOUBLE_EQ(d.test_fraction, 0.1);
}

TEST(DatasetDescriptor, ManifestRoundTrip) {
  TempDir dir;
  write_descriptor_manifest(dir / "d.json", letter_descriptor());
  const auto back = read_descriptor_manifest(dir / "d.json");
  EXPECT_EQ(back.name, "letter");
  EXPECT_EQ(back.shape, (ImageShape{28, 28, 1}));
  EXPECT_EQ(back.num_classes, 26);
  EXPECT_DOUBLE_EQ(back.test_fraction, 0.1);
  EXPECT_EQ(back.class_names, letter_descriptor().class_names);
}

class IdxFiles : public ::testing::Test {
 protected:
  void write(std::uint32_t count, std::uint32_t labels_count, std::uint32_t image_magic = 0x803,
             std::uint32_t label_magic = 0x801) {
    pixels_.resize(count * 6);
    for (std::size_t i = 0; i < pixels_.size(); ++i) pixels_[i] = static_cast<std::uint8_t>(i * 37);
    std::vector<std::uint8_t> labels(labels_count);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
    testing::write_idx_images(dir_ / "train-images-idx3-ubyte", pixels_, count, 3, 2, image_magic);
    testing::write_idx_labels(dir_ / "train-labels-idx1-ubyte", labels, label_magic);
  }

  TempDir dir_;
  std::vector<std::uint8_t> pixels_;
};

TEST_F(IdxFiles, LoadsAndNormalizes) {
  write(12, 12);
  const auto ds = load_idx_dataset(dir_.path(), tiny_descriptor(), "train");
  ASSERT_EQ(ds.size(), 12);
  EXPECT_EQ(ds.images().sizes(), (std::vector<std::int64_t>{12, 1, 3, 2}));
  const auto flat = ds.images().flatten();
  for (std::int64_t i = 0; i < flat.numel(); ++i) {
    EXPECT_FLOAT_EQ(flat[i].item<float>(), normalize_byte(pixels_[i]));
  }
  EXPECT_EQ(ds.at(11).label.index(), 1);
}

TEST_F(IdxFiles, BadMagicIsFormatError) {
  write(4, 4, 0x804);
  EXPECT_THROW(load_idx_dataset(dir_.path(), tiny_descriptor(), "train"), FormatError);
}

TEST_F(IdxFiles, CountMismatchIsConsistencyError) {
  write(4, 5);
  EXPECT_THROW(load_idx_dataset(dir_.path(), tiny_descriptor(), "train"), ConsistencyError);
}

TEST_F(IdxFiles, DimensionMismatchIsShapeError) {
  write(4, 4);
  EXPECT_THROW(load_idx_dataset(dir_.path(), tiny_descriptor(2, 3), "train"), ShapeError);
}

TEST_F(IdxFiles, TransposedLayoutAndLabelOffset) {
  write(2, 2);
  const auto plain = load_idx_dataset(dir_.path(), tiny_descriptor(), "train");
  // Column-major storage: element (r, c) is byte c * rows + r.
  const auto t = load_idx_dataset(dir_.path(), tiny_descriptor(), "train", {0, true});
  EXPECT_TRUE(torch::equal(t.images()[0][0], plain.images()[0][0].reshape({2, 3}).t()));
  std::vector<std::uint8_t> labels{1, 26};
  testing::write_idx_labels(dir_ / "train-labels-idx1-ubyte", labels);
  auto d = letter_descriptor();
  d.shape = {3, 2, 1};
  const auto letters = load_idx_dataset(dir_.path(), d, "train", {1, false});
  EXPECT_EQ(letters.at(0).label.index(), 0);
  EXPECT_EQ(letters.at(1).label.index(), 25);
}

TEST(IdxMnist, FullTrainingSetWhenAvailable) {
  const auto dir = std::filesystem::path(FRACE_MNIST_DIR);
  if (!std::filesystem::exists(dir / "train-labels-idx1-ubyte")) GTEST_SKIP() << "no MNIST files";
  const auto ds = load_idx_dataset(dir, mnist_descriptor(), "train");
  EXPECT_EQ(ds.size(), 60000);
  EXPECT_EQ(ds.descriptor().num_classes, 10);
  EXPECT_EQ(ds.images().sizes(), (std::vector<std::int64_t>{60000, 1, 28, 28}));

  // Range invariant on random samples.
  Gen gen(3);
  for (int k = 0; k < 200; ++k) {
    const auto img = ds.at(gen.integer(0, ds.size() - 1)).pixels;
    EXPECT_GE(img.min().item<float>(), -1.0f);
    EXPECT_LE(img.max().item<float>(), 1.0f);
  }
}

void write_gray(const std::filesystem::path& path, std::int64_t h, std::int64_t w, std::uint8_t v) {
  write_png(path, RgbImage(h, w, v));
}

TEST(ImageFolder, LexicographicClassOrder) {
  TempDir dir;
  for (const char* cls : {"b", "a"}) {
    std::filesystem::create_directories(dir / cls);
    write_gray(dir / cls / "0.png", 8, 8, cls[0] == 'a' ? 0 : 255);
  }
  const auto r = load_image_folder(dir.path(), {4, 4, false, 0.5});
  EXPECT_EQ(r.dataset.descriptor().class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(r.dataset.descriptor().num_classes, 2);
  EXPECT_EQ(r.dataset.images().sizes(), (std::vector<std::int64_t>{2, 1, 4, 4}));
  // "a" holds the black image and gets index 0.
  EXPECT_EQ(r.dataset.labels()[0].item<std::int64_t>(), 0);
  EXPECT_FLOAT_EQ(r.dataset.images()[0].max().item<float>(), -1.0f);
}

TEST(ImageFolder, TenClassesGiveCTen) {
  TempDir dir;
  for (int c = 0; c < 10; ++c) {
    const auto cls = dir / ("class" + std::to_string(c));
    std::filesystem::create_directories(cls);
    for (int i = 0; i < 3; ++i) write_gray(cls / (std::to_string(i) + ".png"), 6, 6, 40 * i);
  }
  const auto r = load_image_folder(dir.path(), {6, 6, true, 0.1});
  EXPECT_EQ(r.dataset.descriptor().num_classes, 10);
  EXPECT_EQ(r.dataset.size(), 30);
  EXPECT_EQ(r.dataset.descriptor().shape.channels, 3);
}

TEST(ImageFolder, SingleClassRejected) {
  TempDir dir;
  std::filesystem::create_directories(dir / "only");
  write_gray(dir / "only" / "0.png", 4, 4, 10);
  EXPECT_THROW(load_image_folder(dir.path()), ValidationError);
}

TEST(ImageFolder, EmptyClassNamesTheDirectory) {
  TempDir dir;
  std::filesystem::create_directories(dir / "a");
  std::filesystem::create_directories(dir / "empty_one");
  write_gray(dir / "a" / "0.png", 4, 4, 10);
  try {
    load_image_folder(dir.path());
    FAIL() << "expected ConsistencyError";
  } catch (const ConsistencyError& e) {
    EXPECT_NE(std::string(e.what()).find("empty_one"), std::string::npos);
  }
}

TEST(ImageFolder, UnreadableFilesSkipped) {
  TempDir dir;
  for (const char* cls : {"a", "b"}) {
    std::filesystem::create_directories(dir / cls);
    write_gray(dir / cls / "ok.png", 4, 4, 10);
  }
  std::ofstream(dir / "a" / "junk.png") << "not an image";
  const auto r = load_image_folder(dir.path(), {4, 4, false, 0.5});
  EXPECT_EQ(r.dataset.size(), 2);
  ASSERT_EQ(r.skipped.size(), 1u);
  EXPECT_EQ(r.skipped[0].filename(), "junk.png");
}

TEST(Split, ThousandAtOneTenth) {
  const auto a = split_indices(1000, 0.1, 7);
  const auto b = split_indices(1000, 0.1, 7);
  EXPECT_EQ(a.train.size(), 900u);
  EXPECT_EQ(a.test.size(), 100u);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
}

TEST(Split, DegenerateFractionRejected) {
  EXPECT_THROW(split_indices(10, 0.0, 1), ValidationError);
  EXPECT_THROW(split_indices(10, 1.0, 1), ValidationError);
  EXPECT_THROW(split_indices(10, -0.2, 1), ValidationError);
  EXPECT_THROW(split_indices(1, 0.5, 1), ValidationError);
}

TEST(SplitProperty, DisjointExhaustiveDeterministic) {
  Gen gen(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = gen.integer(2, 400);
    const auto frac = gen.real(0.05, 0.95);
    const auto seed = gen.seed();
    SplitIndices s;
    try {
      s = split_indices(n, frac, seed);
    } catch (const ValidationError&) {
      continue;  // rounding left one side empty
    }
    std::set<std::int64_t> train(s.train.begin(), s.train.end());
    std::set<std::int64_t> test(s.test.begin(), s.test.end());
    std::vector<std::int64_t> both;
    std::set_intersection(train.begin(), train.end(), test.begin(), test.end(),
                          std::back_inserter(both));
    EXPECT_TRUE(both.empty());
    EXPECT_EQ(static_cast<std::int64_t>(train.size() + test.size()), n);
    EXPECT_EQ(*train.begin() >= 0 && *train.rbegin() < n, true);
    const auto again = split_indices(n, frac, seed);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
  }
}

TEST(Split, DatasetSplitFollowsIndices) {
  auto images = torch::arange(20, torch::kFloat32).reshape({20, 1, 1, 1});
  auto labels = torch::arange(20, torch::kInt64) % 2;
  const Dataset ds({"toy", {1, 1, 1}, 2, 0.25, {}}, images, labels);
  const auto parts = split(ds, 0.25, 5);
  const auto idx = split_indices(20, 0.25, 5);
  ASSERT_EQ(parts.test.size(), static_cast<std::int64_t>(idx.test.size()));
  for (std::size_t i = 0; i < idx.test.size(); ++i) {
    EXPECT_EQ(parts.test.images()[i].item<float>(), static_cast<float>(idx.test[i]));
  }
}

TEST(Dataset, RejectsMismatchedInputs) {
  EXPECT_THROW(Dataset(tiny_descriptor(), torch::zeros({2, 1, 3, 3}), torch::zeros({2}, torch::kInt64)),
               ShapeError);
  EXPECT_THROW(Dataset(tiny_descriptor(), torch::zeros({2, 1, 3, 2}), torch::zeros({3}, torch::kInt64)),
               ConsistencyError);
  EXPECT_THROW(Dataset(tiny_descriptor(), torch::zeros({1, 1, 3, 2}), torch::full({1}, 10, torch::kInt64)),
               ConsistencyError);
}

}  // namespace
}  // namespace frace
