#include <cmath>

#include <gtest/gtest.h>

#include "frace/errors.hpp"
#include "frace/explainer.hpp"
#include "frace/image_io.hpp"
#include "test_support.hpp"

namespace frace {
namespace {

using testing::Gen;

struct Models {
  Classifier h = testing::tiny_classifier();
  Generator g{testing::tiny_generator_options()};
  Models() { g->eval(); }
};

TEST(Explain, ZeroGeneratorIsIdentity) {
  Models m;
  m.g->zero_output_layer();
  const auto x = testing::random_images(1)[0];
  const auto e = explain(m.g, m.h, x, 3);
  EXPECT_TRUE(torch::equal(e.counterfactual_image, x));
  EXPECT_TRUE(torch::equal(e.probs_after, e.probs_before));
  EXPECT_EQ(e.counter_class.index(), 3);
  EXPECT_EQ(e.iterations, 0);
  EXPECT_EQ(e.predicted_class.index(), argmax_lowest(e.probs_before));
}

TEST(Explain, DeterministicAndResidual) {
  Models m;
  const auto x = testing::random_images(1, {28, 28, 1}, 5)[0];
  const auto a = explain(m.g, m.h, x, 7);
  const auto b = explain(m.g, m.h, x, 7);
  EXPECT_TRUE(torch::equal(a.perturbation, b.perturbation));
  EXPECT_TRUE(torch::equal(a.probs_after, b.probs_after));
  EXPECT_TRUE(torch::equal(a.counterfactual_image, torch::clamp(x + a.perturbation, -1, 1)));
  EXPECT_LE(a.counterfactual_image.abs().max().item<float>(), 1.0f);
}

TEST(Explain, OneGeneratorAndTwoClassifierPasses) {
  Models m;
  const auto g0 = m.g->forward_calls();
  const auto h0 = m.h.forward_calls();
  explain(m.g, m.h, testing::random_images(1)[0], 1);
  EXPECT_EQ(m.g->forward_calls() - g0, 1);
  EXPECT_EQ(m.h.forward_calls() - h0, 2);

  const auto batch = explain_batch(m.g, m.h, testing::random_images(6),
                                   torch::arange(6, torch::kInt64));
  EXPECT_EQ(m.g->forward_calls() - g0, 2);
  EXPECT_EQ(m.h.forward_calls() - h0, 4);
  EXPECT_EQ(batch.probs_after.sizes(), (std::vector<std::int64_t>{6, 10}));
}

TEST(Explain, InvalidClassRunsNothing) {
  Models m;
  const auto g0 = m.g->forward_calls();
  const auto h0 = m.h.forward_calls();
  const auto x = testing::random_images(1)[0];
  EXPECT_THROW(explain(m.g, m.h, x, 10), ValidationError);
  EXPECT_THROW(explain(m.g, m.h, x, -1), ValidationError);
  EXPECT_THROW(explain(m.g, m.h, torch::zeros({1, 32, 32}), 1), ShapeError);
  EXPECT_EQ(m.g->forward_calls(), g0);
  EXPECT_EQ(m.h.forward_calls(), h0);
}

TEST(Explain, LabeledQueryKeepsGroundTruth) {
  Models m;
  const LabeledImage q{testing::random_images(1)[0], DomainLabel(4, 10)};
  const auto e = explain(m.g, m.h, q, 2);
  ASSERT_TRUE(e.ground_truth.has_value());
  EXPECT_EQ(e.ground_truth->index(), 4);
}

TEST(Overlay, ZeroPerturbationIsTheQuery) {
  const auto x = testing::random_images(1, {6, 5, 1}, 2)[0];
  EXPECT_EQ(render_overlay(x, torch::zeros_like(x), OverlaySpec{}), to_rgb(x));
}

TEST(Overlay, UniformPositiveIsAllBlue) {
  const auto x = torch::full({1, 4, 4}, -1.0f);
  const auto img = render_overlay(x, torch::full_like(x, 0.5f), OverlaySpec{});
  for (std::int64_t i = 0; i < 16; ++i) {
    const auto* px = &img.data[i * 3];
    // Black blended 60% toward (0, 0, 255).
    EXPECT_EQ(px[0], 0);
    EXPECT_EQ(px[1], 0);
    EXPECT_EQ(px[2], 153);
  }
}

TEST(Overlay, MarksPartitionPixelsProperty) {
  Gen gen(17);
  for (int trial = 0; trial < 30; ++trial) {
    const auto ch = gen.integer(0, 1) ? 3 : 1;
    const auto h = gen.integer(1, 9), w = gen.integer(1, 9);
    const auto t = gen.real(0.0, 0.5);
    const auto delta = gen.uniform({ch, h, w}, -2, 2).to(torch::kFloat32);
    const auto marks = classify_marks(delta, t);
    ASSERT_EQ(static_cast<std::int64_t>(marks.size()), h * w);

    const auto mean = delta.to(torch::kFloat64).mean(0).contiguous();
    std::int64_t adds = 0, erases = 0, none = 0;
    for (std::int64_t i = 0; i < h * w; ++i) {
      const double v = mean.data_ptr<double>()[i];
      const auto want = v > t ? Mark::kAdd : (v < -t ? Mark::kErase : Mark::kNone);
      EXPECT_EQ(marks[i], want);
      adds += marks[i] == Mark::kAdd;
      erases += marks[i] == Mark::kErase;
      none += marks[i] == Mark::kNone;
    }
    EXPECT_EQ(adds + erases + none, h * w);
    EXPECT_EQ(adds, (mean > t).sum().item<std::int64_t>());
    EXPECT_EQ(erases, (mean < -t).sum().item<std::int64_t>());

    // Unmarked pixels render exactly as the query.
    const auto x = gen.uniform({ch, h, w}, -1, 1).to(torch::kFloat32);
    const auto overlay = render_overlay(x, delta, OverlaySpec{t});
    const auto plain = to_rgb(x);
    for (std::int64_t i = 0; i < h * w; ++i) {
      if (marks[i] != Mark::kNone) continue;
      for (int k = 0; k < 3; ++k) EXPECT_EQ(overlay.data[i * 3 + k], plain.data[i * 3 + k]);
    }
  }
}

TEST(Overlay, SpecValidation) {
  EXPECT_THROW((OverlaySpec{-0.1}.validate()), ValidationError);
  OverlaySpec s;
  s.alpha = 0.0;
  EXPECT_THROW(s.validate(), ValidationError);
  const auto x = torch::zeros({1, 3, 3});
  EXPECT_THROW(render_overlay(x, torch::zeros({1, 3, 4}), OverlaySpec{}), ShapeError);
}

std::vector<LabeledImage> one_per_class(std::int64_t classes, ImageShape s) {
  const auto images = testing::random_images(classes, s, 3);
  std::vector<LabeledImage> out;
  for (std::int64_t c = 0; c < classes; ++c) out.push_back({images[c], DomainLabel(c, classes)});
  return out;
}

TEST(Grid, TenByTenLayout) {
  Models m;
  const auto samples = one_per_class(10, {28, 28, 1});
  const auto g0 = m.g->forward_calls();
  const auto grid = explanation_grid(m.g, m.h, samples, OverlaySpec{}, 1);
  EXPECT_EQ(grid.combinations, 100);
  EXPECT_EQ(m.g->forward_calls() - g0, 1);
  EXPECT_EQ(grid.image.height, 2 + 10 * (28 + 2));
  EXPECT_EQ(grid.image.width, 2 + 10 * (2 * 28 + 2 + 2));

  // Cell (i, j): the query tile, then its overlay toward j.
  const auto& L = grid.layout;
  for (std::int64_t i : {0, 4, 9}) {
    const auto query = to_rgb(samples[i].pixels);
    for (std::int64_t j : {0, 7, 9}) {
      EXPECT_EQ(grid.image.crop(L.cell_row(i), L.cell_col(j), 28, 28), query);
      const auto e = explain(m.g, m.h, samples[i].pixels, j);
      EXPECT_EQ(grid.image.crop(L.cell_row(i), L.overlay_col(j), 28, 28),
                render_overlay(e, OverlaySpec{}));
    }
  }
}

TEST(Grid, SixClassesScaled) {
  const ImageShape s{8, 8, 3};
  const auto h = testing::tiny_classifier(6, s);
  Generator g(testing::tiny_generator_options(6, 3));
  g->eval();
  const auto grid = explanation_grid(g, h, one_per_class(6, s), OverlaySpec{}, 2);
  EXPECT_EQ(grid.combinations, 36);
  EXPECT_EQ(grid.layout.tile_height, 16);
  EXPECT_EQ(grid.image.width, 2 + 6 * (2 * 16 + 2 + 2));
}

TEST(Grid, MissingOrDuplicateClass) {
  Models m;
  auto samples = one_per_class(10, {28, 28, 1});
  samples.erase(samples.begin() + 6);
  try {
    explanation_grid(m.g, m.h, samples, OverlaySpec{});
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find('6'), std::string::npos) << e.what();
  }
  samples.push_back(samples[0]);
  EXPECT_THROW(explanation_grid(m.g, m.h, samples, OverlaySpec{}), ValidationError);
}

TEST(ImageIo, PngAndBase64RoundTrip) {
  Gen gen(4);
  RgbImage img(5, 7);
  for (auto& b : img.data) b = static_cast<std::uint8_t>(gen.integer(0, 255));
  const auto png = encode_png(img);
  EXPECT_EQ(png.substr(1, 3), "PNG");
  EXPECT_EQ(decode_png_rgb(png), img);
  EXPECT_EQ(base64_decode(base64_encode(png)), png);
  for (const std::string s : {"", "f", "fo", "foo", "foob"}) EXPECT_EQ(base64_decode(base64_encode(s)), s);
  EXPECT_EQ(base64_encode("foob"), "Zm9vYg==");
  EXPECT_THROW(base64_decode("!!!!"), FormatError);
  EXPECT_THROW(decode_png_rgb("not an image"), FormatError);
}

TEST(ImageIo, DecodeImageMatchesQuery) {
  const auto x = testing::random_images(1, {6, 6, 1}, 9)[0];
  const auto back = decode_image(encode_png(to_rgb(x)), 1, 6, 6);
  EXPECT_LE((back - x).abs().max().item<float>(), 1.0f / 127.5f + 1e-6f);
}

TEST(Explain, LatencyIsStable) {
  Models m;
  const auto x = testing::random_images(1)[0];
  for (int i = 0; i < 3; ++i) explain(m.g, m.h, x, 1);
  std::vector<double> ms;
  for (int i = 0; i < 20; ++i) ms.push_back(explain(m.g, m.h, x, 1).latency_ms);
  double mean = 0, var = 0;
  for (double v : ms) mean += v / ms.size();
  for (double v : ms) var += (v - mean) * (v - mean) / (ms.size() - 1);
  EXPECT_GT(mean, 0.0);
  // Loose: a shared single core can be noisy.
  EXPECT_LT(std::sqrt(var) / mean, 1.0);
}

}  // namespace
}  // namespace frace
