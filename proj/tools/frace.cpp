#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "frace/bundle.hpp"
#include "frace/classifier.hpp"
#include "frace/datasets.hpp"
#include "frace/errors.hpp"
#include "frace/evaluation.hpp"
#include "frace/explainer.hpp"
#include "frace/image_io.hpp"
#include "frace/service.hpp"
#include "frace/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsageExit = 2;

std::string default_bundle() {
  const char* env = std::getenv("FRACE_BUNDLE");
  return env ? env : "frace.bundle";
}

struct DataFlags {
  std::string name = "mnist";
  std::string dir = "data/mnist";
  std::int64_t image_size = 28;
  bool rgb = false;
  double test_fraction = 0.1;
  std::uint64_t split_seed = 0;

  void attach(CLI::App& app) {
    app.add_option("--dataset", name, "mnist, letter or folder")
        ->check(CLI::IsMember({"mnist", "letter", "folder"}))
        ->capture_default_str();
    app.add_option("--data-dir", dir, "IDX directory or image-folder root")->capture_default_str();
    app.add_option("--image-size", image_size, "folder datasets: resize side")->capture_default_str();
    app.add_flag("--rgb", rgb, "folder datasets: keep three channels");
    app.add_option("--test-fraction", test_fraction, "folder datasets: held-out share")
        ->capture_default_str();
    app.add_option("--split-seed", split_seed, "folder datasets: split seed")->capture_default_str();
  }

  frace::TrainTestSplit load() const {
    frace::DatasetSource source;
    source.name = name;
    source.directory = dir;
    source.folder = {image_size, image_size, rgb, test_fraction};
    source.split_seed = split_seed;
    return frace::load_train_test(source);
  }
};

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw frace::FormatError("cannot write " + path);
  out << j.dump(2) << "\n";
}

std::shared_ptr<const frace::ModelBundle> open_bundle(const std::string& path) {
  return std::make_shared<const frace::ModelBundle>(frace::ModelBundle::load(path));
}

torch::Tensor read_query(const frace::ModelBundle& bundle, std::optional<std::int64_t> sample_id,
                         const std::string& image_path) {
  const auto& s = bundle.input_shape;
  if (!image_path.empty()) {
    std::ifstream in(image_path, std::ios::binary);
    if (!in) throw frace::FormatError("cannot read " + image_path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return frace::decode_image(bytes, s.channels, s.height, s.width);
  }
  const auto count = bundle.sample_images.defined() ? bundle.sample_images.size(0) : 0;
  const auto id = sample_id.value_or(0);
  if (id < 0 || id >= count) {
    throw frace::ValidationError("sample id " + std::to_string(id) + " outside [0, " +
                                 std::to_string(count) + ")");
  }
  return bundle.sample_images[id];
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual explanations for image classifiers"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // train-classifier
  auto* tc = app.add_subcommand("train-classifier", "Train the ResNet-18 classifier to explain");
  DataFlags tc_data;
  tc_data.attach(*tc);
  auto schedule = frace::TrainSchedule::desk_scale();
  std::string tc_out = "classifier";
  std::int64_t tc_width = 16;
  std::uint64_t tc_seed = 0;
  std::int64_t tc_subset = 0;
  tc->add_option("--out", tc_out, "Checkpoint stem (writes .pt and .json)")->capture_default_str();
  tc->add_option("--epochs", schedule.epochs)->capture_default_str();
  tc->add_option("--lr", schedule.base_lr)->capture_default_str();
  tc->add_option("--decay-epochs", schedule.decay_epochs, "Epochs where the lr is multiplied")
      ->delimiter(',')
      ->capture_default_str();
  tc->add_option("--decay-factor", schedule.decay_factor)->capture_default_str();
  tc->add_option("--weight-decay", schedule.weight_decay)->capture_default_str();
  tc->add_option("--momentum", schedule.momentum)->capture_default_str();
  tc->add_option("--batch-size", schedule.batch_size)->capture_default_str();
  tc->add_option("--width", tc_width, "Channels of the first ResNet stage")->capture_default_str();
  tc->add_option("--seed", tc_seed)->capture_default_str();
  tc->add_option("--train-subset", tc_subset, "Use only the first n training images (0 = all)")
      ->capture_default_str();

  // train-gan
  auto* tg = app.add_subcommand("train-gan", "Train generator and discriminator, write a bundle");
  DataFlags tg_data;
  tg_data.attach(*tg);
  std::string tg_config, tg_classifier = "classifier", tg_bundle = default_bundle();
  std::optional<double> l_adv, l_cls, l_rec, l_exp, l_per, lr_g, lr_d;
  std::optional<std::int64_t> tg_epochs, tg_batch, tg_subset, tg_every, tg_interval, g_width, d_width;
  std::optional<std::uint64_t> tg_seed;
  std::optional<std::string> tg_adv;
  std::int64_t per_class = 32;
  tg->add_option("--config", tg_config, "JSON training config; flags override it");
  tg->add_option("--classifier", tg_classifier, "Classifier checkpoint stem")->capture_default_str();
  tg->add_option("--out", tg_bundle, "Bundle directory (default $FRACE_BUNDLE)")
      ->capture_default_str();
  tg->add_option("--lambda-adv", l_adv);
  tg->add_option("--lambda-cls", l_cls);
  tg->add_option("--lambda-rec", l_rec);
  tg->add_option("--lambda-exp", l_exp);
  tg->add_option("--lambda-per", l_per);
  tg->add_option("--adversarial", tg_adv, "log or wgan-gp")
      ->check(CLI::IsMember({"log", "wgan-gp"}));
  tg->add_option("--lr-g", lr_g);
  tg->add_option("--lr-d", lr_d);
  tg->add_option("--epochs", tg_epochs);
  tg->add_option("--batch-size", tg_batch);
  tg->add_option("--seed", tg_seed);
  tg->add_option("--train-subset", tg_subset, "Use only the first n training images");
  tg->add_option("--checkpoint-every", tg_every, "Steps between checkpoints (0 = off)");
  tg->add_option("--generator-interval", tg_interval, "Discriminator steps per generator step");
  tg->add_option("--g-width", g_width, "Generator base width");
  tg->add_option("--d-width", d_width, "Discriminator base width");
  tg->add_option("--samples-per-class", per_class, "Test images stored in the bundle")
      ->capture_default_str();

  // explain
  auto* ex = app.add_subcommand("explain", "Explain one image toward a counter class");
  std::string ex_bundle = default_bundle(), ex_image, ex_overlay, ex_cf, ex_json;
  std::optional<std::int64_t> ex_sample;
  std::int64_t ex_counter = 0;
  double ex_threshold = 0.1;
  ex->add_option("--bundle", ex_bundle)->capture_default_str();
  auto* ex_sample_opt = ex->add_option("--sample-id", ex_sample, "Index into the bundle samples");
  ex->add_option("--image", ex_image, "Image file to explain")->excludes(ex_sample_opt);
  ex->add_option("--counter-class", ex_counter)->required();
  ex->add_option("--threshold", ex_threshold, "Overlay threshold")->capture_default_str();
  ex->add_option("--overlay", ex_overlay, "Write the overlay PNG here");
  ex->add_option("--counterfactual", ex_cf, "Write the counterfactual PNG here");
  ex->add_option("--json", ex_json, "Write the summary JSON here (default stdout)");

  // grid
  auto* gr = app.add_subcommand("grid", "Render the class-by-class explanation grid");
  std::string gr_bundle = default_bundle(), gr_out = "grid.png";
  std::uint64_t gr_seed = 0;
  std::int64_t gr_scale = 2;
  double gr_threshold = 0.1;
  gr->add_option("--bundle", gr_bundle)->capture_default_str();
  gr->add_option("--out", gr_out)->capture_default_str();
  gr->add_option("--seed", gr_seed, "Representative selection seed")->capture_default_str();
  gr->add_option("--scale", gr_scale, "Tile upscaling factor")->capture_default_str();
  gr->add_option("--threshold", gr_threshold)->capture_default_str();

  // eval
  auto* ev = app.add_subcommand("eval", "Validity, perturbation size, cycle error and IPS");
  DataFlags ev_data;
  ev_data.attach(*ev);
  std::string ev_bundle = default_bundle(), ev_out;
  std::uint64_t ev_seed = 0;
  std::int64_t ev_limit = 0, ev_batch = 64;
  ev->add_option("--bundle", ev_bundle)->capture_default_str();
  ev->add_option("--seed", ev_seed, "Counter class sampling seed")->capture_default_str();
  ev->add_option("--limit", ev_limit, "Evaluate only the first n test images (0 = all)")
      ->capture_default_str();
  ev->add_option("--batch-size", ev_batch)->capture_default_str();
  ev->add_option("--out", ev_out, "Report JSON path (default stdout)");

  // bench
  auto* be = app.add_subcommand("bench", "Images-per-second benchmark");
  std::string be_bundle = default_bundle(), be_baseline = "none", be_out;
  frace::BenchConfig bench;
  frace::BaselineOptions baseline;
  be->add_option("--bundle", be_bundle)->capture_default_str();
  be->add_option("--baseline", be_baseline, "Also time a baseline: none or iterative")
      ->check(CLI::IsMember({"none", "iterative"}))
      ->capture_default_str();
  be->add_option("--batch-size", bench.batch_size)->capture_default_str();
  be->add_option("--warmup", bench.warmup_batches)->capture_default_str();
  be->add_option("--timed", bench.timed_batches)->capture_default_str();
  be->add_option("--repetitions", bench.repetitions)->capture_default_str();
  be->add_option("--hardware", bench.hardware, "Free-form hardware label")->capture_default_str();
  be->add_option("--max-iters", baseline.max_iters)->capture_default_str();
  be->add_option("--step-size", baseline.step_size)->capture_default_str();
  be->add_option("--l1-weight", baseline.l1_weight)->capture_default_str();
  be->add_option("--out", be_out, "Report JSON path (default stdout)");

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP explanation service");
  std::string sv_bundle = default_bundle();
  frace::ServeOptions serve;
  sv->add_option("--bundle", sv_bundle)->capture_default_str();
  sv->add_option("--host", serve.host)->capture_default_str();
  sv->add_option("--port", serve.port, "0 picks a free port")->capture_default_str();
  sv->add_option("--max-inflight", serve.max_inflight)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kUsageExit;
  }

  try {
    if (*tc) {
      auto data = tc_data.load();
      auto train = tc_subset > 0 ? data.train.head(tc_subset) : data.train;
      auto h = frace::train_classifier(train, data.test, schedule, tc_seed, tc_width,
                                       [](const frace::EpochLog& e) {
                                         std::cerr << "epoch " << e.epoch << " lr " << e.lr
                                                   << " loss " << e.train_loss << " train_acc "
                                                   << e.train_accuracy << " test_acc "
                                                   << e.test_accuracy << "\n";
                                       });
      h.save(tc_out);
      write_json({{"checkpoint", tc_out}, {"metrics", h.metrics}}, "-");
    } else if (*tg) {
      auto config = tg_config.empty() ? frace::GanConfig{} : frace::read_gan_config(tg_config);
      config.dataset = tg_data.name;
      config.data_dir = tg_data.dir;
      if (l_adv) config.weights.lambda_adv = *l_adv;
      if (l_cls) config.weights.lambda_cls = *l_cls;
      if (l_rec) config.weights.lambda_rec = *l_rec;
      if (l_exp) config.weights.lambda_exp = *l_exp;
      if (l_per) config.weights.lambda_per = *l_per;
      if (tg_adv) config.adversarial = json(*tg_adv).get<frace::AdversarialMode>();
      if (lr_g) config.lr_generator = *lr_g;
      if (lr_d) config.lr_discriminator = *lr_d;
      if (tg_epochs) config.epochs = *tg_epochs;
      if (tg_batch) config.batch_size = *tg_batch;
      if (tg_seed) config.seed = *tg_seed;
      if (tg_subset) config.train_subset = *tg_subset;
      if (tg_every) config.checkpoint_every = *tg_every;
      if (tg_interval) config.generator_interval = *tg_interval;
      if (g_width) config.generator.base_width = *g_width;
      if (d_width) config.discriminator.base_width = *d_width;

      auto data = tg_data.load();
      config.fit_to(data.train.descriptor().shape, data.train.descriptor().num_classes);
      config.validate();
      auto train = config.train_subset > 0 ? data.train.head(config.train_subset) : data.train;
      auto h = std::make_shared<frace::Classifier>(frace::Classifier::load(tg_classifier));

      frace::GanRunOptions run;
      run.output_dir = fs::path(tg_bundle) / "training";
      run.on_epoch = [&](std::int64_t epoch) { std::cerr << "epoch " << epoch << " done\n"; };
      auto result = frace::train_gan(config, train, h, run);
      auto bundle = frace::make_bundle(h, result.generator, result.discriminator, data.test, per_class);
      bundle.save(tg_bundle);
      const auto& last = result.log.empty() ? frace::LossReport{} : result.log.back();
      write_json({{"bundle", tg_bundle}, {"steps", result.log.size()}, {"last", last}}, "-");
    } else if (*ex) {
      auto bundle = open_bundle(ex_bundle);
      frace::OverlaySpec spec;
      spec.threshold = ex_threshold;
      spec.validate();
      const auto query = read_query(*bundle, ex_sample, ex_image);
      const auto e = frace::explain(bundle->generator, *bundle->classifier, query, ex_counter);
      if (!ex_overlay.empty()) frace::write_png(ex_overlay, frace::render_overlay(e, spec));
      if (!ex_cf.empty()) frace::write_png(ex_cf, frace::to_rgb(e.counterfactual_image));
      write_json({{"predicted_class", e.predicted_class.index()},
                  {"counter_class", e.counter_class.index()},
                  {"prob_counter_before", e.probs_before[ex_counter].item<double>()},
                  {"prob_counter_after", e.probs_after[ex_counter].item<double>()},
                  {"predicted_after", frace::argmax_lowest(e.probs_after)},
                  {"mean_abs_perturbation", e.perturbation.abs().mean().item<double>()},
                  {"latency_ms", e.latency_ms}},
                 ex_json);
    } else if (*gr) {
      auto bundle = open_bundle(gr_bundle);
      frace::DatasetDescriptor desc{bundle->dataset, bundle->input_shape, bundle->num_classes, 0.5,
                                    bundle->class_names};
      const frace::Dataset samples(desc, bundle->sample_images, bundle->sample_labels);
      frace::OverlaySpec spec;
      spec.threshold = gr_threshold;
      const auto reps = frace::pick_representatives(samples, *bundle->classifier, gr_seed);
      const auto grid =
          frace::explanation_grid(bundle->generator, *bundle->classifier, reps, spec, gr_scale);
      frace::write_png(gr_out, grid.image);
      write_json({{"grid", gr_out},
                  {"combinations", grid.combinations},
                  {"width", grid.image.width},
                  {"height", grid.image.height}},
                 "-");
    } else if (*ev) {
      auto bundle = open_bundle(ev_bundle);
      auto data = ev_data.load();
      auto test = ev_limit > 0 ? data.test.head(ev_limit) : data.test;
      if (bundle->discriminator.is_empty()) {
        throw frace::ConsistencyError("bundle has no discriminator; eval needs it for realism");
      }
      const auto result = frace::evaluate(bundle->generator, bundle->discriminator,
                                          *bundle->classifier, test, ev_seed, ev_batch);
      write_json(result.report, ev_out);
    } else if (*be) {
      auto bundle = open_bundle(be_bundle);
      if (!bundle->sample_images.defined()) throw frace::ConsistencyError("bundle has no samples");
      const auto images = bundle->sample_images;
      const auto classes = bundle->num_classes;
      auto counters_for = [classes](const torch::Tensor& batch) {
        return (torch::arange(batch.size(0), torch::kInt64) + 1) % classes;
      };
      const auto g = bundle->generator;
      const auto h = bundle->classifier;
      json report{{"config", bench}};
      const auto fast = frace::bench_ips(
          [&](const torch::Tensor& batch) { frace::explain_batch(g, *h, batch, counters_for(batch)); },
          images, bench);
      report["frace_ips"] = fast;
      if (be_baseline == "iterative") {
        report["baseline"] = {{"step_size", baseline.step_size},
                              {"max_iters", baseline.max_iters},
                              {"l1_weight", baseline.l1_weight}};
        const auto base = frace::bench_ips(
            [&](const torch::Tensor& batch) {
              const auto counters = counters_for(batch);
              for (std::int64_t i = 0; i < batch.size(0); ++i) {
                frace::iterative_baseline_explain(*h, batch[i], counters[i].item<std::int64_t>(),
                                                  baseline);
              }
            },
            images, bench);
        report["baseline_ips"] = base;
        report["speedup"] = base.mean > 0 ? fast.mean / base.mean : 0.0;
      }
      write_json(report, be_out);
    } else if (*sv) {
      frace::serve(sv_bundle, serve);
    }
  } catch (const frace::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const c10::Error& e) {
    std::cerr << "error: " << e.what_without_backtrace() << "\n";
    return 1;
  }
  return 0;
}
