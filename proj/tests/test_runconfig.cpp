#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dlf/runconfig.hpp"

using namespace dlf::runconfig;
using dlf::volcore::Dims;

namespace {

std::string error_of(const std::string& text) {
  try {
    RunConfig::parse(text, "c.txt");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("defaults resolve to the module presets") {
  const RunConfig c;
  CHECK(c.seed() == 1);
  const auto p = c.phantom();
  CHECK(p.dims == Dims{48, 48, 48});
  CHECK(p.num_labels == 5);
  CHECK(p.n_subjects == 13);
  CHECK(p.misalign_sigma == 2.0);
  CHECK(p.contrast.empty());

  const auto d = c.train("dlf"), dp = dlf::trainer::dlf_train_preset();
  CHECK(d.fg_patches == dp.fg_patches);
  CHECK(d.bg_patches == dp.bg_patches);
  CHECK(d.epochs == dp.epochs);
  CHECK(d.batch_size == dp.batch_size);
  CHECK(d.n_atlas_draw == dp.n_atlas_draw);
  CHECK(d.optim.lr0 == dp.optim.lr0);
  CHECK(d.optim.decay_start_epoch == dp.optim.decay_start_epoch);

  const auto u = c.train("unet"), up = dlf::trainer::unet_train_preset();
  CHECK(u.epochs == up.epochs);
  CHECK(u.batch_size == up.batch_size);
  CHECK(u.fg_patches == up.fg_patches);
  CHECK(u.optim.decay_every_epochs == up.optim.decay_every_epochs);
  CHECK(u.n_atlas_draw == 0);

  CHECK(c.infer_stride() == Dims{12, 12, 12});
  CHECK(c.eval_labels().empty());
  CHECK(c.dlf_model(5).num_labels == 5);
  CHECK(c.fusion("svwv").beta == dlf::classicfusion::svwv_defaults().beta);
  CHECK_THROWS_AS(c.fusion("mv"), ConfigError);
  CHECK_THROWS_AS(c.train("resnet"), ConfigError);
}

TEST_CASE("parsing overrides") {
  const auto c = RunConfig::parse(
      "# phantom for a quick run\n"
      "seed = 42\n"
      "\n"
      "phantom.dims = 24, 32, 16   # x, y, z\n"
      "phantom.labels = 3\n"
      "phantom.t1_mean = 0, 0.5, 1\n"
      "train.patch = 8\n"
      "train.epochs = 3\n"
      "train.atlases = 6\n"
      "train.lr = 0.01\n"
      "train.augment = false\n"
      "fusion.search_radius = 2\n"
      "eval.labels = 1,2\n");
  CHECK(c.seed() == 42);
  const auto p = c.phantom();
  CHECK(p.dims == Dims{24, 32, 16});
  CHECK(p.seed == 42);
  REQUIRE(p.contrast.size() == 2);
  CHECK(p.contrast[0][1].mean == 0.5);
  CHECK(p.contrast[1][1].mean == dlf::synthlab::default_contrast(3)[1][1].mean);
  const auto t = c.train("dlf");
  CHECK(t.patch == Dims{8, 8, 8});
  CHECK(t.epochs == 3);
  CHECK(t.n_atlas_draw == 6);
  CHECK(t.optim.lr0 == 0.01);
  CHECK_FALSE(t.augment);
  CHECK(t.seed == 42);
  CHECK(c.train("unet").epochs == 3);
  CHECK(c.train("unet").n_atlas_draw == 0);
  const auto f = c.fusion("jlf");
  CHECK(f.search_radius.x == 2);
  CHECK(f.search_radius.z == 2);
  CHECK(c.eval_labels() == std::vector<int>{1, 2});

  // Round trip through to_text.
  const auto again = RunConfig::parse(c.to_text());
  CHECK(again.to_text() == c.to_text());
  CHECK(c.to_text().find("train.epochs=3\n") != std::string::npos);
}

TEST_CASE("bad input is reported with its line") {
  CHECK(error_of("seed = 1\nphantom.colour = 3\n").find("c.txt:2: unknown config key: phantom.colour") == 0);
  CHECK(error_of("seed = 1\nseed = 2\n").find("c.txt:2: repeated key seed") == 0);
  CHECK(error_of("train.epochs = many\n").find("c.txt:1: bad value for train.epochs") == 0);
  CHECK(error_of("train.patch = 8,8\n").find("c.txt:1: bad value") == 0);
  CHECK(error_of("train.augment = maybe\n").find("bad value") != std::string::npos);
  CHECK(error_of("phantom.noise_sigma = nan\n").find("bad value") != std::string::npos);
  CHECK(error_of("just words\n").find("c.txt:1: expected key = value") == 0);
  CHECK(error_of("seed = 3\n# train.epochs = x\n").empty());

  RunConfig c;
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
  CHECK_THROWS_AS(c.get("nope"), ConfigError);
  c.set("phantom.labels", "1");
  CHECK_THROWS_AS(c.phantom(), ConfigError);
  c.set("phantom.labels", "3");
  c.set("phantom.t2_sd", "0.1,0.1");
  CHECK_THROWS_AS(c.phantom(), ConfigError);
  c.set("train.batch_size", "0");
  CHECK_THROWS_AS(c.train("dlf"), ConfigError);
  c.set("train.stride", "0");
  CHECK_THROWS_AS(c.infer_stride(), ConfigError);

  CHECK_THROWS_AS(RunConfig::load("/nonexistent/dlf.cfg"), ConfigError);
}

TEST_CASE("loading from a file") {
  const auto path = std::filesystem::temp_directory_path() / "dlf_runconfig_test.txt";
  {
    std::ofstream out(path);
    out << "seed = 9\ntrain.base_features = 4\ntrain.mask_threshold = 0.3\n";
  }
  const auto c = RunConfig::load(path);
  CHECK(c.seed() == 9);
  const auto m = c.dlf_model(4);
  CHECK(m.wv.base_features == 4);
  CHECK(m.mask_threshold == 0.3);
  std::filesystem::remove(path);
}

TEST_CASE("describe echoes resolved settings") {
  const RunConfig c;
  const auto p = describe(c.phantom());
  CHECK(p.find("phantom.dims=48,48,48\n") != std::string::npos);
  CHECK(p.find("phantom.t1_mean=") != std::string::npos);
  const auto t = describe(c.train("unet"));
  CHECK(t.find("epochs=20") != std::string::npos);
  CHECK(t.find("batch_size=7") != std::string::npos);
  CHECK_FALSE(describe(c.fusion("jlf")).empty());
}
