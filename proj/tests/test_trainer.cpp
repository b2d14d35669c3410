#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "dlf/trainer.hpp"

using namespace dlf::trainer;
using dlf::deepfusion::DlfConfig;
using dlf::deepfusion::DlfModel;
namespace fs = std::filesystem;
namespace synthlab = dlf::synthlab;
namespace volcore = dlf::volcore;

namespace {

std::vector<synthlab::Subject> phantoms(int n, int L = 3, Dims d = {16, 16, 16}, std::uint64_t seed = 5) {
  synthlab::PhantomConfig c;
  c.dims = d;
  c.num_labels = L;
  c.n_subjects = n;
  c.seed = seed;
  return synthlab::make_subjects(c);
}

TrainConfig toy_config() {
  TrainConfig c;
  c.patch = {8, 8, 8};
  c.fg_patches = 8;
  c.bg_patches = 2;
  c.n_atlas_draw = 2;
  c.epochs = 10;
  c.augment = false;
  c.base_features = 2;
  c.seed = 21;
  return c;
}

std::vector<float> flat(const std::vector<dlf::gridnet::Tensor<float>>& ts) {
  std::vector<float> out;
  for (const auto& t : ts) out.insert(out.end(), t.values().begin(), t.values().end());
  return out;
}

bool same_sample(const Sample& a, const Sample& b) {
  if (a.target != b.target || !(a.center == b.center) || a.atlases.size() != b.atlases.size()) return false;
  if (a.image.data() != b.image.data() || a.gt.labels() != b.gt.labels() || a.coords.data() != b.coords.data())
    return false;
  for (std::size_t i = 0; i < a.atlases.size(); ++i)
    if (a.atlases[i].image.data() != b.atlases[i].image.data() ||
        a.atlases[i].labels.labels() != b.atlases[i].labels.labels())
      return false;
  return true;
}

Volume target_image(const synthlab::Subject& s) { return synthlab::stack_modalities(s); }

std::vector<AtlasBundle> bundles(const std::vector<synthlab::Subject>& s, std::size_t from, std::size_t to) {
  std::vector<AtlasBundle> out;
  for (std::size_t i = from; i < to; ++i) out.push_back({synthlab::stack_modalities(s[i]), s[i].labels});
  return out;
}

}  // namespace

TEST_CASE("presets") {
  const auto d = dlf_train_preset();
  CHECK(d.fg_patches == 10);
  CHECK(d.bg_patches == 2);
  CHECK(d.epochs == 10);
  CHECK(d.batch_size == 1);
  const auto u = unet_train_preset();
  CHECK(u.fg_patches == 20);
  CHECK(u.bg_patches == 8);
  CHECK(u.epochs == 20);
  CHECK(u.batch_size == 7);
  CHECK(u.n_atlas_draw == 0);
  CHECK(u.optim.lr0 == doctest::Approx(0.0005));
}

TEST_CASE("leave-one-out sampling") {
  const auto subjects = phantoms(3);
  TrainConfig cfg = toy_config();
  cfg.fg_patches = 10;
  cfg.bg_patches = 2;
  cfg.n_atlas_draw = 4;
  const auto s = sample_training_patches(subjects, cfg);
  REQUIRE(s.size() == 36);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool fg = i % 12 < 10;
    const auto& lab = subjects[s[i].target].labels;
    CHECK(s[i].target == i / 12);
    CHECK((lab.at(s[i].center.x, s[i].center.y, s[i].center.z) != 0) == fg);
    CHECK(s[i].atlases.size() == 4);
    CHECK(s[i].image.channels() == 2);
    CHECK(s[i].coords.channels() == 3);
    CHECK(s[i].gt.dims() == Dims{8, 8, 8});
    // Every atlas patch comes from another subject at the same location.
    for (const auto& a : s[i].atlases) {
      bool found = false;
      for (std::size_t k = 0; k < subjects.size(); ++k)
        if (k != s[i].target &&
            volcore::extract_patch(subjects[k].labels, {s[i].center, cfg.patch}).labels() == a.labels.labels())
          found = true;
      CHECK(found);
    }
    CHECK(volcore::extract_patch(lab, {s[i].center, cfg.patch}).labels() == s[i].gt.labels());
  }

  const auto again = sample_training_patches(subjects, cfg);
  cfg.workers = 3;
  const auto threaded = sample_training_patches(subjects, cfg);
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(same_sample(s[i], again[i]));
    CHECK(same_sample(s[i], threaded[i]));
  }

  cfg.seed = 22;
  const auto other = sample_training_patches(subjects, cfg);
  int moved = 0;
  for (std::size_t i = 0; i < s.size(); ++i) moved += !(s[i].center == other[i].center);
  CHECK(moved > 0);

  CHECK_THROWS_AS(sample_training_patches(std::span(subjects.data(), 1), cfg), std::invalid_argument);
  auto empty = subjects;
  std::fill(empty[1].labels.labels().begin(), empty[1].labels.labels().end(), 0);
  CHECK_THROWS_AS(sample_training_patches(empty, cfg), std::invalid_argument);
}

TEST_CASE("atlas resampling") {
  auto rng = keyed_stream(1, 0, 0);
  const std::vector<int> one{7};
  CHECK(resample_atlases(std::span<const int>(one), 4, rng) == std::vector<int>{7, 7, 7, 7});

  const std::vector<int> five{0, 1, 2, 3, 4};
  auto a = keyed_stream(3, 1, 2), b = keyed_stream(3, 1, 2);
  const auto da = resample_atlases(std::span<const int>(five), 9, a);
  CHECK(da == resample_atlases(std::span<const int>(five), 9, b));
  CHECK(da.size() == 9);

  const int n = 100000;
  auto r = keyed_stream(4, 0, 0);
  std::vector<int> counts(5, 0);
  for (auto i : resample_atlas_indices(5, n, r)) ++counts[i];
  const double p = 0.2, sd = std::sqrt(n * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - n * p) <= 3 * sd);

  auto e = keyed_stream(1, 0, 0);
  CHECK_THROWS_AS(resample_atlas_indices(0, 3, e), std::invalid_argument);
}

TEST_CASE("elastic augmentation") {
  const auto subjects = phantoms(3);
  auto cfg = toy_config();
  const auto samples = sample_training_patches(subjects, cfg);

  ElasticParams none;
  none.max_displacement = 0.0;
  for (int i = 0; i < 5; ++i) {
    auto rng = keyed_stream(9, 0, i);
    const auto out = elastic_augment(samples[i], none, rng);
    CHECK(out.gt.labels() == samples[i].gt.labels());
    for (std::size_t k = 0; k < out.image.data().size(); ++k)
      CHECK(std::abs(out.image.data()[k] - samples[i].image.data()[k]) <= 1e-6);
    for (std::size_t a = 0; a < out.atlases.size(); ++a)
      CHECK(out.atlases[a].labels.labels() == samples[i].atlases[a].labels.labels());
  }

  ElasticParams strong;
  strong.max_displacement = 3.0;
  int changed = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto rng = keyed_stream(9, 1, static_cast<std::int64_t>(i));
    const auto out = elastic_augment(samples[i], strong, rng);
    const std::set<int> before(samples[i].gt.labels().begin(), samples[i].gt.labels().end());
    const std::set<int> after(out.gt.labels().begin(), out.gt.labels().end());
    CHECK(std::includes(before.begin(), before.end(), after.begin(), after.end()));
    CHECK(out.coords.data() == samples[i].coords.data());
    changed += out.gt.labels() != samples[i].gt.labels();
  }
  CHECK(changed > 0);

  // One field per sample: an atlas identical to the target stays identical.
  Sample twin = samples[0];
  for (auto& a : twin.atlases) a = {twin.image, twin.gt};
  auto rng = keyed_stream(9, 2, 0);
  const auto out = elastic_augment(twin, strong, rng);
  for (const auto& a : out.atlases) {
    CHECK(a.image.data() == out.image.data());
    CHECK(a.labels.labels() == out.gt.labels());
  }

  Sample flat_sample = samples[0];
  std::fill(flat_sample.image.data().begin(), flat_sample.image.data().end(), 0.7f);
  auto rng2 = keyed_stream(9, 3, 0);
  for (float v : elastic_augment(flat_sample, strong, rng2).image.data()) CHECK(std::abs(v - 0.7f) <= 1e-6);

  ElasticParams too_fine;
  too_fine.control_grid = 9;
  auto rng3 = keyed_stream(9, 4, 0);
  CHECK_THROWS_AS(elastic_augment(samples[0], too_fine, rng3), std::invalid_argument);
}

TEST_CASE("augmented training set doubles the samples") {
  const auto subjects = phantoms(3);
  auto cfg = toy_config();
  cfg.augment = true;
  const auto set = build_training_set(subjects, cfg);
  const auto base = sample_training_patches(subjects, cfg);
  REQUIRE(set.size() == 2 * base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(same_sample(set[i], base[i]));
    CHECK(set[base.size() + i].center == base[i].center);
  }
  cfg.workers = 3;
  const auto threaded = build_training_set(subjects, cfg);
  for (std::size_t i = 0; i < set.size(); ++i) CHECK(same_sample(set[i], threaded[i]));
}

TEST_CASE("DLF training on a toy set") {
  const auto subjects = phantoms(3);
  const auto cfg = toy_config();
  const auto data = sample_training_patches(subjects, cfg);
  REQUIRE(data.size() == 30);
  const auto model_cfg = DlfConfig::make(3, cfg.base_features);

  auto a = train_dlf(data, cfg, model_cfg);
  REQUIRE(a.epoch_loss.size() == 10);
  MESSAGE("DLF toy loss: first " << a.epoch_loss.front() << ", last " << a.epoch_loss.back());
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());
  for (double v : a.epoch_loss) CHECK(std::isfinite(v));

  auto b = train_dlf(data, cfg, model_cfg);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(flat(a.model.parameters()) == flat(b.model.parameters()));

  auto zero_cfg = cfg;
  zero_cfg.epochs = 0;
  auto z = train_dlf(data, zero_cfg, model_cfg);
  CHECK(z.epoch_loss.empty());
  const DlfModel<float> init(model_cfg, init_seed(cfg.seed));
  CHECK(flat(z.model.parameters()) == flat(init.parameters()));
  CHECK(flat(a.model.parameters()) != flat(init.parameters()));

  auto bad = data;
  bad[3].image.data()[0] = std::numeric_limits<float>::quiet_NaN();
  auto one_epoch = cfg;
  one_epoch.epochs = 1;
  CHECK_THROWS_AS(train_dlf(bad, one_epoch, model_cfg), std::runtime_error);
  CHECK_THROWS_AS(train_dlf(std::span<const Sample>{}, one_epoch, model_cfg), std::invalid_argument);
}

TEST_CASE("U-Net training on a toy set") {
  const auto subjects = phantoms(3);
  auto cfg = toy_config();
  cfg.n_atlas_draw = 0;
  cfg.batch_size = 3;
  cfg.optim = dlf::gridnet::unet_optim_preset();
  cfg.optim.lr0 = 0.002;
  const auto data = sample_training_patches(subjects, cfg);
  const auto net_cfg = unet_baseline_config(3, 2);

  auto a = train_unet(data, cfg, net_cfg, 3);
  REQUIRE(a.epoch_loss.size() == 10);
  MESSAGE("U-Net toy loss: first " << a.epoch_loss.front() << ", last " << a.epoch_loss.back());
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());
  auto b = train_unet(data, cfg, net_cfg, 3);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(flat(a.model.parameters()) == flat(b.model.parameters()));

  auto zero_cfg = cfg;
  zero_cfg.epochs = 0;
  const dlf::unet::UNet<float> init(net_cfg, init_seed(cfg.seed));
  CHECK(flat(train_unet(data, zero_cfg, net_cfg, 3).model.parameters()) == flat(init.parameters()));
  CHECK_THROWS_AS(train_unet(data, cfg, net_cfg, 4), std::invalid_argument);

  const auto dir = fs::temp_directory_path() / "dlf_trainer_unet_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_unet(a.model, 3, dir);
  CHECK(checkpoint_kind(dir) == "unet");
  int L = 0;
  auto loaded = load_unet(dir, &L);
  CHECK(L == 3);
  const auto image = target_image(subjects[0]);
  const auto p1 = infer_unet(a.model, image, 3, {8, 8, 8}, {8, 8, 8});
  const auto p2 = infer_unet(loaded, image, 3, {8, 8, 8}, {8, 8, 8});
  CHECK(p1.logits.data() == p2.logits.data());
  fs::remove_all(dir);
}

TEST_CASE("dense inference") {
  const auto subjects = phantoms(4, 3, {16, 16, 8});
  auto model = DlfModel<float>(DlfConfig::make(3, 2), 17);
  const auto atlases = bundles(subjects, 1, 3);
  const auto image = target_image(subjects[0]);

  // A volume the size of one patch: dense inference equals one direct forward.
  const volcore::PatchSpec whole{{8, 8, 4}, {16, 16, 8}};
  const auto single = infer_dlf(model, image, atlases, {16, 16, 8}, {16, 16, 8});
  std::vector<AtlasBundle> normed;
  for (const auto& a : atlases) normed.push_back({volcore::znormalize(a.image), a.labels});
  const auto direct = dlf::deepfusion::predict(model, volcore::znormalize(image),
                                               volcore::coordinate_maps(image.dims()), normed);
  CHECK(single.labels.labels() == direct.labels.labels());
  CHECK(single.logits.data() == direct.logits.data());
  CHECK(volcore::extract_patch(image, whole).data() == image.data());

  // Stride = patch: each block is its own forward pass.
  const Dims patch{8, 8, 8};
  const auto blocks = infer_dlf(model, image, atlases, patch, patch);
  const auto centers = volcore::dense_grid_centers(image.dims(), patch, patch);
  CHECK(centers.size() == 4);
  const auto coords = volcore::coordinate_maps(image.dims());
  for (const auto& c : centers) {
    const volcore::PatchSpec spec{c, patch};
    std::vector<AtlasBundle> local;
    for (const auto& a : atlases)
      local.push_back({volcore::znormalize(volcore::extract_patch(a.image, spec)), volcore::extract_patch(a.labels, spec)});
    const auto p = dlf::deepfusion::predict(model, volcore::znormalize(volcore::extract_patch(image, spec)),
                                            volcore::extract_patch(coords, spec), local);
    CHECK(volcore::extract_patch(blocks.labels, spec).labels() == p.labels.labels());
  }

  // Worker count does not change the result.
  const auto threaded = infer_dlf(model, image, atlases, patch, {4, 4, 4}, 3);
  CHECK(threaded.logits.data() == infer_dlf(model, image, atlases, patch, {4, 4, 4}, 1).logits.data());

  CHECK_THROWS_AS(infer_dlf(model, image, std::span<const AtlasBundle>{}, patch, patch), std::invalid_argument);

  auto unet = dlf::unet::UNet<float>(unet_baseline_config(3, 2), 3);
  const auto u1 = infer_unet(unet, image, 3, {16, 16, 8}, {16, 16, 8});
  auto x = dlf::deepfusion::to_tensor<float>(volcore::stack_channels(
      std::vector<Volume>{volcore::znormalize(image), volcore::coordinate_maps(image.dims())}));
  const auto out = unet.forward(x, dlf::gridnet::Mode::Eval);
  CHECK(u1.labels.labels() == volcore::argmax(dlf::deepfusion::to_volume(out.logits)).labels());
}

TEST_CASE("atlas count may differ between training and inference") {
  const auto subjects = phantoms(9, 3, {16, 16, 16});
  auto cfg = toy_config();
  cfg.n_atlas_draw = 4;
  cfg.epochs = 1;
  const auto train = std::span(subjects.data(), 4);
  const auto data = sample_training_patches(train, cfg);
  for (const auto& s : data) CHECK(s.atlases.size() == 4);
  auto r = train_dlf(data, cfg, DlfConfig::make(3, 2));
  const auto image = target_image(subjects[8]);
  for (std::size_t n : {std::size_t{3}, std::size_t{7}}) {
    const auto atlases = bundles(subjects, 1, 1 + n);
    const auto p = infer_dlf(r.model, image, atlases, {8, 8, 8}, {8, 8, 8});
    CHECK(p.labels.dims() == image.dims());
    for (auto l : p.labels.labels()) CHECK((l >= 0 && l < 3));
  }
}
