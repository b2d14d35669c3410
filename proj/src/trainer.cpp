#include "dlf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dlf/gridnet/checkpoint.hpp"
#include "dlf/gridnet/loss.hpp"
#include "dlf/parallel.hpp"

namespace dlf::trainer {

using deepfusion::to_tensor;
using gridnet::Tensor;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Stream families, so sampling, augmentation and shuffling never share draws.
constexpr std::int64_t kAugmentFamily = 1'000'000;
constexpr std::int64_t kShuffleKey = -2;
constexpr std::int64_t kInitKey = -3;

Volume stack(const Volume& a, const Volume& b) {
  const Volume parts[2] = {a, b};
  return volcore::stack_channels(parts);
}

Dims clip(Dims patch, const Dims& dims) {
  return {std::min(patch.x, dims.x), std::min(patch.y, dims.y), std::min(patch.z, dims.z)};
}

}  // namespace

void ElasticParams::validate() const {
  if (control_grid < 2) throw std::invalid_argument("elastic: control_grid must be >= 2");
  if (max_displacement < 0.0) throw std::invalid_argument("elastic: max_displacement must be >= 0");
  if (smoothing < 0.0) throw std::invalid_argument("elastic: smoothing must be >= 0");
}

void TrainConfig::validate() const {
  if (patch.x < 1 || patch.y < 1 || patch.z < 1) throw std::invalid_argument("train: patch size must be >= 1");
  if (fg_patches < 0 || bg_patches < 0 || n_atlas_draw < 0)
    throw std::invalid_argument("train: patch and atlas counts must be >= 0");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (base_features < 1) throw std::invalid_argument("train: base_features must be >= 1");
  if (workers < 1) throw std::invalid_argument("train: workers must be >= 1");
  optim.validate();
  elastic.validate();
}

TrainConfig dlf_train_preset() { return TrainConfig{}; }

TrainConfig unet_train_preset() {
  TrainConfig c;
  c.fg_patches = 20;
  c.bg_patches = 8;
  c.n_atlas_draw = 0;
  c.epochs = 20;
  c.batch_size = 7;
  c.optim = gridnet::unet_optim_preset();
  return c;
}

std::mt19937_64 keyed_stream(std::uint64_t seed, std::int64_t a, std::int64_t b) {
  const std::uint64_t k = splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(a));
  return std::mt19937_64(splitmix(k ^ static_cast<std::uint64_t>(b)));
}

std::uint64_t init_seed(std::uint64_t seed) { return splitmix(seed ^ kInitKey); }

std::vector<std::size_t> resample_atlas_indices(std::size_t n, int n_draw, std::mt19937_64& rng) {
  if (n == 0) throw std::invalid_argument("resample_atlases: no atlases");
  if (n_draw < 0) throw std::invalid_argument("resample_atlases: n_draw must be >= 0");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> out(static_cast<std::size_t>(n_draw));
  for (auto& i : out) i = pick(rng);
  return out;
}

std::vector<Sample> sample_training_patches(std::span<const synthlab::Subject> subjects, const TrainConfig& cfg) {
  cfg.validate();
  if (subjects.empty()) throw std::invalid_argument("sampling: no subjects");
  if (cfg.n_atlas_draw > 0 && subjects.size() < 2)
    throw std::invalid_argument("sampling: leave-one-out needs >= 2 subjects");
  const Dims dims = subjects[0].labels.dims();
  for (const auto& s : subjects)
    if (!(s.labels.dims() == dims)) throw std::invalid_argument("sampling: subjects must share one grid");
  const Dims patch = clip(cfg.patch, dims);
  const Volume coords = volcore::coordinate_maps(dims);
  std::vector<Volume> images;
  for (const auto& s : subjects) images.push_back(synthlab::stack_modalities(s));

  const int per_target = cfg.fg_patches + cfg.bg_patches;
  std::vector<Sample> out(subjects.size() * static_cast<std::size_t>(per_target));
  for (std::size_t t = 0; t < subjects.size(); ++t) {
    std::vector<std::size_t> fg, bg;
    const auto& lab = subjects[t].labels.labels();
    for (std::size_t i = 0; i < lab.size(); ++i) (lab[i] != 0 ? fg : bg).push_back(i);
    if (fg.empty() && cfg.fg_patches > 0)
      throw std::invalid_argument("sampling: subject " + std::to_string(t) + " has no foreground voxels");
    if (bg.empty() && cfg.bg_patches > 0)
      throw std::invalid_argument("sampling: subject " + std::to_string(t) + " has no background voxels");
    std::vector<std::size_t> pool;
    for (std::size_t a = 0; a < subjects.size(); ++a)
      if (a != t) pool.push_back(a);

    parallel_for(static_cast<std::size_t>(per_target), cfg.workers, [&](std::size_t begin, std::size_t end) {
      for (std::size_t j = begin; j < end; ++j) {
        auto rng = keyed_stream(cfg.seed, static_cast<std::int64_t>(t), static_cast<std::int64_t>(j));
        const auto& from = static_cast<int>(j) < cfg.fg_patches ? fg : bg;
        const std::size_t v = from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
        Sample& s = out[t * per_target + j];
        s.target = t;
        s.center = {static_cast<int>(v % dims.x), static_cast<int>((v / dims.x) % dims.y),
                    static_cast<int>(v / (static_cast<std::size_t>(dims.x) * dims.y))};
        const volcore::PatchSpec spec{s.center, patch};
        s.image = volcore::znormalize(volcore::extract_patch(images[t], spec));
        s.coords = volcore::extract_patch(coords, spec);
        s.gt = volcore::extract_patch(subjects[t].labels, spec);
        if (cfg.n_atlas_draw > 0)
          for (auto k : resample_atlas_indices(pool.size(), cfg.n_atlas_draw, rng)) {
            const std::size_t a = pool[k];
            s.atlases.push_back({volcore::znormalize(volcore::extract_patch(images[a], spec)),
                                 volcore::extract_patch(subjects[a].labels, spec)});
          }
      }
    });
  }
  return out;
}

Sample elastic_augment(const Sample& s, const ElasticParams& p, std::mt19937_64& rng) {
  p.validate();
  const Dims d = s.gt.dims();
  if (p.control_grid > std::min({d.x, d.y, d.z}))
    throw std::invalid_argument("elastic: control grid does not fit the patch");
  Volume field = volcore::random_displacement_field(d, p.control_grid, p.smoothing, rng);
  volcore::limit_displacement(field, p.max_displacement);
  Sample out;
  out.target = s.target;
  out.center = s.center;
  out.image = volcore::warp_volume(s.image, field);
  out.coords = s.coords;
  out.gt = volcore::warp_labels(s.gt, field);
  for (const auto& a : s.atlases)
    out.atlases.push_back({volcore::warp_volume(a.image, field), volcore::warp_labels(a.labels, field)});
  return out;
}

std::vector<Sample> build_training_set(std::span<const synthlab::Subject> subjects, const TrainConfig& cfg) {
  auto samples = sample_training_patches(subjects, cfg);
  if (!cfg.augment) return samples;
  const std::size_t n = samples.size();
  const int per_target = cfg.fg_patches + cfg.bg_patches;
  samples.resize(2 * n);
  parallel_for(n, cfg.workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto t = static_cast<std::int64_t>(samples[i].target);
      auto rng = keyed_stream(cfg.seed, kAugmentFamily + t, static_cast<std::int64_t>(i % per_target));
      samples[n + i] = elastic_augment(samples[i], cfg.elastic, rng);
    }
  });
  return samples;
}

namespace {

// Shared epoch loop: loss_of(sample) builds the graph and returns the loss.
template <typename LossFn>
std::vector<double> optimize(std::span<const Sample> data, const TrainConfig& cfg, std::vector<Tensor<float>> params,
                             LossFn&& loss_of) {
  std::vector<double> trace;
  if (cfg.epochs == 0) return trace;
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  gridnet::Adam<float> adam(params, cfg.optim);
  std::vector<std::size_t> order(data.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = keyed_stream(cfg.seed, kShuffleKey, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = gridnet::learning_rate(cfg.optim, epoch);
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      adam.zero_grad();
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t k = b; k < e; ++k) {
        Tensor<float> loss = loss_of(data[order[k]]);
        const double v = loss.item();
        if (!std::isfinite(v)) {
          std::ostringstream msg;
          msg << "training diverged: loss " << v << " at epoch " << epoch << ", sample " << order[k] << " (target "
              << data[order[k]].target << ", center " << data[order[k]].center.x << "," << data[order[k]].center.y
              << "," << data[order[k]].center.z << "), lr " << lr;
          throw std::runtime_error(msg.str());
        }
        total += v;
        if (!params.empty()) loss.backward();
      }
      if (!params.empty()) adam.step(lr);
    }
    trace.push_back(total / static_cast<double>(data.size()));
  }
  return trace;
}

}  // namespace

DlfTrainResult train_dlf(std::span<const Sample> data, const TrainConfig& cfg, const deepfusion::DlfConfig& model_cfg) {
  cfg.validate();
  DlfTrainResult r{deepfusion::DlfModel<float>(model_cfg, init_seed(cfg.seed)), {}};
  const int L = model_cfg.num_labels;
  const std::vector<double> main_only{1.0};
  r.epoch_loss = optimize(data, cfg, r.model.parameters(), [&](const Sample& s) {
    if (s.atlases.empty()) throw std::invalid_argument("train_dlf: sample without atlases");
    std::vector<deepfusion::AtlasInput<float>> atlases;
    for (const auto& a : s.atlases) atlases.push_back({to_tensor<float>(a.image), to_tensor<float>(a.labels, L)});
    auto out = r.model.forward(to_tensor<float>(s.image), to_tensor<float>(s.coords), atlases, gridnet::Mode::Train);
    const auto gt = to_tensor<float>(s.gt, L);
    std::span<const double> w = out.aux.empty() ? std::span<const double>(main_only)
                                                : std::span<const double>(model_cfg.ft.ds_weights);
    return deepfusion::deep_supervision_loss(out.logits, std::span<const Tensor<float>>(out.aux), gt, w);
  });
  return r;
}

unet::UNetConfig unet_baseline_config(int num_labels, int base_features) {
  unet::UNetConfig c;
  c.in_channels = 5;
  c.out_channels = num_labels;
  c.levels = 4;
  c.base_features = base_features;
  c.deep_supervision = false;
  c.pad_to_fit = true;
  return c;
}

UNetTrainResult train_unet(std::span<const Sample> data, const TrainConfig& cfg, const unet::UNetConfig& model_cfg,
                           int num_labels) {
  cfg.validate();
  if (model_cfg.in_channels != 5 || model_cfg.out_channels != num_labels)
    throw std::invalid_argument("train_unet: network must map 5 channels to L labels");
  UNetTrainResult r{unet::UNet<float>(model_cfg, init_seed(cfg.seed)), {}};
  std::vector<double> weights{1.0};
  if (model_cfg.deep_supervision) weights.assign(model_cfg.ds_weights.begin(), model_cfg.ds_weights.begin() + model_cfg.num_heads());
  r.epoch_loss = optimize(data, cfg, r.model.parameters(), [&](const Sample& s) {
    auto out = r.model.forward(to_tensor<float>(stack(s.image, s.coords)), gridnet::Mode::Train);
    const auto gt = to_tensor<float>(s.gt, num_labels);
    return deepfusion::deep_supervision_loss(out.logits, std::span<const Tensor<float>>(out.aux), gt,
                                             std::span<const double>(weights));
  });
  return r;
}

void save_unet(const unet::UNet<float>& net, int num_labels, const std::filesystem::path& dir) {
  const auto arrays = net.export_arrays("net.");
  gridnet::save_checkpoint(dir, arrays);
  std::ofstream os(dir / "config.txt", std::ios::trunc);
  os.precision(17);
  os << "model=unet\n" << "num_labels=" << num_labels << '\n';
  unet::write_config(os, "net.", net.config());
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
}

namespace {

std::map<std::string, std::string> read_model_config(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.txt");
  if (!is) throw std::runtime_error("missing model config in " + dir.string());
  std::map<std::string, std::string> kv;
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

unet::UNet<float> load_unet(const std::filesystem::path& dir, int* num_labels) {
  auto kv = read_model_config(dir);
  if (kv["model"] != "unet") throw std::runtime_error(dir.string() + " is not a U-Net checkpoint");
  unet::UNet<float> net(unet::read_config(kv, "net."), 0);
  net.import_arrays(gridnet::load_checkpoint(dir), "net.");
  if (num_labels) *num_labels = std::stoi(kv.at("num_labels"));
  return net;
}

std::string checkpoint_kind(const std::filesystem::path& dir) {
  auto kv = read_model_config(dir);
  const auto it = kv.find("model");
  if (it == kv.end() || (it->second != "dlf" && it->second != "unet"))
    throw std::runtime_error(dir.string() + ": unknown checkpoint type");
  return it->second;
}

namespace {

template <typename PatchFn>
Prediction infer_dense(const Volume& target, int num_labels, Dims patch, Dims stride, int workers, PatchFn&& run) {
  if (target.channels() != 2) throw std::invalid_argument("infer: target must hold T1 and T2");
  const Dims dims = target.dims();
  patch = clip(patch, dims);
  const auto centers = volcore::dense_grid_centers(dims, patch, stride);
  const Volume coords = volcore::coordinate_maps(dims);
  std::vector<Volume> logits(centers.size());
  parallel_for(centers.size(), workers, [&](std::size_t begin, std::size_t end) {
    gridnet::NoGradGuard guard;
    for (std::size_t i = begin; i < end; ++i) {
      const volcore::PatchSpec spec{centers[i], patch};
      logits[i] = run(spec, volcore::znormalize(volcore::extract_patch(target, spec)),
                      volcore::extract_patch(coords, spec));
    }
  });
  Prediction p;
  p.logits = volcore::stitch_patches(logits, centers, dims, num_labels);
  p.logits.set_spacing(target.spacing());
  p.labels = volcore::argmax(p.logits);
  return p;
}

}  // namespace

Prediction infer_dlf(deepfusion::DlfModel<float>& model, const Volume& target, std::span<const AtlasBundle> atlases,
                     Dims patch, Dims stride, int workers) {
  if (atlases.empty()) throw std::invalid_argument("infer: a DLF model needs at least one atlas");
  for (const auto& a : atlases)
    if (!(a.image.dims() == target.dims()) || !(a.labels.dims() == target.dims()) || a.image.channels() != 2)
      throw std::invalid_argument("infer: atlases must be 2-channel images on the target grid");
  const int L = model.config().num_labels;
  return infer_dense(target, L, patch, stride, workers,
                     [&](const volcore::PatchSpec& spec, const Volume& image, const Volume& coords) {
                       std::vector<AtlasBundle> local;
                       for (const auto& a : atlases)
                         local.push_back({volcore::znormalize(volcore::extract_patch(a.image, spec)),
                                          volcore::extract_patch(a.labels, spec)});
                       return deepfusion::predict(model, image, coords, local).logits;
                     });
}

Prediction infer_unet(unet::UNet<float>& model, const Volume& target, int num_labels, Dims patch, Dims stride,
                      int workers) {
  return infer_dense(target, num_labels, patch, stride, workers,
                     [&](const volcore::PatchSpec&, const Volume& image, const Volume& coords) {
                       auto out = model.forward(to_tensor<float>(stack(image, coords)), gridnet::Mode::Eval);
                       return deepfusion::to_volume(out.logits);
                     });
}

}  // namespace dlf::trainer
