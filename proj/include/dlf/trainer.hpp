#pragma once

// Leave-one-out patch sampling, elastic augmentation, the DLF and baseline
// U-Net training loops, and dense-grid inference.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dlf/deepfusion.hpp"
#include "dlf/gridnet/optim.hpp"
#include "dlf/synthlab.hpp"
#include "dlf/unet.hpp"
#include "dlf/volcore.hpp"

namespace dlf::trainer {

using volcore::AtlasBundle;
using volcore::Dims;
using volcore::Index3;
using volcore::LabelMap;
using volcore::Volume;

struct ElasticParams {
  int control_grid = 4;           // lattice points per axis
  double max_displacement = 2.0;  // voxels
  double smoothing = 0.0;         // lattice units

  void validate() const;
};

struct TrainConfig {
  Dims patch{24, 24, 24};
  int fg_patches = 10;
  int bg_patches = 2;
  int n_atlas_draw = 4;
  int epochs = 10;
  int batch_size = 1;
  gridnet::OptimConfig optim = gridnet::dlf_optim_preset();
  ElasticParams elastic;
  bool augment = true;  // add one deformed copy of every sample
  int base_features = 8;
  std::uint64_t seed = 1;
  int workers = 1;

  void validate() const;
};

/// 10 + 2 patches, 10 epochs, batch 1, decay x0.2 every 2 epochs from 4.
TrainConfig dlf_train_preset();
/// 20 + 8 patches, 20 epochs, batch 7, decay x0.2 every 4 epochs from 9, no atlases.
TrainConfig unet_train_preset();

/// Counter-based stream keyed by (seed, a, b).
std::mt19937_64 keyed_stream(std::uint64_t seed, std::int64_t a, std::int64_t b);

/// Seed the training loops pass to the model constructors.
std::uint64_t init_seed(std::uint64_t seed);

/// One training example: every patch shares the center and grid.
struct Sample {
  std::size_t target = 0;  // subject index
  Index3 center{};
  Volume image;   // target T1/T2, z-normalized per patch
  Volume coords;  // whole-grid coordinate maps cropped to the patch
  LabelMap gt;
  std::vector<AtlasBundle> atlases;  // normalized atlas images + candidate labels
};

/// n_draw uniform draws with replacement from [0, n).
std::vector<std::size_t> resample_atlas_indices(std::size_t n, int n_draw, std::mt19937_64& rng);

template <typename A>
std::vector<A> resample_atlases(std::span<const A> atlases, int n_draw, std::mt19937_64& rng) {
  std::vector<A> out;
  for (auto i : resample_atlas_indices(atlases.size(), n_draw, rng)) out.push_back(atlases[i]);
  return out;
}

/// Each subject is the target once with the others as its atlas pool.
/// Sample j of target t uses keyed_stream(seed, t, j): its center is uniform
/// over foreground voxels for j < fg_patches, background otherwise, and
/// n_atlas_draw atlases are redrawn for it. Throws if a target has no
/// foreground (or no background while bg_patches > 0).
std::vector<Sample> sample_training_patches(std::span<const synthlab::Subject> subjects, const TrainConfig& cfg);

/// One smooth field (longest vector = max_displacement) applied to the
/// target image, atlas images (trilinear) and all label maps (nearest).
/// Coordinate maps are kept.
Sample elastic_augment(const Sample& s, const ElasticParams& p, std::mt19937_64& rng);

/// Sampled patches plus, with cfg.augment, one deformed copy of each.
std::vector<Sample> build_training_set(std::span<const synthlab::Subject> subjects, const TrainConfig& cfg);

struct DlfTrainResult {
  deepfusion::DlfModel<float> model;
  std::vector<double> epoch_loss;  // mean per-sample loss of each epoch
};

struct UNetTrainResult {
  unet::UNet<float> model;
  std::vector<double> epoch_loss;
};

/// Adam on the deep-supervision generalized Dice loss. Per-sample gradients
/// are summed over a batch in sample order. Throws on a non-finite loss.
DlfTrainResult train_dlf(std::span<const Sample> data, const TrainConfig& cfg, const deepfusion::DlfConfig& model_cfg);

/// Baseline U-Net layout: input [T1, T2, coords], L outputs, 4 levels, padded.
unet::UNetConfig unet_baseline_config(int num_labels, int base_features);

/// As train_dlf on [target, coords] inputs only.
UNetTrainResult train_unet(std::span<const Sample> data, const TrainConfig& cfg, const unet::UNetConfig& model_cfg,
                           int num_labels);

/// Checkpoints for the baseline U-Net (DLF models use DlfModel::save/load).
void save_unet(const unet::UNet<float>& net, int num_labels, const std::filesystem::path& dir);
unet::UNet<float> load_unet(const std::filesystem::path& dir, int* num_labels = nullptr);

/// "dlf" or "unet", from the checkpoint's config.txt.
std::string checkpoint_kind(const std::filesystem::path& dir);

struct Prediction {
  Volume logits;  // stitched, L channels
  LabelMap labels;
};

/// Dense-grid inference on raw (unnormalized) T1/T2 target and atlas images.
/// The patch is clipped to the volume.
Prediction infer_dlf(deepfusion::DlfModel<float>& model, const Volume& target, std::span<const AtlasBundle> atlases,
                     Dims patch, Dims stride, int workers = 1);
Prediction infer_unet(unet::UNet<float>& model, const Volume& target, int num_labels, Dims patch, Dims stride,
                      int workers = 1);

}  // namespace dlf::trainer
