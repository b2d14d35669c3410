#pragma once

// Deep label fusion: a weighted-voting U-Net shared across atlases predicts
// per-label weight maps W_i from [target, atlas_i, coords]; votes V_i = W_i * S_i
// (S_i the atlas one-hot candidate) are averaged into S_init; a fine-tuning
// U-Net maps [S_init, coords] to features, which are multiplied by the atlas
// mask and argmaxed.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dlf/gridnet/ops.hpp"
#include "dlf/unet.hpp"
#include "dlf/volcore.hpp"

namespace dlf::deepfusion {

using gridnet::Mode;
using gridnet::Tensor;
using unet::UNetConfig;
using volcore::LabelMap;
using volcore::Volume;

struct DlfConfig {
  int num_labels = 5;
  UNetConfig wv;  // 3 levels, in 7, out L
  UNetConfig ft;  // 4 levels, in L + 3, out L, deep supervision, padded
  double mask_threshold = 0.2;
  bool ablate_wv = false;
  bool ablate_ft = false;
  bool ablate_mask = false;

  /// Standard layout for L labels and a base feature count.
  static DlfConfig make(int num_labels, int base_features);
  void validate() const;
};

/// Per-atlas network inputs: image [2, D, H, W] and one-hot labels [L, D, H, W].
template <typename T>
struct AtlasInput {
  Tensor<T> image;
  Tensor<T> onehot;
};

template <typename T>
struct Intermediates {
  std::vector<Tensor<T>> W, S, V;
  Tensor<T> S_init;
  Tensor<T> mask;  // [L, D, H, W] of {0, 1}
};

template <typename T>
struct DlfOutput {
  Tensor<T> logits;            // masked features
  std::vector<Tensor<T>> aux;  // fine-tuning deep-supervision logits (unmasked)
  Intermediates<T> parts;
};

/// v = w * s elementwise.
template <typename T>
Tensor<T> compose_votes(const Tensor<T>& W, const Tensor<T>& S);

/// Mean over atlases, accumulated in atlas-index order.
template <typename T>
Tensor<T> average_votes(std::span<const Tensor<T>> V);

/// mask_l(n) = 1 iff (sum_i s_ln^i) / N >= tau; channel 0 is always 1.
template <typename T>
Tensor<T> atlas_mask(std::span<const Tensor<T>> S, double tau);

template <typename T>
class DlfModel {
 public:
  DlfModel() = default;
  DlfModel(const DlfConfig& cfg, std::uint64_t seed);

  const DlfConfig& config() const { return cfg_; }

  /// target: [2, D, H, W]; coords: [3, D, H, W]; at least one atlas.
  DlfOutput<T> forward(const Tensor<T>& target, const Tensor<T>& coords, std::span<const AtlasInput<T>> atlases,
                       Mode mode);

  std::vector<Tensor<T>> parameters() const;
  unet::UNet<T>& wv() { return wv_; }
  unet::UNet<T>& ft() { return ft_; }

  /// Checkpoint directory: gridnet arrays plus config.txt.
  void save(const std::filesystem::path& dir) const;
  static DlfModel load(const std::filesystem::path& dir);

 private:
  DlfConfig cfg_;
  unet::UNet<T> wv_;
  unet::UNet<T> ft_;
};

/// Ground truth for deep-supervision level k: one-hot [L, D, H, W] sampled at
/// index x * 2^k along each axis, for x < ceil(extent / 2^k).
template <typename T>
Tensor<T> downsample_nearest(const Tensor<T>& onehot, int k);

/// sum_k weights[k] * GDL(softmax(logits_k), gt_k), with logits_0 = main and
/// logits_k = aux[k-1]. Requires aux.size() + 1 == weights.size().
template <typename T>
Tensor<T> deep_supervision_loss(const Tensor<T>& main_logits, std::span<const Tensor<T>> aux,
                                const Tensor<T>& gt_onehot, std::span<const double> weights);

// Conversions between volcore volumes and [C, D, H, W] tensors (same layout).
template <typename T>
Tensor<T> to_tensor(const Volume& v);
template <typename T>
Tensor<T> to_tensor(const LabelMap& lm, int num_labels);  // one-hot
template <typename T>
Volume to_volume(const Tensor<T>& t, volcore::Spacing spacing = {});

/// Volume-level forward used by inference: returns logits and labels.
struct PatchPrediction {
  Volume logits;
  LabelMap labels;
};
PatchPrediction predict(DlfModel<float>& model, const Volume& target, const Volume& coords,
                        std::span<const volcore::AtlasBundle> atlases);

}  // namespace dlf::deepfusion
