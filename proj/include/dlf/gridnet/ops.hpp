#pragma once

// Differentiable operators over [C, D, H, W] activations (batch size 1).
// D is the z axis, W the x axis, so a tensor shares its memory layout with
// a volcore::Volume of the same channel count.

#include <span>
#include <vector>

#include "dlf/gridnet/tensor.hpp"

namespace dlf::gridnet {

enum class Mode { Train, Eval };

/// Cross-correlation. x: [Cin, D, H, W], w: [Cout, Cin, k, k, k], b: [Cout] or undefined.
/// Output extent per axis: (n + 2 * pad - k) / stride + 1.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride = 1,
                 int pad = 1);

/// Transposed 3x3x3 convolution, stride 2, padding 1, output padding 1, so
/// every spatial extent exactly doubles. x: [Cin, D, H, W], w: [Cin, Cout, 3, 3, 3].
/// It is the adjoint of conv3d(., w, {}, 2, 1) taking [Cout, 2D, 2H, 2W] to [Cin, D, H, W].
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Running statistics of a batch-norm layer (buffers, not parameters).
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(int channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

/// Training mode normalizes with per-channel statistics over all voxels and
/// updates the running averages (unbiased variance); eval mode uses them.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, Mode mode);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

/// 2x2x2 max pooling. Odd extents are rejected. Gradient goes to the first
/// maximal element in linear order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x);

/// Concatenates along axis 0.
template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> xs);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Elementwise arithmetic mean. Accumulation runs in list order in a wider
/// type, so repeated or reordered inputs give identical results whenever the
/// wide sums are exact.
template <typename T>
Tensor<T> mean_over(std::span<const Tensor<T>> xs);

/// Sum of all elements, as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// sum_k weights[k] * xs[k] over scalar tensors.
template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> xs, std::span<const double> weights);

/// Softmax across axis 0 at each spatial position.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x);

/// Zero-pads [C, D, H, W] at the high end of each spatial axis.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, int d, int h, int w);

/// Keeps the low corner [0, d) x [0, h) x [0, w).
template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, int d, int h, int w);

}  // namespace dlf::gridnet
