#pragma once

// 3D U-Net over gridnet tensors.
//
// Down level j (j = 0..levels-1, f_j = base * 2^j): conv-bn-relu x2, then a
// 2x2x2 pool. Up level j (levels-1..0): stride-2 transpose conv to f_j,
// concatenation with the level-j encoder output, conv-bn-relu x2. A 1x1x1
// conv maps f_0 features to the outputs. With deep supervision, extra 1x1x1
// heads read the up-level-k output (k >= 1) and, when k == levels, the
// pooled bottleneck features, giving logits at 1/2^k resolution.

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dlf/gridnet/checkpoint.hpp"
#include "dlf/gridnet/ops.hpp"

namespace dlf::unet {

using gridnet::Mode;
using gridnet::Tensor;

struct UNetConfig {
  int in_channels = 7;
  int out_channels = 2;
  int levels = 3;
  int base_features = 8;
  bool deep_supervision = false;
  std::vector<double> ds_weights{1.0, 0.5, 0.2, 0.1};
  /// Zero-pad inputs whose extents are not multiples of 2^levels and crop the
  /// outputs back; otherwise such inputs are rejected.
  bool pad_to_fit = false;

  void validate() const;
  int features(int level) const { return base_features << level; }
  /// Heads including the main one: 1, or min(levels + 1, ds_weights.size()).
  int num_heads() const;
};

/// Closed-form trainable parameter count of the recipe above.
std::size_t expected_parameter_count(const UNetConfig& cfg);

/// Config as `prefix`key=value lines, and back from a parsed key map.
void write_config(std::ostream& os, const std::string& prefix, const UNetConfig& c);
UNetConfig read_config(const std::map<std::string, std::string>& kv, const std::string& prefix);

template <typename T>
struct ConvBnRelu {
  Tensor<T> weight, bias, gamma, beta;
  gridnet::BatchNormStats<T> stats;
};

template <typename T>
struct UNetOutput {
  Tensor<T> logits;            // [out, D, H, W]
  std::vector<Tensor<T>> aux;  // aux[k-1]: [out, ceil(D/2^k), ...]
};

template <typename T>
class UNet {
 public:
  UNet() = default;
  /// He-initialized conv kernels, zero biases, gamma 1, beta 0.
  UNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }

  /// x: [in_channels, D, H, W].
  UNetOutput<T> forward(const Tensor<T>& x, Mode mode);

  /// Trainable tensors in a fixed order.
  std::vector<Tensor<T>> parameters() const;
  std::size_t parameter_count() const;

  /// Parameters and batch-norm running statistics as float arrays, names
  /// prefixed by `prefix`.
  std::vector<gridnet::NamedArray> export_arrays(const std::string& prefix) const;
  /// Inverse of export_arrays; throws if a name or size is missing or differs.
  void import_arrays(const std::vector<gridnet::NamedArray>& arrays, const std::string& prefix);

 private:
  struct Level {
    ConvBnRelu<T> down[2];
    Tensor<T> up_weight, up_bias;
    ConvBnRelu<T> up[2];
  };

  UNetConfig cfg_;
  std::vector<Level> levels_;
  std::vector<Tensor<T>> head_weight_, head_bias_;  // index k: resolution 1/2^k

  // fn(name, shape, values, trainable) over every stored array.
  template <typename Fn>
  void for_each_array(Fn&& fn);
};

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace dlf::unet
