#pragma once

#include <span>
#include <vector>

#include "dlf/gridnet/tensor.hpp"

namespace dlf::gridnet {

/// Adam hyperparameters plus a stepwise learning-rate decay.
struct OptimConfig {
  double lr0 = 5e-4;
  double decay_factor = 0.2;
  int decay_every_epochs = 2;
  int decay_start_epoch = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// DLF preset: x0.2 every 2 epochs from epoch 4.
OptimConfig dlf_optim_preset();
/// Baseline U-Net preset: x0.2 every 4 epochs from epoch 9.
OptimConfig unet_optim_preset();

/// Learning rate for a 1-based epoch:
///   lr0 * factor^k, k = 0 before decay_start, else 1 + (epoch - start) / every.
double learning_rate(const OptimConfig& cfg, int epoch);

template <typename T>
struct AdamMoments {
  std::vector<T> m;
  std::vector<T> v;
};

/// One Adam update with bias correction for step t >= 1:
///   m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2
///   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& state, long t, double lr,
               const OptimConfig& cfg);

/// Adam over a fixed parameter list; step() consumes and clears gradients.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, OptimConfig cfg);

  void zero_grad();
  void step(double lr);
  long steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<AdamMoments<T>> moments_;
  OptimConfig cfg_;
  long t_ = 0;
};

}  // namespace dlf::gridnet
