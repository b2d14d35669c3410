#pragma once

#include "dlf/gridnet/tensor.hpp"

namespace dlf::gridnet {

inline constexpr double kDiceEps = 1e-5;

/// Generalized Dice loss over [L, ...] softmax predictions and a one-hot
/// ground truth of the same shape:
///
///   loss = 1 - 2 * sum_l w_l sum_n p_ln g_ln / sum_l w_l sum_n (p_ln + g_ln)
///   w_l  = 1 / (sum_n g_ln + eps)^2
///
/// Labels absent from the ground truth get w_l = 0; otherwise eps alone
/// would give them a weight of 1e10 and swamp every present label.
template <typename T>
Tensor<T> generalized_dice_loss(const Tensor<T>& pred, const Tensor<T>& gt_onehot);

}  // namespace dlf::gridnet
