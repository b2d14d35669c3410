#include "dlf/gridnet/loss.hpp"

#include <stdexcept>
#include <vector>

namespace dlf::gridnet {

template <typename T>
Tensor<T> generalized_dice_loss(const Tensor<T>& pred, const Tensor<T>& gt_onehot) {
  if (pred.shape() != gt_onehot.shape())
    throw std::invalid_argument("generalized_dice_loss: shape mismatch " + shape_string(pred.shape()) + " vs " +
                                shape_string(gt_onehot.shape()));
  const int labels = pred.dim(0);
  const std::size_t n = pred.numel() / static_cast<std::size_t>(labels);
  const auto p = pred.values();
  const auto g = gt_onehot.values();

  std::vector<double> w(static_cast<std::size_t>(labels), 0.0);
  double num = 0.0, den = 0.0;
  for (int l = 0; l < labels; ++l) {
    double sp = 0.0, sg = 0.0, spg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double pv = p[l * n + i], gv = g[l * n + i];
      sp += pv;
      sg += gv;
      spg += pv * gv;
    }
    if (sg > 0.0) w[l] = 1.0 / ((sg + kDiceEps) * (sg + kDiceEps));
    num += w[l] * spg;
    den += w[l] * (sp + sg);
  }
  if (den <= 0.0) throw std::invalid_argument("generalized_dice_loss: empty ground truth");
  const double loss = 1.0 - 2.0 * num / den;

  return Tensor<T>::make_result({1}, {static_cast<T>(loss)}, {pred}, [=](Node<T>& self) {
    // d loss / d p_ln = -2 w_l (g_ln * den - num) / den^2
    auto& dp = self.parents[0]->ensure_grad();
    const double seed = self.grad[0];
    const auto gv = gt_onehot.values();
    for (int l = 0; l < labels; ++l) {
      if (w[l] == 0.0) continue;
      const double a = -2.0 * w[l] / (den * den) * seed;
      for (std::size_t i = 0; i < n; ++i) dp[l * n + i] += static_cast<T>(a * (gv[l * n + i] * den - num));
    }
  });
}

template Tensor<float> generalized_dice_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> generalized_dice_loss(const Tensor<double>&, const Tensor<double>&);

}  // namespace dlf::gridnet
