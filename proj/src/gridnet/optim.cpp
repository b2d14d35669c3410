#include "dlf/gridnet/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dlf::gridnet {

void OptimConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be > 0");
  if (!(decay_factor > 0.0 && decay_factor < 1.0)) throw std::invalid_argument("decay_factor must be in (0, 1)");
  if (decay_every_epochs < 1) throw std::invalid_argument("decay_every_epochs must be >= 1");
  if (decay_start_epoch < 1) throw std::invalid_argument("decay_start_epoch must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("Adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("Adam eps must be > 0");
}

OptimConfig dlf_optim_preset() { return OptimConfig{}; }

OptimConfig unet_optim_preset() {
  OptimConfig c;
  c.decay_every_epochs = 4;
  c.decay_start_epoch = 9;
  return c;
}

double learning_rate(const OptimConfig& cfg, int epoch) {
  if (epoch < 1) throw std::invalid_argument("epochs are 1-based");
  if (epoch < cfg.decay_start_epoch) return cfg.lr0;
  const int k = 1 + (epoch - cfg.decay_start_epoch) / cfg.decay_every_epochs;
  return cfg.lr0 * std::pow(cfg.decay_factor, k);
}

template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, AdamMoments<T>& state, long t, double lr,
               const OptimConfig& cfg) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  if (grads.size() != params.size()) throw std::invalid_argument("adam_step: size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    params[i] -= static_cast<T>(lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps));
  }
}

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, OptimConfig cfg)
    : params_(std::move(params)), moments_(params_.size()), cfg_(cfg) {
  cfg_.validate();
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    const std::vector<T> g = p.grad();
    adam_step<T>(p.mutable_values(), g, moments_[k], t_, lr, cfg_);
  }
  zero_grad();
}

template void adam_step<float>(std::span<float>, std::span<const float>, AdamMoments<float>&, long, double, const OptimConfig&);
template void adam_step<double>(std::span<double>, std::span<const double>, AdamMoments<double>&, long, double, const OptimConfig&);
template class Adam<float>;
template class Adam<double>;

}  // namespace dlf::gridnet
