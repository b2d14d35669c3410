#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <type_traits>

#include "dlf/gridnet/ops.hpp"

namespace dlf::gridnet {

namespace {

// Wide accumulator used where reductions should be order-robust.
template <typename T>
using Wide = std::conditional_t<std::is_same_v<T, float>, double, long double>;

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

std::size_t spatial(const Shape& s) { return numel(s) / static_cast<std::size_t>(s.at(0)); }

}  // namespace

template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BatchNormStats<T>& stats, Mode mode) {
  if (x.shape().size() != 4) throw std::invalid_argument("batchnorm3d: expected [C,D,H,W]");
  const int channels = x.dim(0);
  const std::size_t n = spatial(x.shape());
  if (gamma.numel() != static_cast<std::size_t>(channels) || beta.numel() != static_cast<std::size_t>(channels) ||
      stats.running_mean.size() != static_cast<std::size_t>(channels))
    throw std::invalid_argument("batchnorm3d: parameter size mismatch");

  const auto xv = x.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(mode == Mode::Train ? xv.size() : 0);
  std::vector<T> inv_std(static_cast<std::size_t>(channels));
  for (int c = 0; c < channels; ++c) {
    const T* src = xv.data() + static_cast<std::size_t>(c) * n;
    T* dst = out.data() + static_cast<std::size_t>(c) * n;
    T mean, var;
    if (mode == Mode::Train) {
      Wide<T> s = 0;
      for (std::size_t i = 0; i < n; ++i) s += src[i];
      const Wide<T> m = s / static_cast<Wide<T>>(n);
      Wide<T> ss = 0;
      for (std::size_t i = 0; i < n; ++i) ss += (src[i] - m) * (src[i] - m);
      mean = static_cast<T>(m);
      var = static_cast<T>(ss / static_cast<Wide<T>>(n));
      const T unbiased = n > 1 ? static_cast<T>(ss / static_cast<Wide<T>>(n - 1)) : var;
      stats.running_mean[c] = (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * mean;
      stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    const T istd = T(1) / std::sqrt(var + stats.eps);
    inv_std[c] = istd;
    const T g = gamma.values()[c], bt = beta.values()[c];
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (src[i] - mean) * istd;
      if (mode == Mode::Train) xhat[static_cast<std::size_t>(c) * n + i] = h;
      dst[i] = g * h + bt;
    }
  }

  if (mode == Mode::Eval) {
    // Running statistics are constants: only the affine map and x carry gradient.
    std::vector<T> means(stats.running_mean);
    return Tensor<T>::make_result(x.shape(), std::move(out), {x, gamma, beta}, [channels, n, inv_std, means](Node<T>& self) {
      auto& xn = *self.parents[0];
      auto& gn = *self.parents[1];
      auto& bn = *self.parents[2];
      for (int c = 0; c < channels; ++c) {
        const std::size_t off = static_cast<std::size_t>(c) * n;
        const T* dy = self.grad.data() + off;
        const T* xs = xn.value.data() + off;
        Wide<T> sdy = 0, sdyh = 0;
        for (std::size_t i = 0; i < n; ++i) {
          sdy += dy[i];
          sdyh += dy[i] * (xs[i] - means[c]) * inv_std[c];
        }
        if (gn.requires_grad) gn.ensure_grad()[c] += static_cast<T>(sdyh);
        if (bn.requires_grad) bn.ensure_grad()[c] += static_cast<T>(sdy);
        if (xn.requires_grad) {
          T* dx = xn.ensure_grad().data() + off;
          const T f = gn.value[c] * inv_std[c];
          for (std::size_t i = 0; i < n; ++i) dx[i] += f * dy[i];
        }
      }
    });
  }

  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [channels, n, inv_std, xhat = std::move(xhat)](Node<T>& self) {
        auto& xn = *self.parents[0];
        auto& gn = *self.parents[1];
        auto& bn = *self.parents[2];
        for (int c = 0; c < channels; ++c) {
          const std::size_t off = static_cast<std::size_t>(c) * n;
          const T* dy = self.grad.data() + off;
          const T* h = xhat.data() + off;
          Wide<T> sdy = 0, sdyh = 0;
          for (std::size_t i = 0; i < n; ++i) {
            sdy += dy[i];
            sdyh += dy[i] * h[i];
          }
          if (gn.requires_grad) gn.ensure_grad()[c] += static_cast<T>(sdyh);
          if (bn.requires_grad) bn.ensure_grad()[c] += static_cast<T>(sdy);
          if (xn.requires_grad) {
            T* dx = xn.ensure_grad().data() + off;
            const T mdy = static_cast<T>(sdy / static_cast<Wide<T>>(n));
            const T mdyh = static_cast<T>(sdyh / static_cast<Wide<T>>(n));
            const T f = gn.value[c] * inv_std[c];
            for (std::size_t i = 0; i < n; ++i) dx[i] += f * (dy[i] - mdy - h[i] * mdyh);
          }
        }
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T(0) || std::isnan(xv[i]) ? xv[i] : T(0);  // NaN passes through
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    auto& xn = *self.parents[0];
    auto& dx = xn.ensure_grad();
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (xn.value[i] > T(0)) dx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
  if (x.shape().size() != 4) throw std::invalid_argument("maxpool3d: expected [C,D,H,W]");
  const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (d % 2 || h % 2 || w % 2) throw std::invalid_argument("maxpool3d: odd spatial extent " + shape_string(x.shape()));
  const int od = d / 2, oh = h / 2, ow = w / 2;
  const auto xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(c) * od * oh * ow);
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < od; ++z)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx, ++o) {
          std::size_t best = 0;
          bool first = true;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i = ((static_cast<std::size_t>(ch) * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                if (first || xv[i] > xv[best]) {
                  best = i;
                  first = false;
                }
              }
          out[o] = xv[best];
          arg[o] = best;
        }
  return Tensor<T>::make_result({c, od, oh, ow}, std::move(out), {x}, [arg = std::move(arg)](Node<T>& self) {
    auto& dx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw std::invalid_argument("concat: no inputs");
  Shape shape = xs[0].shape();
  int channels = 0;
  for (const auto& t : xs) {
    if (t.shape().size() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), t.shape().begin() + 1))
      throw std::invalid_argument("concat: trailing shapes differ " + shape_string(shape) + " vs " + shape_string(t.shape()));
    channels += t.dim(0);
  }
  shape[0] = channels;
  std::vector<T> out;
  out.reserve(numel(shape));
  std::vector<std::size_t> offsets;
  for (const auto& t : xs) {
    offsets.push_back(out.size());
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return Tensor<T>::make_result(shape, std::move(out), std::vector<Tensor<T>>(xs.begin(), xs.end()),
                                [offsets](Node<T>& self) {
                                  for (std::size_t p = 0; p < self.parents.size(); ++p) {
                                    auto& pn = *self.parents[p];
                                    if (!pn.requires_grad) continue;
                                    auto& g = pn.ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
                                  }
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      auto& g = an.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto& g = bn.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an.value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> mean_over(std::span<const Tensor<T>> xs) {
  if (xs.empty()) throw std::invalid_argument("mean_over: empty list");
  for (const auto& t : xs) require_same_shape(xs[0].shape(), t.shape(), "mean_over");
  const std::size_t n = xs[0].numel();
  const auto k = static_cast<Wide<T>>(xs.size());
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Wide<T> s = 0;
    for (const auto& t : xs) s += t.values()[i];
    out[i] = static_cast<T>(s / k);
  }
  const T inv = static_cast<T>(Wide<T>(1) / k);
  return Tensor<T>::make_result(xs[0].shape(), std::move(out), std::vector<Tensor<T>>(xs.begin(), xs.end()),
                                [inv](Node<T>& self) {
                                  for (auto& p : self.parents) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += inv * self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Wide<T> s = 0;
  for (T v : x.values()) s += v;
  return Tensor<T>::make_result({1}, {static_cast<T>(s)}, {x}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> weighted_sum(std::span<const Tensor<T>> xs, std::span<const double> weights) {
  if (xs.size() != weights.size()) throw std::invalid_argument("weighted_sum: count mismatch");
  if (xs.empty()) throw std::invalid_argument("weighted_sum: empty list");
  Wide<T> s = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    if (xs[k].numel() != 1) throw std::invalid_argument("weighted_sum: inputs must be scalars");
    s += static_cast<Wide<T>>(weights[k]) * xs[k].item();
  }
  std::vector<double> w(weights.begin(), weights.end());
  return Tensor<T>::make_result({1}, {static_cast<T>(s)}, std::vector<Tensor<T>>(xs.begin(), xs.end()),
                                [w](Node<T>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k)
                                    if (self.parents[k]->requires_grad)
                                      self.parents[k]->ensure_grad()[0] += static_cast<T>(w[k]) * self.grad[0];
                                });
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& x) {
  if (x.shape().empty()) throw std::invalid_argument("softmax_channels: scalar input");
  const int c = x.dim(0);
  const std::size_t n = spatial(x.shape());
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < n; ++i) {
    T mx = xv[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, xv[k * n + i]);
    T s = 0;
    for (int k = 0; k < c; ++k) {
      out[k * n + i] = std::exp(xv[k * n + i] - mx);
      s += out[k * n + i];
    }
    for (int k = 0; k < c; ++k) out[k * n + i] /= s;
  }
  std::vector<T> saved = out;
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [c, n, p = std::move(saved)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (int k = 0; k < c; ++k) dot += self.grad[k * n + i] * p[k * n + i];
      for (int k = 0; k < c; ++k) g[k * n + i] += p[k * n + i] * (self.grad[k * n + i] - dot);
    }
  });
}

template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, int d, int h, int w) {
  if (x.shape().size() != 4) throw std::invalid_argument("pad_spatial: expected [C,D,H,W]");
  const int c = x.dim(0), xd = x.dim(1), xh = x.dim(2), xw = x.dim(3);
  if (d < xd || h < xh || w < xw) throw std::invalid_argument("pad_spatial: target smaller than input");
  std::vector<T> out(static_cast<std::size_t>(c) * d * h * w, T(0));
  auto dst_index = [=](int ch, int z, int y) { return ((static_cast<std::size_t>(ch) * d + z) * h + y) * w; };
  auto src_index = [=](int ch, int z, int y) { return ((static_cast<std::size_t>(ch) * xd + z) * xh + y) * xw; };
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < xd; ++z)
      for (int y = 0; y < xh; ++y)
        std::copy_n(x.values().data() + src_index(ch, z, y), xw, out.data() + dst_index(ch, z, y));
  return Tensor<T>::make_result({c, d, h, w}, std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int z = 0; z < xd; ++z)
        for (int y = 0; y < xh; ++y)
          for (int xx = 0; xx < xw; ++xx) g[src_index(ch, z, y) + xx] += self.grad[dst_index(ch, z, y) + xx];
  });
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& x, int d, int h, int w) {
  if (x.shape().size() != 4) throw std::invalid_argument("crop_spatial: expected [C,D,H,W]");
  const int c = x.dim(0), xd = x.dim(1), xh = x.dim(2), xw = x.dim(3);
  if (d > xd || h > xh || w > xw || d < 1 || h < 1 || w < 1) throw std::invalid_argument("crop_spatial: bad target extent");
  std::vector<T> out(static_cast<std::size_t>(c) * d * h * w);
  auto dst_index = [=](int ch, int z, int y) { return ((static_cast<std::size_t>(ch) * d + z) * h + y) * w; };
  auto src_index = [=](int ch, int z, int y) { return ((static_cast<std::size_t>(ch) * xd + z) * xh + y) * xw; };
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        std::copy_n(x.values().data() + src_index(ch, z, y), w, out.data() + dst_index(ch, z, y));
  return Tensor<T>::make_result({c, d, h, w}, std::move(out), {x}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) g[src_index(ch, z, y) + xx] += self.grad[dst_index(ch, z, y) + xx];
  });
}

#define DLF_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> batchnorm3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormStats<T>&, \
                                 Mode);                                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                                \
  template Tensor<T> maxpool3d(const Tensor<T>&);                                                           \
  template Tensor<T> concat(std::span<const Tensor<T>>);                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                            \
  template Tensor<T> mean_over(std::span<const Tensor<T>>);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                                 \
  template Tensor<T> weighted_sum(std::span<const Tensor<T>>, std::span<const double>);                     \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                                    \
  template Tensor<T> pad_spatial(const Tensor<T>&, int, int, int);                                          \
  template Tensor<T> crop_spatial(const Tensor<T>&, int, int, int);

DLF_INSTANTIATE_OPS(float)
DLF_INSTANTIATE_OPS(double)

}  // namespace dlf::gridnet
