#include "dlf/unet.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>

namespace dlf::unet {

using gridnet::NamedArray;
using gridnet::Shape;

void UNetConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("unet: channel counts must be >= 1");
  if (levels < 1) throw std::invalid_argument("unet: levels must be >= 1");
  if (base_features < 1) throw std::invalid_argument("unet: base_features must be >= 1");
  if (levels > 8) throw std::invalid_argument("unet: levels must be <= 8");
  if (deep_supervision && ds_weights.empty()) throw std::invalid_argument("unet: deep supervision needs weights");
}

int UNetConfig::num_heads() const {
  if (!deep_supervision) return 1;
  return std::min(levels + 1, static_cast<int>(ds_weights.size()));
}

std::size_t expected_parameter_count(const UNetConfig& cfg) {
  cfg.validate();
  auto conv = [](std::size_t cin, std::size_t cout) { return cin * cout * 27 + cout; };
  auto cbr = [&](std::size_t cin, std::size_t cout) { return conv(cin, cout) + 2 * cout; };
  std::size_t n = 0;
  for (int j = 0; j < cfg.levels; ++j) {
    const std::size_t f = cfg.features(j);
    const std::size_t fin = j == 0 ? cfg.in_channels : cfg.features(j - 1);
    const std::size_t below = j == cfg.levels - 1 ? f : cfg.features(j + 1);
    n += cbr(fin, f) + cbr(f, f);          // encoder
    n += conv(below, f);                   // transpose conv
    n += cbr(2 * f, f) + cbr(f, f);        // decoder
  }
  for (int k = 0; k < cfg.num_heads(); ++k) {
    const std::size_t f = cfg.features(std::min(k, cfg.levels - 1));
    n += f * cfg.out_channels + cfg.out_channels;
  }
  return n;
}

namespace {

template <typename T>
Tensor<T> he_normal(Shape shape, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
  std::vector<T> v(gridnet::numel(shape));
  for (auto& x : v) x = static_cast<T>(n(rng));
  return Tensor<T>(std::move(shape), std::move(v), true);
}

template <typename T>
ConvBnRelu<T> make_cbr(int cin, int cout, std::mt19937_64& rng) {
  ConvBnRelu<T> c;
  c.weight = he_normal<T>({cout, cin, 3, 3, 3}, cin * 27, rng);
  c.bias = Tensor<T>({cout}, true);
  c.gamma = Tensor<T>({cout}, std::vector<T>(cout, T(1)), true);
  c.beta = Tensor<T>({cout}, true);
  c.stats = gridnet::BatchNormStats<T>(cout);
  return c;
}

template <typename T>
Tensor<T> apply(ConvBnRelu<T>& c, const Tensor<T>& x, Mode mode) {
  return gridnet::relu(gridnet::batchnorm3d(gridnet::conv3d(x, c.weight, c.bias, 1, 1), c.gamma, c.beta, c.stats, mode));
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

}  // namespace

template <typename T>
UNet<T>::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  levels_.resize(cfg_.levels);
  for (int j = 0; j < cfg_.levels; ++j) {
    const int f = cfg_.features(j);
    const int fin = j == 0 ? cfg_.in_channels : cfg_.features(j - 1);
    levels_[j].down[0] = make_cbr<T>(fin, f, rng);
    levels_[j].down[1] = make_cbr<T>(f, f, rng);
  }
  for (int j = cfg_.levels - 1; j >= 0; --j) {
    const int f = cfg_.features(j);
    const int below = j == cfg_.levels - 1 ? f : cfg_.features(j + 1);
    levels_[j].up_weight = he_normal<T>({below, f, 3, 3, 3}, below * 27, rng);
    levels_[j].up_bias = Tensor<T>({f}, true);
    levels_[j].up[0] = make_cbr<T>(2 * f, f, rng);
    levels_[j].up[1] = make_cbr<T>(f, f, rng);
  }
  for (int k = 0; k < cfg_.num_heads(); ++k) {
    const int f = cfg_.features(std::min(k, cfg_.levels - 1));
    head_weight_.push_back(he_normal<T>({cfg_.out_channels, f, 1, 1, 1}, f, rng));
    head_bias_.push_back(Tensor<T>({cfg_.out_channels}, true));
  }
}

template <typename T>
UNetOutput<T> UNet<T>::forward(const Tensor<T>& x, Mode mode) {
  if (levels_.empty()) throw std::logic_error("unet: forward on an unbuilt network");
  if (x.shape().size() != 4 || x.dim(0) != cfg_.in_channels)
    throw std::invalid_argument("unet: expected input [" + std::to_string(cfg_.in_channels) + ",D,H,W], got " +
                                gridnet::shape_string(x.shape()));
  const int m = 1 << cfg_.levels;
  const int d = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> in = x;
  if (d % m || h % m || w % m) {
    if (!cfg_.pad_to_fit)
      throw std::invalid_argument("unet: spatial dims " + gridnet::shape_string(x.shape()) + " not divisible by " +
                                  std::to_string(m));
    in = gridnet::pad_spatial(x, ceil_div(d, m) * m, ceil_div(h, m) * m, ceil_div(w, m) * m);
  }

  std::vector<Tensor<T>> skips;
  Tensor<T> cur = in;
  for (auto& lv : levels_) {
    cur = apply(lv.down[1], apply(lv.down[0], cur, mode), mode);
    skips.push_back(cur);
    cur = gridnet::maxpool3d(cur);
  }

  const int heads = cfg_.num_heads();
  std::vector<Tensor<T>> head_in(heads);
  if (heads > cfg_.levels) head_in[cfg_.levels] = cur;
  for (int j = cfg_.levels - 1; j >= 0; --j) {
    auto& lv = levels_[j];
    auto up = gridnet::conv_transpose3d(cur, lv.up_weight, lv.up_bias);
    std::vector<Tensor<T>> parts{up, skips[j]};
    cur = apply(lv.up[1], apply(lv.up[0], gridnet::concat<T>(parts), mode), mode);
    if (j < heads) head_in[j] = cur;
  }

  UNetOutput<T> out;
  for (int k = 0; k < heads; ++k) {
    auto logits = gridnet::conv3d(head_in[k], head_weight_[k], head_bias_[k], 1, 0);
    const int s = 1 << k;
    const int cd = ceil_div(d, s), ch = ceil_div(h, s), cw = ceil_div(w, s);
    if (logits.dim(1) != cd || logits.dim(2) != ch || logits.dim(3) != cw) logits = gridnet::crop_spatial(logits, cd, ch, cw);
    if (k == 0)
      out.logits = logits;
    else
      out.aux.push_back(logits);
  }
  return out;
}

template <typename T>
template <typename Fn>
void UNet<T>::for_each_array(Fn&& fn) {
  auto tensor = [&](const std::string& name, Tensor<T>& t) { fn(name, t.shape(), t.mutable_values(), true); };
  auto cbr = [&](const std::string& name, ConvBnRelu<T>& c) {
    tensor(name + ".weight", c.weight);
    tensor(name + ".bias", c.bias);
    tensor(name + ".gamma", c.gamma);
    tensor(name + ".beta", c.beta);
    const Shape s{static_cast<int>(c.stats.running_mean.size())};
    fn(name + ".running_mean", s, std::span<T>(c.stats.running_mean), false);
    fn(name + ".running_var", s, std::span<T>(c.stats.running_var), false);
  };
  for (int j = 0; j < cfg_.levels; ++j) {
    const std::string p = "down" + std::to_string(j);
    cbr(p + ".conv0", levels_[j].down[0]);
    cbr(p + ".conv1", levels_[j].down[1]);
  }
  for (int j = cfg_.levels - 1; j >= 0; --j) {
    const std::string p = "up" + std::to_string(j);
    tensor(p + ".tconv.weight", levels_[j].up_weight);
    tensor(p + ".tconv.bias", levels_[j].up_bias);
    cbr(p + ".conv0", levels_[j].up[0]);
    cbr(p + ".conv1", levels_[j].up[1]);
  }
  for (std::size_t k = 0; k < head_weight_.size(); ++k) {
    tensor("head" + std::to_string(k) + ".weight", head_weight_[k]);
    tensor("head" + std::to_string(k) + ".bias", head_bias_[k]);
  }
}

template <typename T>
std::vector<Tensor<T>> UNet<T>::parameters() const {
  std::vector<Tensor<T>> out;
  auto cbr = [&](const ConvBnRelu<T>& c) {
    out.insert(out.end(), {c.weight, c.bias, c.gamma, c.beta});
  };
  for (const auto& lv : levels_) {
    cbr(lv.down[0]);
    cbr(lv.down[1]);
  }
  for (int j = cfg_.levels - 1; j >= 0; --j) {
    out.push_back(levels_[j].up_weight);
    out.push_back(levels_[j].up_bias);
    cbr(levels_[j].up[0]);
    cbr(levels_[j].up[1]);
  }
  for (std::size_t k = 0; k < head_weight_.size(); ++k) {
    out.push_back(head_weight_[k]);
    out.push_back(head_bias_[k]);
  }
  return out;
}

template <typename T>
std::size_t UNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

template <typename T>
std::vector<NamedArray> UNet<T>::export_arrays(const std::string& prefix) const {
  std::vector<NamedArray> out;
  const_cast<UNet*>(this)->for_each_array([&](const std::string& name, const Shape& shape, std::span<T> v, bool) {
    out.push_back({prefix + name, shape, std::vector<float>(v.begin(), v.end())});
  });
  return out;
}

template <typename T>
void UNet<T>::import_arrays(const std::vector<NamedArray>& arrays, const std::string& prefix) {
  for_each_array([&](const std::string& name, const Shape& shape, std::span<T> v, bool) {
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == prefix + name; });
    if (it == arrays.end()) throw std::runtime_error("checkpoint is missing array " + prefix + name);
    if (it->shape != shape || it->values.size() != v.size())
      throw std::runtime_error("checkpoint array " + prefix + name + " has shape " + gridnet::shape_string(it->shape) +
                               ", expected " + gridnet::shape_string(shape));
    std::transform(it->values.begin(), it->values.end(), v.begin(), [](float f) { return static_cast<T>(f); });
  });
}

template class UNet<float>;
template class UNet<double>;

void write_config(std::ostream& os, const std::string& p, const UNetConfig& c) {
  os << p << "in_channels=" << c.in_channels << '\n'
     << p << "out_channels=" << c.out_channels << '\n'
     << p << "levels=" << c.levels << '\n'
     << p << "base_features=" << c.base_features << '\n'
     << p << "deep_supervision=" << c.deep_supervision << '\n'
     << p << "pad_to_fit=" << c.pad_to_fit << '\n'
     << p << "ds_weights=";
  for (std::size_t i = 0; i < c.ds_weights.size(); ++i) os << (i ? "," : "") << c.ds_weights[i];
  os << '\n';
}

UNetConfig read_config(const std::map<std::string, std::string>& kv, const std::string& p) {
  auto get = [&](const std::string& k) {
    auto it = kv.find(p + k);
    if (it == kv.end()) throw std::runtime_error("model config is missing " + p + k);
    return it->second;
  };
  UNetConfig c;
  c.in_channels = std::stoi(get("in_channels"));
  c.out_channels = std::stoi(get("out_channels"));
  c.levels = std::stoi(get("levels"));
  c.base_features = std::stoi(get("base_features"));
  c.deep_supervision = get("deep_supervision") == "1";
  c.pad_to_fit = get("pad_to_fit") == "1";
  c.ds_weights.clear();
  std::stringstream ss(get("ds_weights"));
  std::string item;
  while (std::getline(ss, item, ',')) c.ds_weights.push_back(std::stod(item));
  return c;
}

}  // namespace dlf::unet
