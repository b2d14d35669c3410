#include "dlf/deepfusion.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "dlf/gridnet/checkpoint.hpp"
#include "dlf/gridnet/loss.hpp"

namespace dlf::deepfusion {

using gridnet::Shape;

DlfConfig DlfConfig::make(int num_labels, int base_features) {
  DlfConfig c;
  c.num_labels = num_labels;
  c.wv.in_channels = 7;
  c.wv.out_channels = num_labels;
  c.wv.levels = 3;
  c.wv.base_features = base_features;
  c.wv.deep_supervision = false;
  c.ft.in_channels = num_labels + 3;
  c.ft.out_channels = num_labels;
  c.ft.levels = 4;
  c.ft.base_features = base_features;
  c.ft.deep_supervision = true;
  c.ft.ds_weights = {1.0, 0.5, 0.2, 0.1};
  c.ft.pad_to_fit = true;
  return c;
}

void DlfConfig::validate() const {
  if (num_labels < 2) throw std::invalid_argument("dlf: num_labels must be >= 2");
  if (!(mask_threshold >= 0.0 && mask_threshold <= 1.0)) throw std::invalid_argument("dlf: mask threshold must be in [0, 1]");
  if (wv.out_channels != num_labels || ft.out_channels != num_labels)
    throw std::invalid_argument("dlf: both subnets must output num_labels channels");
  if (wv.in_channels != 7) throw std::invalid_argument("dlf: weighted-voting subnet takes 7 input channels");
  if (ft.in_channels != num_labels + 3) throw std::invalid_argument("dlf: fine-tuning subnet takes L + 3 input channels");
  wv.validate();
  ft.validate();
}

template <typename T>
Tensor<T> compose_votes(const Tensor<T>& W, const Tensor<T>& S) {
  if (W.shape() != S.shape())
    throw std::invalid_argument("compose_votes: shape mismatch " + gridnet::shape_string(W.shape()) + " vs " + gridnet::shape_string(S.shape()));
  return gridnet::mul(W, S);
}

template <typename T>
Tensor<T> average_votes(std::span<const Tensor<T>> V) {
  if (V.empty()) throw std::invalid_argument("average_votes: no atlases");
  return gridnet::mean_over(V);
}

template <typename T>
Tensor<T> atlas_mask(std::span<const Tensor<T>> S, double tau) {
  if (S.empty()) throw std::invalid_argument("atlas_mask: no atlases");
  const Shape shape = S[0].shape();
  const std::size_t n = S[0].numel();
  const std::size_t plane = n / static_cast<std::size_t>(shape[0]);
  std::vector<double> count(n, 0.0);
  for (const auto& s : S) {
    if (s.shape() != shape) throw std::invalid_argument("atlas_mask: shape mismatch");
    const auto v = s.values();
    for (std::size_t i = 0; i < n; ++i) count[i] += static_cast<double>(v[i]);
  }
  const double N = static_cast<double>(S.size());
  std::vector<T> mask(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = (i < plane || count[i] / N >= tau) ? T(1) : T(0);
  return Tensor<T>(shape, std::move(mask));
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

template <typename T>
DlfModel<T>::DlfModel(const DlfConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  wv_ = unet::UNet<T>(cfg_.wv, mix(seed));
  ft_ = unet::UNet<T>(cfg_.ft, mix(seed + 1));
}

template <typename T>
DlfOutput<T> DlfModel<T>::forward(const Tensor<T>& target, const Tensor<T>& coords,
                                  std::span<const AtlasInput<T>> atlases, Mode mode) {
  if (atlases.empty()) throw std::invalid_argument("dlf: at least one atlas is required");
  const int L = cfg_.num_labels;
  if (target.shape().size() != 4 || target.dim(0) != 2) throw std::invalid_argument("dlf: target must be [2, D, H, W]");
  const Shape spatial{target.dim(1), target.dim(2), target.dim(3)};
  if (coords.shape() != Shape{3, spatial[0], spatial[1], spatial[2]}) throw std::invalid_argument("dlf: coords must be [3, D, H, W]");
  const Shape lshape{L, spatial[0], spatial[1], spatial[2]};

  DlfOutput<T> out;
  auto& P = out.parts;
  for (const auto& a : atlases) {
    if (a.image.shape() != target.shape()) throw std::invalid_argument("dlf: atlas image shape differs from target");
    if (a.onehot.shape() != lshape) throw std::invalid_argument("dlf: atlas one-hot must be [L, D, H, W]");
    Tensor<T> W;
    if (cfg_.ablate_wv) {
      W = Tensor<T>::full(lshape, T(1));
      P.V.push_back(a.onehot);
    } else {
      std::vector<Tensor<T>> parts{target, a.image, coords};
      W = wv_.forward(gridnet::concat<T>(parts), mode).logits;
      P.V.push_back(compose_votes(W, a.onehot));
    }
    P.W.push_back(W);
    P.S.push_back(a.onehot);
  }
  P.S_init = average_votes<T>(P.V);
  P.mask = cfg_.ablate_mask ? Tensor<T>::full(lshape, T(1)) : atlas_mask<T>(P.S, cfg_.mask_threshold);

  Tensor<T> features = P.S_init;
  if (!cfg_.ablate_ft) {
    std::vector<Tensor<T>> parts{P.S_init, coords};
    auto ft = ft_.forward(gridnet::concat<T>(parts), mode);
    features = ft.logits;
    out.aux = std::move(ft.aux);
  }
  out.logits = gridnet::mul(features, P.mask);
  return out;
}

template <typename T>
std::vector<Tensor<T>> DlfModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  if (!cfg_.ablate_wv) out = wv_.parameters();
  if (!cfg_.ablate_ft) {
    auto f = ft_.parameters();
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

template <typename T>
void DlfModel<T>::save(const std::filesystem::path& dir) const {
  auto arrays = wv_.export_arrays("wv.");
  auto f = ft_.export_arrays("ft.");
  arrays.insert(arrays.end(), f.begin(), f.end());
  gridnet::save_checkpoint(dir, arrays);
  std::ofstream os(dir / "config.txt", std::ios::trunc);
  os.precision(17);
  os << "model=dlf\n"
     << "num_labels=" << cfg_.num_labels << '\n'
     << "mask_threshold=" << cfg_.mask_threshold << '\n'
     << "ablate_wv=" << cfg_.ablate_wv << '\n'
     << "ablate_ft=" << cfg_.ablate_ft << '\n'
     << "ablate_mask=" << cfg_.ablate_mask << '\n';
  unet::write_config(os, "wv.", cfg_.wv);
  unet::write_config(os, "ft.", cfg_.ft);
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
}

template <typename T>
DlfModel<T> DlfModel<T>::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.txt");
  if (!is) throw std::runtime_error("missing model config in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["model"] != "dlf") throw std::runtime_error(dir.string() + " is not a DLF checkpoint");
  DlfConfig c;
  c.num_labels = std::stoi(kv.at("num_labels"));
  c.mask_threshold = std::stod(kv.at("mask_threshold"));
  c.ablate_wv = kv.at("ablate_wv") == "1";
  c.ablate_ft = kv.at("ablate_ft") == "1";
  c.ablate_mask = kv.at("ablate_mask") == "1";
  c.wv = unet::read_config(kv, "wv.");
  c.ft = unet::read_config(kv, "ft.");
  DlfModel m(c, 0);
  const auto arrays = gridnet::load_checkpoint(dir);
  m.wv_.import_arrays(arrays, "wv.");
  m.ft_.import_arrays(arrays, "ft.");
  return m;
}

template <typename T>
Tensor<T> downsample_nearest(const Tensor<T>& onehot, int k) {
  if (k == 0) return onehot;
  const int s = 1 << k;
  const int C = onehot.dim(0), D = onehot.dim(1), H = onehot.dim(2), W = onehot.dim(3);
  const int d = (D + s - 1) / s, h = (H + s - 1) / s, w = (W + s - 1) / s;
  std::vector<T> out(static_cast<std::size_t>(C) * d * h * w);
  const auto in = onehot.values();
  std::size_t o = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < d; ++z)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out[o++] = in[((static_cast<std::size_t>(c) * D + z * s) * H + y * s) * W + x * s];
  return Tensor<T>({C, d, h, w}, std::move(out));
}

template <typename T>
Tensor<T> deep_supervision_loss(const Tensor<T>& main_logits, std::span<const Tensor<T>> aux, const Tensor<T>& gt,
                                std::span<const double> weights) {
  if (aux.size() + 1 != weights.size())
    throw std::invalid_argument("deep_supervision_loss: " + std::to_string(aux.size() + 1) + " levels but " +
                                std::to_string(weights.size()) + " weights");
  std::vector<Tensor<T>> terms;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const Tensor<T>& logits = k == 0 ? main_logits : aux[k - 1];
    auto g = downsample_nearest(gt, static_cast<int>(k));
    if (g.shape() != logits.shape())
      throw std::invalid_argument("deep_supervision_loss: level " + std::to_string(k) + " logits " +
                                  gridnet::shape_string(logits.shape()) + " vs target " + gridnet::shape_string(g.shape()));
    terms.push_back(gridnet::generalized_dice_loss(gridnet::softmax_channels(logits), g));
  }
  return gridnet::weighted_sum<T>(terms, weights);
}

template <typename T>
Tensor<T> to_tensor(const Volume& v) {
  const auto& d = v.dims();
  return Tensor<T>({v.channels(), d.z, d.y, d.x}, std::vector<T>(v.data().begin(), v.data().end()));
}

template <typename T>
Tensor<T> to_tensor(const LabelMap& lm, int num_labels) {
  return to_tensor<T>(volcore::one_hot(lm, num_labels));
}

template <typename T>
Volume to_volume(const Tensor<T>& t, volcore::Spacing spacing) {
  if (t.shape().size() != 4) throw std::invalid_argument("to_volume: expected [C, D, H, W]");
  std::vector<float> data(t.values().begin(), t.values().end());
  return Volume({t.dim(3), t.dim(2), t.dim(1)}, t.dim(0), std::move(data), spacing);
}

PatchPrediction predict(DlfModel<float>& model, const Volume& target, const Volume& coords,
                        std::span<const volcore::AtlasBundle> atlases) {
  gridnet::NoGradGuard guard;
  const int L = model.config().num_labels;
  std::vector<AtlasInput<float>> in;
  for (const auto& a : atlases) in.push_back({to_tensor<float>(a.image), to_tensor<float>(a.labels, L)});
  auto out = model.forward(to_tensor<float>(target), to_tensor<float>(coords), in, Mode::Eval);
  PatchPrediction p;
  p.logits = to_volume(out.logits, target.spacing());
  p.labels = volcore::argmax(p.logits);
  return p;
}

#define DLF_INSTANTIATE(T)                                                                                      \
  template Tensor<T> compose_votes(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> average_votes(std::span<const Tensor<T>>);                                               \
  template Tensor<T> atlas_mask(std::span<const Tensor<T>>, double);                                          \
  template class DlfModel<T>;                                                                                 \
  template Tensor<T> downsample_nearest(const Tensor<T>&, int);                                               \
  template Tensor<T> deep_supervision_loss(const Tensor<T>&, std::span<const Tensor<T>>, const Tensor<T>&,    \
                                           std::span<const double>);                                          \
  template Tensor<T> to_tensor(const Volume&);                                                                \
  template Tensor<T> to_tensor(const LabelMap&, int);                                                         \
  template Volume to_volume(const Tensor<T>&, volcore::Spacing);

DLF_INSTANTIATE(float)
DLF_INSTANTIATE(double)

}  // namespace dlf::deepfusion
