#include "dlf/classicfusion.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "dlf/parallel.hpp"

namespace dlf::classicfusion {

void FusionParams::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("fusion: beta must be > 0");
  for (int a = 0; a < 3; ++a)
    if (patch_radius[a] < 0 || search_radius[a] < 0) throw std::invalid_argument("fusion: radii must be >= 0");
  if (!(ridge >= 0.0)) throw std::invalid_argument("fusion: ridge must be >= 0");
}

FusionParams svwv_defaults() {
  FusionParams p;
  p.beta = 0.05;
  p.search_radius = {4, 4, 1};
  return p;
}

FusionParams jlf_defaults() {
  FusionParams p;
  p.beta = 2.0;
  p.search_radius = {3, 3, 1};
  return p;
}

namespace {

void require_same_dims(const Dims& a, const Dims& b, const char* what) {
  if (!(a == b)) throw std::invalid_argument(std::string(what) + ": dims mismatch " + volcore::to_string(a) + " vs " + volcore::to_string(b));
}

bool inside(const Dims& d, int x, int y, int z) { return x >= 0 && y >= 0 && z >= 0 && x < d.x && y < d.y && z < d.z; }

// Search order: |d|_1 ascending, then lexicographic (dx, dy, dz). Scanning in
// this order and replacing only on strict improvement implements the tie rule.
std::vector<Index3> ordered_displacements(const Radius& r) {
  std::vector<Index3> ds;
  for (int dx = -r.x; dx <= r.x; ++dx)
    for (int dy = -r.y; dy <= r.y; ++dy)
      for (int dz = -r.z; dz <= r.z; ++dz) ds.push_back({dx, dy, dz});
  std::stable_sort(ds.begin(), ds.end(), [](const Index3& a, const Index3& b) {
    return std::abs(a.x) + std::abs(a.y) + std::abs(a.z) < std::abs(b.x) + std::abs(b.y) + std::abs(b.z);
  });
  return ds;
}

// Votes per label with weights; argmax with ties to the lowest label.
std::int32_t weighted_argmax(const std::vector<double>& votes) {
  std::int32_t best = 0;
  for (std::size_t l = 1; l < votes.size(); ++l)
    if (votes[l] > votes[best]) best = static_cast<std::int32_t>(l);
  return best;
}

int label_count(std::span<const AtlasBundle> atlases) {
  int n = 2;
  for (const auto& a : atlases) n = std::max(n, a.labels.num_labels());
  return n;
}

void check_atlases(const Volume& target, std::span<const AtlasBundle> atlases) {
  if (atlases.empty()) throw std::invalid_argument("fusion: no atlases");
  for (const auto& a : atlases) {
    require_same_dims(target.dims(), a.image.dims(), "fusion atlas image");
    require_same_dims(target.dims(), a.labels.dims(), "fusion atlas labels");
    if (a.image.channels() != target.channels()) throw std::invalid_argument("fusion: atlas/target channel mismatch");
  }
}

}  // namespace

LabelMap majority_vote(std::span<const LabelMap> candidates) {
  if (candidates.empty()) throw std::invalid_argument("majority_vote: no candidates");
  const Dims dims = candidates[0].dims();
  int L = 2;
  for (const auto& c : candidates) {
    require_same_dims(dims, c.dims(), "majority_vote");
    L = std::max(L, c.num_labels());
  }
  LabelMap out(dims, L, candidates[0].spacing());
  std::vector<int> hist(L);
  auto& o = out.labels();
  for (std::size_t i = 0; i < o.size(); ++i) {
    std::fill(hist.begin(), hist.end(), 0);
    for (const auto& c : candidates) ++hist[c.labels()[i]];
    o[i] = static_cast<std::int32_t>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  }
  return out;
}

LabelMap SearchResult::candidate(const LabelMap& atlas_labels) const {
  require_same_dims(dims, atlas_labels.dims(), "search candidate");
  LabelMap out(dims, atlas_labels.num_labels(), atlas_labels.spacing());
  std::size_t i = 0;
  for (int z = 0; z < dims.z; ++z)
    for (int y = 0; y < dims.y; ++y)
      for (int x = 0; x < dims.x; ++x, ++i) {
        const auto& d = displacement[i];
        out.labels()[i] = atlas_labels.at(x + d.x, y + d.y, z + d.z);
      }
  return out;
}

SearchResult neighborhood_search(const Volume& target, const Volume& atlas, const FusionParams& p) {
  p.validate();
  require_same_dims(target.dims(), atlas.dims(), "neighborhood_search");
  if (target.channels() != atlas.channels()) throw std::invalid_argument("neighborhood_search: channel mismatch");
  const Dims N = target.dims();
  const Radius r = p.patch_radius;
  const int C = target.channels();
  const double full = static_cast<double>(2 * r.x + 1) * (2 * r.y + 1) * (2 * r.z + 1);
  const auto ds = ordered_displacements(p.search_radius);

  SearchResult res;
  res.dims = N;
  res.displacement.assign(N.voxels(), Index3{});
  res.ssd.assign(N.voxels(), std::numeric_limits<double>::infinity());
  const std::size_t plane = static_cast<std::size_t>(N.x) * N.y;

  parallel_for(static_cast<std::size_t>(N.z), p.workers, [&](std::size_t zb, std::size_t ze) {
    const int z0 = static_cast<int>(zb), z1 = static_cast<int>(ze);
    const int e0 = std::max(0, z0 - r.z), e1 = std::min(N.z, z1 + r.z);
    const std::size_t ext = static_cast<std::size_t>(e1 - e0) * plane;
    std::vector<double> diff(ext), sx(ext), sxy(ext);
    std::vector<int> cnt(ext), cx(ext), cxy(ext);
    for (const auto& d : ds) {
      // Squared difference over channels where both n and n + d are inside.
      for (int z = e0; z < e1; ++z)
        for (int y = 0; y < N.y; ++y)
          for (int x = 0; x < N.x; ++x) {
            const std::size_t i = (static_cast<std::size_t>(z - e0) * N.y + y) * N.x + x;
            if (!inside(N, x + d.x, y + d.y, z + d.z)) {
              diff[i] = 0.0;
              cnt[i] = 0;
              continue;
            }
            double s = 0.0;
            for (int c = 0; c < C; ++c) {
              const double t = static_cast<double>(target.at(c, x, y, z)) - atlas.at(c, x + d.x, y + d.y, z + d.z);
              s += t * t;
            }
            diff[i] = s;
            cnt[i] = 1;
          }
      // Separable window sums, x then y then z, each summed in index order.
      for (int z = e0; z < e1; ++z)
        for (int y = 0; y < N.y; ++y) {
          const std::size_t row = (static_cast<std::size_t>(z - e0) * N.y + y) * N.x;
          for (int x = 0; x < N.x; ++x) {
            double s = 0.0;
            int k = 0;
            for (int u = std::max(0, x - r.x); u <= std::min(N.x - 1, x + r.x); ++u) {
              s += diff[row + u];
              k += cnt[row + u];
            }
            sx[row + x] = s;
            cx[row + x] = k;
          }
        }
      for (int z = e0; z < e1; ++z)
        for (int y = 0; y < N.y; ++y)
          for (int x = 0; x < N.x; ++x) {
            double s = 0.0;
            int k = 0;
            for (int v = std::max(0, y - r.y); v <= std::min(N.y - 1, y + r.y); ++v) {
              const std::size_t j = (static_cast<std::size_t>(z - e0) * N.y + v) * N.x + x;
              s += sx[j];
              k += cx[j];
            }
            const std::size_t i = (static_cast<std::size_t>(z - e0) * N.y + y) * N.x + x;
            sxy[i] = s;
            cxy[i] = k;
          }
      for (int z = z0; z < z1; ++z)
        for (int y = 0; y < N.y; ++y)
          for (int x = 0; x < N.x; ++x) {
            if (!inside(N, x + d.x, y + d.y, z + d.z)) continue;
            double s = 0.0;
            int k = 0;
            for (int w = std::max(0, z - r.z); w <= std::min(N.z - 1, z + r.z); ++w) {
              const std::size_t j = (static_cast<std::size_t>(w - e0) * N.y + y) * N.x + x;
              s += sxy[j];
              k += cxy[j];
            }
            const double ssd = k == static_cast<int>(full) ? s : s * full / k;
            const std::size_t o = (static_cast<std::size_t>(z) * N.y + y) * N.x + x;
            if (ssd < res.ssd[o]) {
              res.ssd[o] = ssd;
              res.displacement[o] = d;
            }
          }
    }
  });
  return res;
}

FusionResult svwv(const Volume& target, std::span<const AtlasBundle> atlases, const FusionParams& p) {
  p.validate();
  check_atlases(target, atlases);
  const int L = label_count(atlases);
  const std::size_t n = atlases.size(), V = target.voxels();
  std::vector<SearchResult> search;
  std::vector<LabelMap> cand;
  for (const auto& a : atlases) {
    search.push_back(neighborhood_search(target, a.image, p));
    cand.push_back(search.back().candidate(a.labels));
  }
  FusionResult out;
  out.labels = LabelMap(target.dims(), L, target.spacing());
  out.weights.assign(n, Volume(target.dims(), 1, target.spacing()));
  parallel_for(V, p.workers, [&](std::size_t b, std::size_t e) {
    std::vector<double> w(n), votes(L);
    for (std::size_t v = b; v < e; ++v) {
      double lo = search[0].ssd[v];
      for (std::size_t i = 1; i < n; ++i) lo = std::min(lo, search[i].ssd[v]);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += w[i] = std::exp(-p.beta * (search[i].ssd[v] - lo));
      std::fill(votes.begin(), votes.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        w[i] /= total;
        votes[cand[i].labels()[v]] += w[i];
        out.weights[i].data()[v] = static_cast<float>(w[i]);
      }
      out.labels.labels()[v] = weighted_argmax(votes);
    }
  });
  return out;
}

bool jlf_weights(std::vector<double> m, int n, double ridge, std::vector<double>& w) {
  w.assign(n, 1.0 / n);
  double mean_diag = 0.0;
  for (int i = 0; i < n; ++i) mean_diag += m[static_cast<std::size_t>(i) * n + i];
  mean_diag /= n;
  if (!(mean_diag > 0.0) || !std::isfinite(mean_diag)) return false;
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(m.data(), n, n);
  M.diagonal().array() += ridge * mean_diag;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
  if (ldlt.info() != Eigen::Success) return false;
  const Eigen::VectorXd x = ldlt.solve(Eigen::VectorXd::Ones(n));
  const double s = x.sum();
  if (!x.allFinite() || !(std::abs(s) > 0.0) || !std::isfinite(s)) return false;
  for (int i = 0; i < n; ++i) w[i] = x[i] / s;
  return true;
}

FusionResult jlf(const Volume& target, std::span<const AtlasBundle> atlases, const FusionParams& p) {
  p.validate();
  check_atlases(target, atlases);
  const int L = label_count(atlases);
  const int n = static_cast<int>(atlases.size());
  const Dims N = target.dims();
  const int C = target.channels();
  const Radius r = p.patch_radius;
  std::vector<SearchResult> search;
  for (const auto& a : atlases) search.push_back(neighborhood_search(target, a.image, p));

  FusionResult out;
  out.labels = LabelMap(N, L, target.spacing());
  out.weights.assign(n, Volume(N, 1, target.spacing()));
  std::atomic<std::size_t> fallbacks{0};
  const int win = (2 * r.x + 1) * (2 * r.y + 1) * (2 * r.z + 1);
  parallel_for(static_cast<std::size_t>(N.z), p.workers, [&](std::size_t zb, std::size_t ze) {
    std::vector<double> a(static_cast<std::size_t>(n) * win * C), m(static_cast<std::size_t>(n) * n), w, votes(L);
    std::vector<char> valid(win);
    std::size_t local_fallbacks = 0;
    for (int z = static_cast<int>(zb); z < static_cast<int>(ze); ++z)
      for (int y = 0; y < N.y; ++y)
        for (int x = 0; x < N.x; ++x) {
          const std::size_t v = (static_cast<std::size_t>(z) * N.y + y) * N.x + x;
          int o = 0;
          for (int oz = -r.z; oz <= r.z; ++oz)
            for (int oy = -r.y; oy <= r.y; ++oy)
              for (int ox = -r.x; ox <= r.x; ++ox, ++o) {
                bool ok = inside(N, x + ox, y + oy, z + oz);
                for (int i = 0; ok && i < n; ++i) {
                  const auto& d = search[i].displacement[v];
                  ok = inside(N, x + d.x + ox, y + d.y + oy, z + d.z + oz);
                }
                valid[o] = ok;
                if (!ok) continue;
                for (int i = 0; i < n; ++i) {
                  const auto& d = search[i].displacement[v];
                  for (int c = 0; c < C; ++c)
                    a[(static_cast<std::size_t>(i) * win + o) * C + c] =
                        std::abs(static_cast<double>(target.at(c, x + ox, y + oy, z + oz)) -
                                 atlases[i].image.at(c, x + d.x + ox, y + d.y + oy, z + d.z + oz));
                }
              }
          for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
              double s = 0.0;
              for (int q = 0; q < win; ++q) {
                if (!valid[q]) continue;
                for (int c = 0; c < C; ++c)
                  s += a[(static_cast<std::size_t>(i) * win + q) * C + c] * a[(static_cast<std::size_t>(j) * win + q) * C + c];
              }
              m[static_cast<std::size_t>(i) * n + j] = m[static_cast<std::size_t>(j) * n + i] = std::pow(s, p.beta);
            }
          if (!jlf_weights(m, n, p.ridge, w)) ++local_fallbacks;
          std::fill(votes.begin(), votes.end(), 0.0);
          for (int i = 0; i < n; ++i) {
            const auto& d = search[i].displacement[v];
            votes[atlases[i].labels.at(x + d.x, y + d.y, z + d.z)] += w[i];
            out.weights[i].data()[v] = static_cast<float>(w[i]);
          }
          out.labels.labels()[v] = weighted_argmax(votes);
        }
    fallbacks += local_fallbacks;
  });
  out.fallback_voxels = fallbacks.load();
  return out;
}

}  // namespace dlf::classicfusion
