#pragma once

// Classical label fusion: majority voting, spatially varying weighted voting
// (SVWV) and joint label fusion (JLF), the latter two after a per-voxel
// neighborhood search.

#include <cstdint>
#include <span>
#include <vector>

#include "dlf/volcore.hpp"

namespace dlf::classicfusion {

using volcore::AtlasBundle;
using volcore::Dims;
using volcore::Index3;
using volcore::LabelMap;
using volcore::Volume;

struct Radius {
  int x = 0;
  int y = 0;
  int z = 0;
  int operator[](int a) const { return a == 0 ? x : (a == 1 ? y : z); }
  friend bool operator==(const Radius&, const Radius&) = default;
};

struct FusionParams {
  double beta = 0.05;
  Radius patch_radius{1, 1, 0};
  Radius search_radius{4, 4, 1};
  double ridge = 0.01;  // JLF: added to the diagonal as a fraction of its mean
  int workers = 1;

  void validate() const;
};

FusionParams svwv_defaults();  // beta 0.05, search (4,4,1)
FusionParams jlf_defaults();   // beta 2.0, search (3,3,1)

/// Per-voxel modal label; ties go to the lowest label.
LabelMap majority_vote(std::span<const LabelMap> candidates);

struct SearchResult {
  Dims dims;
  std::vector<Index3> displacement;  // best d per voxel (x fastest)
  std::vector<double> ssd;           // matched patch SSD, rescaled to the full window

  /// The atlas labels fetched at n + d.
  LabelMap candidate(const LabelMap& atlas_labels) const;
};

/// For each voxel n, the displacement d within the search radius minimizing
/// the two-image SSD between the target patch at n and the atlas patch at
/// n + d. Windows are truncated at the borders and their SSD scaled by
/// full / valid offsets. Ties: smaller |d|_1, then lexicographic (dx, dy, dz).
SearchResult neighborhood_search(const Volume& target, const Volume& atlas_image, const FusionParams& p);

struct FusionResult {
  LabelMap labels;
  std::vector<Volume> weights;      // one single-channel volume per atlas
  std::size_t fallback_voxels = 0;  // JLF voxels that used uniform weights
};

/// w_i = exp(-beta * (SSD_i - min_j SSD_j)), normalized over atlases.
FusionResult svwv(const Volume& target, std::span<const AtlasBundle> atlases, const FusionParams& p);

/// M_ij = (sum over window and channels of |T - A_i| |T - A_j|)^beta, taken
/// over offsets valid for every atlas; M += ridge * mean(diag M) * I;
/// w = M^-1 1 / (1^T M^-1 1). Singular or non-finite systems fall back to
/// uniform weights.
FusionResult jlf(const Volume& target, std::span<const AtlasBundle> atlases, const FusionParams& p);

/// The JLF weight formula for one dependency matrix (row-major n x n), after
/// conditioning. Returns false and uniform weights when it cannot be solved.
bool jlf_weights(std::vector<double> m, int n, double ridge, std::vector<double>& w);

}  // namespace dlf::classicfusion
