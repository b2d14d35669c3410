#pragma once

// Volumes, label maps, the DLFV container format and patch utilities.
//
// Storage order is fixed: channel-major, then z slowest, x fastest, i.e.
//   index(c, x, y, z) = ((c * Nz + z) * Ny + y) * Nx + x

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dlf::volcore {

struct Dims {
  int x = 1;
  int y = 1;
  int z = 1;

  std::size_t voxels() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
  }
  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend bool operator==(const Dims&, const Dims&) = default;
};

struct Spacing {
  float x = 1.0f;
  float y = 1.0f;
  float z = 1.0f;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct Index3 {
  int x = 0;
  int y = 0;
  int z = 0;
  friend bool operator==(const Index3&, const Index3&) = default;
};

std::string to_string(const Dims& d);

/// Multi-channel float grid. Invariants: dims >= 1, channels >= 1, positive spacing.
class Volume {
 public:
  Volume() = default;
  Volume(Dims dims, int channels, Spacing spacing = {});
  Volume(Dims dims, int channels, std::vector<float> data, Spacing spacing = {});

  const Dims& dims() const { return dims_; }
  int channels() const { return channels_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing s);

  std::size_t voxels() const { return dims_.voxels(); }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int c, int x, int y, int z) const {
    return ((static_cast<std::size_t>(c) * dims_.z + z) * dims_.y + y) * dims_.x + x;
  }
  float& at(int c, int x, int y, int z) { return data_[index(c, x, y, z)]; }
  float at(int c, int x, int y, int z) const { return data_[index(c, x, y, z)]; }

  std::span<float> channel(int c);
  std::span<const float> channel(int c) const;

  std::vector<float>& data() & { return data_; }
  const std::vector<float>& data() const& { return data_; }
  std::vector<float> data() && { return std::move(data_); }

  /// Channels [first, first + count) as a new volume.
  Volume channels_slice(int first, int count) const;

 private:
  Dims dims_{};
  int channels_ = 0;
  Spacing spacing_{};
  std::vector<float> data_;
};

/// Stacks volumes of identical dims along the channel axis.
Volume stack_channels(std::span<const Volume> parts);

/// Integer label grid over labels 0..L-1 (0 is background).
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(Dims dims, int num_labels, Spacing spacing = {});
  LabelMap(Dims dims, int num_labels, std::vector<std::int32_t> labels, Spacing spacing = {});

  const Dims& dims() const { return dims_; }
  int num_labels() const { return num_labels_; }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing s) { spacing_ = s; }
  std::size_t voxels() const { return dims_.voxels(); }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims_.y + y) * dims_.x + x;
  }
  std::int32_t at(int x, int y, int z) const { return labels_[index(x, y, z)]; }
  void set(int x, int y, int z, std::int32_t label);

  std::vector<std::int32_t>& labels() & { return labels_; }
  const std::vector<std::int32_t>& labels() const& { return labels_; }
  std::vector<std::int32_t> labels() && { return std::move(labels_); }

  /// Throws if any voxel is outside [0, L).
  void validate() const;

 private:
  Dims dims_{};
  int num_labels_ = 2;
  Spacing spacing_{};
  std::vector<std::int32_t> labels_;
};

/// A registered atlas on the target grid: image channels (T1, T2) plus its
/// candidate segmentation.
struct AtlasBundle {
  Volume image;
  LabelMap labels;
};

// ---------------------------------------------------------------------------
// DLFV container
// ---------------------------------------------------------------------------

/// Raised for malformed DLFV files (bad magic, unknown dtype, truncation...).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { Float32 = 0, Int32 = 1 };

struct FileHeader {
  std::uint32_t version = 1;
  DType dtype = DType::Float32;
  std::uint32_t channels = 1;
  Dims dims{};
  Spacing spacing{};
};

inline constexpr std::size_t kHeaderBytes = 40;
inline constexpr std::array<char, 4> kMagic = {'D', 'L', 'F', 'V'};

void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

void write_labels(const LabelMap& lm, const std::filesystem::path& path);
/// L is taken from `num_labels` when > 0, else max(2, max label + 1).
LabelMap read_labels(const std::filesystem::path& path, int num_labels = 0);

FileHeader read_header(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_labels(const LabelMap& lm);
LabelMap decode_labels(std::span<const std::uint8_t> bytes, int num_labels = 0);

// ---------------------------------------------------------------------------
// Voxelwise operations
// ---------------------------------------------------------------------------

/// Per-channel zero mean / unit population std. Constant channels become zeros.
Volume znormalize(const Volume& v);

/// Three channels holding the x, y, z index linearly mapped onto [-1, 1].
/// A single-voxel axis maps to 0.
Volume coordinate_maps(Dims dims);

Volume one_hot(const LabelMap& lm, int num_labels);

/// Per-voxel argmax over channels; ties resolve to the lowest channel.
LabelMap argmax(const Volume& v);

// ---------------------------------------------------------------------------
// Patches and dense grids
// ---------------------------------------------------------------------------

struct PatchSpec {
  Index3 center{};
  Dims size{};
};

/// First voxel of the patch after clamping the center so the patch lies
/// fully inside `dims`. Patch covers [start, start + size) with
/// start = center - size / 2 before clamping.
Index3 patch_origin(const PatchSpec& spec, const Dims& dims);

Volume extract_patch(const Volume& v, const PatchSpec& spec);
LabelMap extract_patch(const LabelMap& lm, const PatchSpec& spec);

/// Patch centers on a Cartesian grid with the given stride; the last center
/// per axis is clamped so the union of patches covers every voxel.
std::vector<Index3> dense_grid_centers(Dims dims, Dims patch, Dims stride);

/// Averages overlapping patch values. Throws if a voxel is left uncovered.
Volume stitch_patches(std::span<const Volume> patches, std::span<const Index3> centers, Dims dims,
                      int channels);


// ---------------------------------------------------------------------------
// Deformations
// ---------------------------------------------------------------------------

/// Smooth random displacement field, 3 channels (dx, dy, dz) in voxels.
/// N(0, 1) draws on a `control_points`^3 lattice spanning the grid corners are
/// Gaussian-smoothed on the lattice (sigma in lattice units), rescaled to unit
/// standard deviation per component and upsampled trilinearly.
Volume random_displacement_field(Dims dims, int control_points, double smoothing, std::mt19937_64& rng);

/// Multiplies the field so that its largest displacement vector has length
/// `max_length` (a zero field stays zero).
void limit_displacement(Volume& field, double max_length);

/// Trilinear value of channel c at a continuous position, clamped to the grid.
float sample_trilinear(const Volume& v, int c, double x, double y, double z);

/// out(p) = v(p + u(p)), trilinear, border-clamped.
Volume warp_volume(const Volume& v, const Volume& field);
/// out(p) = labels(round(p + u(p))), border-clamped.
LabelMap warp_labels(const LabelMap& lm, const Volume& field);

}  // namespace dlf::volcore
