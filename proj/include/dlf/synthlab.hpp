#pragma once

// Synthetic phantoms: one template parcellation, subjects derived from it by
// smooth random deformation (the residual misalignment of registered atlases)
// and two synthetic modalities with per-label contrast.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dlf/volcore.hpp"

namespace dlf::synthlab {

using volcore::Dims;
using volcore::LabelMap;
using volcore::Volume;

/// Subject-level label intensity: mean drawn from N(mean, sd) once per subject.
struct Contrast {
  double mean = 0.0;
  double sd = 0.0;
};

struct PhantomConfig {
  Dims dims{48, 48, 48};
  int num_labels = 5;
  int n_subjects = 13;
  double misalign_sigma = 2.0;  // voxels, per displacement component
  int control_points = 5;
  double field_smoothing = 0.0;  // lattice units
  /// contrast[m][l] for modality m in {0, 1}; empty means default_contrast(L).
  std::vector<std::vector<Contrast>> contrast;
  double noise_sigma = 0.1;
  volcore::Spacing spacing{};
  std::uint64_t seed = 1;

  void validate() const;
  /// contrast if set, else the default.
  std::vector<std::vector<Contrast>> resolved_contrast() const;
};

/// Two modalities with different label orderings: T1-like means rise with the
/// label index, T2-like means fall; background is 0 in both.
std::vector<std::vector<Contrast>> default_contrast(int num_labels);

struct Subject {
  Volume t1;  // 1 channel
  Volume t2;  // 1 channel
  LabelMap labels;
};

/// Nested ellipsoids: the inner core is label 1 and the surrounding shell is
/// cut into L - 2 azimuthal sectors (L = 2: one ellipsoid). Shape jitter and
/// sector phase come from `rng`. Throws if a label covers < 1% of foreground.
LabelMap make_template(const PhantomConfig& cfg, std::mt19937_64& rng);

/// Deformed template labels plus T1/T2 intensities.
Subject make_subject(const LabelMap& templ, const PhantomConfig& cfg, std::mt19937_64& rng);

/// Random stream for subject `index` (the template uses index -1).
std::mt19937_64 subject_stream(std::uint64_t seed, std::int64_t index);

/// Template plus all subjects, generated in memory.
std::vector<Subject> make_subjects(const PhantomConfig& cfg, int workers = 1);

/// Writes subjects/<id>/{t1,t2,labels}.dlfv and manifest.txt under `dir`.
/// Returns the subject ids in manifest order.
std::vector<std::string> make_dataset(const PhantomConfig& cfg, const std::filesystem::path& dir, int workers = 1);

/// Subject id for index i: "s000", "s001", ...
std::string subject_id(int index);

// Dataset directory layout: manifest.txt (one id per line) and
// subjects/<id>/{t1,t2,labels}.dlfv.
void write_subject(const Subject& s, const std::filesystem::path& dataset_dir, const std::string& id);
Subject read_subject(const std::filesystem::path& dataset_dir, const std::string& id, int num_labels = 0);
void write_manifest(const std::filesystem::path& dataset_dir, const std::vector<std::string>& ids);
std::vector<std::string> read_manifest(const std::filesystem::path& dataset_dir);

/// Both modalities as one 2-channel volume.
Volume stack_modalities(const Subject& s);

}  // namespace dlf::synthlab
