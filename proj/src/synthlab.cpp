#include "dlf/synthlab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include "dlf/parallel.hpp"

namespace dlf::synthlab {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

void PhantomConfig::validate() const {
  if (dims.x < 1 || dims.y < 1 || dims.z < 1) throw std::invalid_argument("phantom dims must be >= 1");
  if (num_labels < 2) throw std::invalid_argument("phantom needs L >= 2");
  if (n_subjects < 1) throw std::invalid_argument("phantom needs n_subjects >= 1");
  if (misalign_sigma < 0.0 || noise_sigma < 0.0 || field_smoothing < 0.0)
    throw std::invalid_argument("phantom sigmas must be >= 0");
  if (control_points < 2) throw std::invalid_argument("phantom control_points must be >= 2");
  if (!contrast.empty()) {
    if (contrast.size() != 2) throw std::invalid_argument("phantom contrast needs 2 modalities");
    for (const auto& m : contrast) {
      if (static_cast<int>(m.size()) != num_labels)
        throw std::invalid_argument("phantom contrast needs one entry per label");
      for (const auto& c : m)
        if (c.sd < 0.0) throw std::invalid_argument("phantom contrast sd must be >= 0");
    }
  }
}

std::vector<std::vector<Contrast>> PhantomConfig::resolved_contrast() const {
  return contrast.empty() ? default_contrast(num_labels) : contrast;
}

std::vector<std::vector<Contrast>> default_contrast(int num_labels) {
  std::vector<std::vector<Contrast>> c(2, std::vector<Contrast>(num_labels));
  const double span = std::max(1, num_labels - 2);
  for (int l = 1; l < num_labels; ++l) {
    c[0][l] = {0.25 + 0.75 * (l - 1) / span, 0.05};
    c[1][l] = {1.0 - 0.75 * (l - 1) / span, 0.05};
  }
  return c;
}

std::mt19937_64 subject_stream(std::uint64_t seed, std::int64_t index) {
  return std::mt19937_64(splitmix(splitmix(seed) ^ static_cast<std::uint64_t>(index + 1)));
}

LabelMap make_template(const PhantomConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const Dims d = cfg.dims;
  if (std::min({d.x, d.y, d.z}) < 8) throw std::invalid_argument("phantom dims too small: " + to_string(d));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double outer[3], inner[3];
  for (int a = 0; a < 3; ++a) outer[a] = d[a] * (0.36 + 0.06 * u(rng));
  const double core = 0.45 + 0.1 * u(rng);
  for (int a = 0; a < 3; ++a) inner[a] = outer[a] * core;
  const double phase = 2.0 * std::numbers::pi * u(rng);
  const double twist = u(rng) - 0.5;  // radians per outer semi-axis along z
  const double center[3] = {(d.x - 1) / 2.0, (d.y - 1) / 2.0, (d.z - 1) / 2.0};
  const int sectors = cfg.num_labels - 2;

  LabelMap lm(d, cfg.num_labels, cfg.spacing);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const double p[3] = {x - center[0], y - center[1], z - center[2]};
        double ro = 0.0, ri = 0.0;
        for (int a = 0; a < 3; ++a) {
          ro += p[a] * p[a] / (outer[a] * outer[a]);
          ri += p[a] * p[a] / (inner[a] * inner[a]);
        }
        if (ro > 1.0) continue;
        int label = 1;
        if (sectors > 0 && ri > 1.0) {
          double phi = std::atan2(p[1], p[0]) + phase + twist * p[2] / outer[2];
          phi = std::fmod(phi, 2.0 * std::numbers::pi);
          if (phi < 0) phi += 2.0 * std::numbers::pi;
          label = 2 + std::min(sectors - 1, static_cast<int>(phi / (2.0 * std::numbers::pi) * sectors));
        }
        lm.labels()[lm.index(x, y, z)] = label;
      }

  std::vector<std::size_t> counts(cfg.num_labels, 0);
  for (auto l : lm.labels()) ++counts[l];
  const std::size_t fg = lm.voxels() - counts[0];
  for (int l = 1; l < cfg.num_labels; ++l)
    if (counts[l] * 100 < fg)
      throw std::invalid_argument("phantom dims too small for " + std::to_string(cfg.num_labels) + " labels");
  return lm;
}

Subject make_subject(const LabelMap& templ, const PhantomConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (!(templ.dims() == cfg.dims)) throw std::invalid_argument("template dims differ from phantom dims");
  Subject s;
  if (cfg.misalign_sigma > 0.0) {
    auto field = volcore::random_displacement_field(cfg.dims, cfg.control_points, cfg.field_smoothing, rng);
    for (auto& v : field.data()) v = static_cast<float>(v * cfg.misalign_sigma);
    s.labels = volcore::warp_labels(templ, field);
  } else {
    s.labels = templ;
  }
  s.labels.set_spacing(cfg.spacing);

  const auto contrast = cfg.resolved_contrast();
  std::normal_distribution<double> normal;
  Volume* out[2] = {&s.t1, &s.t2};
  for (int m = 0; m < 2; ++m) {
    std::vector<double> means(cfg.num_labels);
    for (int l = 0; l < cfg.num_labels; ++l) means[l] = contrast[m][l].mean + contrast[m][l].sd * normal(rng);
    *out[m] = Volume(cfg.dims, 1, cfg.spacing);
    auto& data = out[m]->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double v = means[s.labels.labels()[i]];
      if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * normal(rng);
      data[i] = static_cast<float>(v);
    }
  }
  return s;
}

std::vector<Subject> make_subjects(const PhantomConfig& cfg, int workers) {
  cfg.validate();
  auto trng = subject_stream(cfg.seed, -1);
  const LabelMap templ = make_template(cfg, trng);
  std::vector<Subject> subjects(cfg.n_subjects);
  parallel_for(subjects.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto rng = subject_stream(cfg.seed, static_cast<std::int64_t>(i));
      subjects[i] = make_subject(templ, cfg, rng);
    }
  });
  return subjects;
}

std::string subject_id(int index) {
  std::string n = std::to_string(index);
  return "s" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

std::vector<std::string> make_dataset(const PhantomConfig& cfg, const std::filesystem::path& dir, int workers) {
  if (cfg.n_subjects < 2) throw std::invalid_argument("dataset needs n_subjects >= 2");
  const auto subjects = make_subjects(cfg, workers);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    ids.push_back(subject_id(static_cast<int>(i)));
    write_subject(subjects[i], dir, ids.back());
  }
  write_manifest(dir, ids);
  return ids;
}

void write_subject(const Subject& s, const std::filesystem::path& dataset_dir, const std::string& id) {
  const auto sub = dataset_dir / "subjects" / id;
  std::filesystem::create_directories(sub);
  volcore::write_volume(s.t1, sub / "t1.dlfv");
  volcore::write_volume(s.t2, sub / "t2.dlfv");
  volcore::write_labels(s.labels, sub / "labels.dlfv");
}

Subject read_subject(const std::filesystem::path& dataset_dir, const std::string& id, int num_labels) {
  const auto sub = dataset_dir / "subjects" / id;
  Subject s{volcore::read_volume(sub / "t1.dlfv"), volcore::read_volume(sub / "t2.dlfv"),
            volcore::read_labels(sub / "labels.dlfv", num_labels)};
  if (!(s.t1.dims() == s.labels.dims()) || !(s.t2.dims() == s.labels.dims()))
    throw std::runtime_error("subject " + id + ": modality and label dims differ");
  return s;
}

void write_manifest(const std::filesystem::path& dataset_dir, const std::vector<std::string>& ids) {
  std::filesystem::create_directories(dataset_dir);
  std::ofstream out(dataset_dir / "manifest.txt");
  for (const auto& id : ids) out << id << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dataset_dir / "manifest.txt").string());
}

std::vector<std::string> read_manifest(const std::filesystem::path& dataset_dir) {
  std::ifstream in(dataset_dir / "manifest.txt");
  if (!in) throw std::runtime_error("cannot read " + (dataset_dir / "manifest.txt").string());
  std::vector<std::string> ids;
  for (std::string line; std::getline(in, line);) {
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

Volume stack_modalities(const Subject& s) {
  const Volume parts[2] = {s.t1, s.t2};
  return volcore::stack_channels(parts);
}

}  // namespace dlf::synthlab
