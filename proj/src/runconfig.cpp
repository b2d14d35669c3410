#include "dlf/runconfig.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>

namespace dlf::runconfig {

namespace {

enum class Kind { Int, Double, Bool, Triple, IntList, DoubleList };

struct KeySpec {
  Kind kind;
  const char* fallback;  // "" = preset of the consuming command
};

const std::map<std::string, KeySpec>& schema() {
  static const std::map<std::string, KeySpec> s = {
      {"seed", {Kind::Int, "1"}},
      {"phantom.dims", {Kind::Triple, "48,48,48"}},
      {"phantom.labels", {Kind::Int, "5"}},
      {"phantom.subjects", {Kind::Int, "13"}},
      {"phantom.misalign_sigma", {Kind::Double, "2"}},
      {"phantom.control_points", {Kind::Int, "5"}},
      {"phantom.field_smoothing", {Kind::Double, "0"}},
      {"phantom.noise_sigma", {Kind::Double, "0.1"}},
      {"phantom.spacing", {Kind::DoubleList, "1,1,1"}},
      {"phantom.t1_mean", {Kind::DoubleList, ""}},
      {"phantom.t1_sd", {Kind::DoubleList, ""}},
      {"phantom.t2_mean", {Kind::DoubleList, ""}},
      {"phantom.t2_sd", {Kind::DoubleList, ""}},
      {"train.patch", {Kind::Triple, "24,24,24"}},
      {"train.fg_patches", {Kind::Int, ""}},
      {"train.bg_patches", {Kind::Int, ""}},
      {"train.atlases", {Kind::Int, ""}},
      {"train.epochs", {Kind::Int, ""}},
      {"train.batch_size", {Kind::Int, ""}},
      {"train.lr", {Kind::Double, ""}},
      {"train.decay_factor", {Kind::Double, ""}},
      {"train.decay_every", {Kind::Int, ""}},
      {"train.decay_start", {Kind::Int, ""}},
      {"train.augment", {Kind::Bool, "1"}},
      {"train.elastic_control", {Kind::Int, "4"}},
      {"train.elastic_max", {Kind::Double, "2"}},
      {"train.elastic_smoothing", {Kind::Double, "0"}},
      {"train.base_features", {Kind::Int, "8"}},
      {"train.mask_threshold", {Kind::Double, "0.2"}},
      {"train.stride", {Kind::Triple, "12,12,12"}},
      {"fusion.beta", {Kind::Double, ""}},
      {"fusion.patch_radius", {Kind::Triple, "1,1,0"}},
      {"fusion.search_radius", {Kind::Triple, ""}},
      {"fusion.ridge", {Kind::Double, "0.01"}},
      {"eval.labels", {Kind::IntList, ""}},
  };
  return s;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(trim(item));
  return out;
}

long long to_int(const std::string& s) {
  std::size_t used = 0;
  const long long v = std::stoll(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

double to_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
  return v;
}

void check_value(const std::string& key, Kind kind, const std::string& v) {
  if (v.empty()) return;
  try {
    switch (kind) {
      case Kind::Int:
        to_int(v);
        break;
      case Kind::Double:
        to_double(v);
        break;
      case Kind::Bool:
        if (v != "0" && v != "1" && v != "true" && v != "false") throw std::invalid_argument(v);
        break;
      case Kind::Triple: {
        const auto parts = split(v);
        if (parts.size() != 1 && parts.size() != 3) throw std::invalid_argument(v);
        for (const auto& p : parts) to_int(p);
        break;
      }
      case Kind::IntList:
        for (const auto& p : split(v)) to_int(p);
        break;
      case Kind::DoubleList:
        for (const auto& p : split(v)) to_double(p);
        break;
    }
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
}

std::array<int, 3> triple(const std::string& v) {
  const auto parts = split(v);
  if (parts.size() == 1) {
    const int n = static_cast<int>(to_int(parts[0]));
    return {n, n, n};
  }
  return {static_cast<int>(to_int(parts[0])), static_cast<int>(to_int(parts[1])), static_cast<int>(to_int(parts[2]))};
}

std::vector<double> doubles(const std::string& v) {
  std::vector<double> out;
  if (v.empty()) return out;
  for (const auto& p : split(v)) out.push_back(to_double(p));
  return out;
}

std::string triple_text(const volcore::Dims& d) {
  return std::to_string(d.x) + "," + std::to_string(d.y) + "," + std::to_string(d.z);
}

bool boolean(const std::string& v) { return v == "1" || v == "true"; }

// Range errors from the consuming module's validate() become config errors.
template <typename C>
void validated(const C& c) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& [k, spec] : schema()) values_[k] = spec.fallback;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : schema()) out.push_back(k);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = schema().find(key);
  if (it == schema().end()) throw ConfigError("unknown config key: " + key);
  check_value(key, it->second.kind, value);
  values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
  RunConfig c;
  std::map<std::string, int> seen;
  std::istringstream in{std::string(text)};
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (seen.count(key)) throw ConfigError(where + "repeated key " + key + " (first on line " + std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    try {
      c.set(key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::uint64_t RunConfig::seed() const { return static_cast<std::uint64_t>(to_int(get("seed"))); }

synthlab::PhantomConfig RunConfig::phantom() const {
  synthlab::PhantomConfig p;
  const auto d = triple(get("phantom.dims"));
  p.dims = {d[0], d[1], d[2]};
  p.num_labels = static_cast<int>(to_int(get("phantom.labels")));
  p.n_subjects = static_cast<int>(to_int(get("phantom.subjects")));
  p.misalign_sigma = to_double(get("phantom.misalign_sigma"));
  p.control_points = static_cast<int>(to_int(get("phantom.control_points")));
  p.field_smoothing = to_double(get("phantom.field_smoothing"));
  p.noise_sigma = to_double(get("phantom.noise_sigma"));
  const auto sp = doubles(get("phantom.spacing"));
  if (sp.size() != 3) throw ConfigError("phantom.spacing needs 3 values");
  p.spacing = {static_cast<float>(sp[0]), static_cast<float>(sp[1]), static_cast<float>(sp[2])};
  p.seed = seed();

  const char* keys[2][2] = {{"phantom.t1_mean", "phantom.t1_sd"}, {"phantom.t2_mean", "phantom.t2_sd"}};
  bool any = false;
  for (auto& m : keys)
    for (auto* k : m) any = any || is_set(k);
  if (any) {
    auto contrast = synthlab::default_contrast(p.num_labels);
    for (int m = 0; m < 2; ++m)
      for (int j = 0; j < 2; ++j) {
        if (!is_set(keys[m][j])) continue;
        const auto v = doubles(get(keys[m][j]));
        if (static_cast<int>(v.size()) != p.num_labels)
          throw ConfigError(std::string(keys[m][j]) + " needs one value per label");
        for (int l = 0; l < p.num_labels; ++l) (j == 0 ? contrast[m][l].mean : contrast[m][l].sd) = v[l];
      }
    p.contrast = contrast;
  }
  validated(p);
  return p;
}

trainer::TrainConfig RunConfig::train(const std::string& model) const {
  trainer::TrainConfig c;
  if (model == "dlf")
    c = trainer::dlf_train_preset();
  else if (model == "unet")
    c = trainer::unet_train_preset();
  else
    throw ConfigError("unknown model '" + model + "' (expected dlf or unet)");
  auto int_or = [&](const char* key, int& dst) {
    if (is_set(key)) dst = static_cast<int>(to_int(get(key)));
  };
  auto dbl_or = [&](const char* key, double& dst) {
    if (is_set(key)) dst = to_double(get(key));
  };
  const auto p = triple(get("train.patch"));
  c.patch = {p[0], p[1], p[2]};
  int_or("train.fg_patches", c.fg_patches);
  int_or("train.bg_patches", c.bg_patches);
  if (model == "dlf") int_or("train.atlases", c.n_atlas_draw);
  int_or("train.epochs", c.epochs);
  int_or("train.batch_size", c.batch_size);
  dbl_or("train.lr", c.optim.lr0);
  dbl_or("train.decay_factor", c.optim.decay_factor);
  int_or("train.decay_every", c.optim.decay_every_epochs);
  int_or("train.decay_start", c.optim.decay_start_epoch);
  c.augment = boolean(get("train.augment"));
  int_or("train.elastic_control", c.elastic.control_grid);
  dbl_or("train.elastic_max", c.elastic.max_displacement);
  dbl_or("train.elastic_smoothing", c.elastic.smoothing);
  int_or("train.base_features", c.base_features);
  c.seed = seed();
  validated(c);
  return c;
}

volcore::Dims RunConfig::infer_stride() const {
  const auto s = triple(get("train.stride"));
  if (std::min({s[0], s[1], s[2]}) < 1) throw ConfigError("train.stride must be >= 1");
  return {s[0], s[1], s[2]};
}

deepfusion::DlfConfig RunConfig::dlf_model(int num_labels) const {
  auto c = deepfusion::DlfConfig::make(num_labels, static_cast<int>(to_int(get("train.base_features"))));
  c.mask_threshold = to_double(get("train.mask_threshold"));
  validated(c);
  return c;
}

classicfusion::FusionParams RunConfig::fusion(const std::string& method) const {
  classicfusion::FusionParams p;
  if (method == "svwv")
    p = classicfusion::svwv_defaults();
  else if (method == "jlf")
    p = classicfusion::jlf_defaults();
  else
    throw ConfigError("no fusion parameters for method '" + method + "'");
  if (is_set("fusion.beta")) p.beta = to_double(get("fusion.beta"));
  const auto pr = triple(get("fusion.patch_radius"));
  p.patch_radius = {pr[0], pr[1], pr[2]};
  if (is_set("fusion.search_radius")) {
    const auto sr = triple(get("fusion.search_radius"));
    p.search_radius = {sr[0], sr[1], sr[2]};
  }
  p.ridge = to_double(get("fusion.ridge"));
  validated(p);
  return p;
}

std::vector<int> RunConfig::eval_labels() const {
  std::vector<int> out;
  if (!is_set("eval.labels")) return out;
  for (const auto& p : split(get("eval.labels"))) out.push_back(static_cast<int>(to_int(p)));
  return out;
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  for (const auto& [k, v] : values_) out << k << '=' << v << '\n';
  return out.str();
}

std::string describe(const synthlab::PhantomConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "phantom.dims=" << triple_text(c.dims) << "\nphantom.labels=" << c.num_labels
      << "\nphantom.subjects=" << c.n_subjects << "\nphantom.misalign_sigma=" << c.misalign_sigma
      << "\nphantom.control_points=" << c.control_points << "\nphantom.field_smoothing=" << c.field_smoothing
      << "\nphantom.noise_sigma=" << c.noise_sigma << "\nphantom.seed=" << c.seed << '\n';
  const auto contrast = c.resolved_contrast();
  for (int m = 0; m < 2; ++m) {
    out << "phantom.t" << m + 1 << "_mean=";
    for (int l = 0; l < c.num_labels; ++l) out << (l ? "," : "") << contrast[m][l].mean;
    out << "\nphantom.t" << m + 1 << "_sd=";
    for (int l = 0; l < c.num_labels; ++l) out << (l ? "," : "") << contrast[m][l].sd;
    out << '\n';
  }
  return out.str();
}

std::string describe(const trainer::TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "train.patch=" << triple_text(c.patch) << "\ntrain.fg_patches=" << c.fg_patches
      << "\ntrain.bg_patches=" << c.bg_patches << "\ntrain.atlases=" << c.n_atlas_draw << "\ntrain.epochs=" << c.epochs
      << "\ntrain.batch_size=" << c.batch_size << "\ntrain.lr=" << c.optim.lr0
      << "\ntrain.decay_factor=" << c.optim.decay_factor << "\ntrain.decay_every=" << c.optim.decay_every_epochs
      << "\ntrain.decay_start=" << c.optim.decay_start_epoch << "\ntrain.augment=" << c.augment
      << "\ntrain.elastic_control=" << c.elastic.control_grid << "\ntrain.elastic_max=" << c.elastic.max_displacement
      << "\ntrain.elastic_smoothing=" << c.elastic.smoothing << "\ntrain.base_features=" << c.base_features
      << "\ntrain.seed=" << c.seed << '\n';
  return out.str();
}

std::string describe(const classicfusion::FusionParams& p) {
  std::ostringstream out;
  out.precision(17);
  out << "fusion.beta=" << p.beta << "\nfusion.patch_radius=" << p.patch_radius.x << ',' << p.patch_radius.y << ','
      << p.patch_radius.z << "\nfusion.search_radius=" << p.search_radius.x << ',' << p.search_radius.y << ','
      << p.search_radius.z << "\nfusion.ridge=" << p.ridge << '\n';
  return out.str();
}

}  // namespace dlf::runconfig
