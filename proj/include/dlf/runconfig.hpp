#pragma once

// Plain-text run configuration: `key = value` lines, `#` comments, keys
// prefixed by section (phantom., train., fusion., eval.) plus `seed`.
// Every key has a default; unknown or repeated keys are rejected. An empty
// value selects the preset of the command that consumes it.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dlf/classicfusion.hpp"
#include "dlf/deepfusion.hpp"
#include "dlf/synthlab.hpp"
#include "dlf/trainer.hpp"

namespace dlf::runconfig {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RunConfig {
 public:
  RunConfig();

  /// `origin` names the source in error messages.
  static RunConfig parse(std::string_view text, const std::string& origin = "config");
  static RunConfig load(const std::filesystem::path& path);

  /// Throws ConfigError for unknown keys or values of the wrong type.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool is_set(const std::string& key) const { return !get(key).empty(); }

  std::uint64_t seed() const;
  synthlab::PhantomConfig phantom() const;
  /// Preset for "dlf" or "unet" with configured overrides applied.
  trainer::TrainConfig train(const std::string& model) const;
  volcore::Dims infer_stride() const;
  /// The DLF architecture for L labels (base features, mask threshold).
  deepfusion::DlfConfig dlf_model(int num_labels) const;
  /// Method defaults for "svwv" or "jlf" with configured overrides applied.
  classicfusion::FusionParams fusion(const std::string& method) const;
  std::vector<int> eval_labels() const;

  /// Every key, sorted, one `key=value` per line.
  std::string to_text() const;

  static std::vector<std::string> keys();

 private:
  std::map<std::string, std::string> values_;
};

/// Resolved settings as key=value lines for run manifests.
std::string describe(const synthlab::PhantomConfig& c);
std::string describe(const trainer::TrainConfig& c);
std::string describe(const classicfusion::FusionParams& p);

}  // namespace dlf::runconfig
