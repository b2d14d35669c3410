#include "dlf/gridnet/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dlf/volcore.hpp"

namespace dlf::gridnet {

namespace fs = std::filesystem;

namespace {

std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) s.push_back(std::stoi(item));
  return s;
}

}  // namespace

void save_checkpoint(const fs::path& dir, std::span<const NamedArray> arrays) {
  fs::create_directories(dir / "arrays");
  std::ofstream manifest(dir / "manifest.txt", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write checkpoint manifest in " + dir.string());
  manifest << "# dlf checkpoint v1\n";
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& a = arrays[i];
    if (a.values.size() != numel(a.shape)) throw std::invalid_argument("checkpoint array " + a.name + " has inconsistent shape");
    if (a.name.find_first_of("\t\n") != std::string::npos) throw std::invalid_argument("array names may not contain tabs/newlines");
    char file[48];
    std::snprintf(file, sizeof file, "arrays/%04zu.dlfv", i);
    const int count = static_cast<int>(a.values.size());
    volcore::write_volume(volcore::Volume({std::max(1, count), 1, 1}, 1,
                                          count ? a.values : std::vector<float>{0.0f}),
                          dir / file);
    manifest << a.name << '\t' << join_shape(a.shape) << '\t' << a.values.size() << '\t' << file << '\n';
  }
  if (!manifest) throw std::runtime_error("checkpoint manifest write failed");
}

std::vector<NamedArray> load_checkpoint(const fs::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("missing checkpoint manifest in " + dir.string());
  std::vector<NamedArray> out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string name, shape, count, file;
    if (!std::getline(ss, name, '\t') || !std::getline(ss, shape, '\t') || !std::getline(ss, count, '\t') ||
        !std::getline(ss, file, '\t'))
      throw std::runtime_error("malformed checkpoint manifest line: " + line);
    NamedArray a{name, parse_shape(shape), {}};
    const auto n = static_cast<std::size_t>(std::stoull(count));
    if (n != numel(a.shape)) throw std::runtime_error("checkpoint count/shape mismatch for " + name);
    auto v = volcore::read_volume(dir / file);
    if (n == 0) {
      out.push_back(std::move(a));
      continue;
    }
    if (v.size() != n) throw std::runtime_error("checkpoint payload size mismatch for " + name);
    a.values = std::move(v.data());
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace dlf::gridnet
