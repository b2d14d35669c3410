#pragma once

// Checkpoint directory layout:
//   manifest.txt         "name<TAB>shape<TAB>count<TAB>file" per array
//   arrays/NNNN.dlfv     one float32 DLFV volume per array, dims (count, 1, 1)

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dlf/gridnet/tensor.hpp"

namespace dlf::gridnet {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void save_checkpoint(const std::filesystem::path& dir, std::span<const NamedArray> arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& dir);

}  // namespace dlf::gridnet
