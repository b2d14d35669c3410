#include "dlf/volcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace dlf::volcore {

namespace {

void check_dims(const Dims& d) {
  if (d.x < 1 || d.y < 1 || d.z < 1)
    throw std::invalid_argument("volume dims must be >= 1, got " + to_string(d));
}

void check_spacing(const Spacing& s) {
  if (!(s.x > 0.0f && s.y > 0.0f && s.z > 0.0f) || !std::isfinite(s.x) || !std::isfinite(s.y) ||
      !std::isfinite(s.z))
    throw std::invalid_argument("spacing must be strictly positive and finite");
}

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(sizeof(U) == 4 || sizeof(U) == 1);
  if constexpr (sizeof(U) == 1) {
    out.push_back(static_cast<std::uint8_t>(value));
  } else {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  static_assert(sizeof(U) == 4);
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(in[offset + i]) << (8 * i);
  return std::bit_cast<U>(bits);
}

std::vector<std::uint8_t> encode(const FileHeader& h, std::size_t count, const void* payload) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + 4 * count);
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_le(out, h.version);
  put_le(out, static_cast<std::uint8_t>(h.dtype));
  for (int i = 0; i < 3; ++i) out.push_back(0);
  put_le(out, h.channels);
  put_le(out, static_cast<std::uint32_t>(h.dims.x));
  put_le(out, static_cast<std::uint32_t>(h.dims.y));
  put_le(out, static_cast<std::uint32_t>(h.dims.z));
  put_le(out, h.spacing.x);
  put_le(out, h.spacing.y);
  put_le(out, h.spacing.z);
  const auto* words = static_cast<const std::uint32_t*>(payload);
  for (std::size_t i = 0; i < count; ++i) put_le(out, words[i]);
  return out;
}

// Parses and validates the header; returns the payload element count.
std::size_t decode_header(std::span<const std::uint8_t> in, FileHeader& h) {
  if (in.size() < kHeaderBytes) throw FormatError("truncated header");
  if (!std::equal(kMagic.begin(), kMagic.end(), in.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; }))
    throw FormatError("bad magic");
  h.version = get_le<std::uint32_t>(in, 4);
  if (h.version != 1) throw FormatError("unsupported version " + std::to_string(h.version));
  const std::uint8_t dtype = in[8];
  if (dtype > 1) throw FormatError("dtype code unknown: " + std::to_string(dtype));
  h.dtype = static_cast<DType>(dtype);
  h.channels = get_le<std::uint32_t>(in, 12);
  const auto nx = get_le<std::uint32_t>(in, 16);
  const auto ny = get_le<std::uint32_t>(in, 20);
  const auto nz = get_le<std::uint32_t>(in, 24);
  h.spacing = {get_le<float>(in, 28), get_le<float>(in, 32), get_le<float>(in, 36)};

  constexpr std::uint64_t kIntMax = static_cast<std::uint64_t>(std::numeric_limits<int>::max());
  if (h.channels == 0 || nx == 0 || ny == 0 || nz == 0) throw FormatError("zero extent in header");
  if (nx > kIntMax || ny > kIntMax || nz > kIntMax || h.channels > kIntMax)
    throw FormatError("dims overflow");
  // Overflow-checked element count.
  std::uint64_t count = h.channels;
  for (std::uint64_t e : {std::uint64_t{nx}, std::uint64_t{ny}, std::uint64_t{nz}}) {
    if (count > std::numeric_limits<std::uint64_t>::max() / 4 / e) throw FormatError("dims overflow");
    count *= e;
  }
  h.dims = {static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz)};
  const std::uint64_t expected = kHeaderBytes + 4 * count;
  if (in.size() < expected) throw FormatError("truncated payload");
  if (in.size() > expected) throw FormatError("trailing bytes after payload");
  try {
    check_spacing(h.spacing);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return static_cast<std::size_t>(count);
}

template <typename U>
std::vector<U> decode_payload(std::span<const std::uint8_t> in, std::size_t count) {
  std::vector<U> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = get_le<U>(in, kHeaderBytes + 4 * i);
  return out;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void dump(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::string to_string(const Dims& d) {
  return "(" + std::to_string(d.x) + "," + std::to_string(d.y) + "," + std::to_string(d.z) + ")";
}

// ---------------------------------------------------------------------------

Volume::Volume(Dims dims, int channels, Spacing spacing)
    : dims_(dims), channels_(channels), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  data_.assign(dims.voxels() * static_cast<std::size_t>(channels), 0.0f);
}

Volume::Volume(Dims dims, int channels, std::vector<float> data, Spacing spacing)
    : dims_(dims), channels_(channels), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims);
  check_spacing(spacing);
  if (channels < 1) throw std::invalid_argument("channels must be >= 1");
  if (data_.size() != dims.voxels() * static_cast<std::size_t>(channels))
    throw std::invalid_argument("volume data length does not match dims * channels");
}

void Volume::set_spacing(Spacing s) {
  check_spacing(s);
  spacing_ = s;
}

std::span<float> Volume::channel(int c) {
  return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * voxels(), voxels());
}

std::span<const float> Volume::channel(int c) const {
  return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * voxels(), voxels());
}

Volume Volume::channels_slice(int first, int count) const {
  if (first < 0 || count < 1 || first + count > channels_)
    throw std::out_of_range("channel slice out of range");
  const auto begin = data_.begin() + static_cast<std::ptrdiff_t>(first * voxels());
  return Volume(dims_, count,
                std::vector<float>(begin, begin + static_cast<std::ptrdiff_t>(count * voxels())),
                spacing_);
}

Volume stack_channels(std::span<const Volume> parts) {
  if (parts.empty()) throw std::invalid_argument("stack_channels: no inputs");
  int channels = 0;
  for (const auto& p : parts) {
    if (!(p.dims() == parts[0].dims())) throw std::invalid_argument("stack_channels: dims mismatch");
    channels += p.channels();
  }
  std::vector<float> data;
  data.reserve(parts[0].voxels() * static_cast<std::size_t>(channels));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Volume(parts[0].dims(), channels, std::move(data), parts[0].spacing());
}

LabelMap::LabelMap(Dims dims, int num_labels, Spacing spacing)
    : dims_(dims), num_labels_(num_labels), spacing_(spacing) {
  check_dims(dims);
  check_spacing(spacing);
  if (num_labels < 2) throw std::invalid_argument("label count must be >= 2");
  labels_.assign(dims.voxels(), 0);
}

LabelMap::LabelMap(Dims dims, int num_labels, std::vector<std::int32_t> labels, Spacing spacing)
    : dims_(dims), num_labels_(num_labels), spacing_(spacing), labels_(std::move(labels)) {
  check_dims(dims);
  check_spacing(spacing);
  if (num_labels < 2) throw std::invalid_argument("label count must be >= 2");
  if (labels_.size() != dims.voxels()) throw std::invalid_argument("label data length mismatch");
  validate();
}

void LabelMap::set(int x, int y, int z, std::int32_t label) {
  if (label < 0 || label >= num_labels_) throw std::out_of_range("label outside [0, L)");
  labels_[index(x, y, z)] = label;
}

void LabelMap::validate() const {
  for (auto l : labels_)
    if (l < 0 || l >= num_labels_)
      throw std::out_of_range("label " + std::to_string(l) + " outside [0, " +
                              std::to_string(num_labels_) + ")");
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  FileHeader h;
  h.dtype = DType::Float32;
  h.channels = static_cast<std::uint32_t>(v.channels());
  h.dims = v.dims();
  h.spacing = v.spacing();
  return encode(h, v.size(), v.data().data());
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  FileHeader h;
  const std::size_t count = decode_header(bytes, h);
  if (h.dtype != DType::Float32) throw FormatError("expected float32 payload");
  return Volume(h.dims, static_cast<int>(h.channels), decode_payload<float>(bytes, count), h.spacing);
}

std::vector<std::uint8_t> encode_labels(const LabelMap& lm) {
  FileHeader h;
  h.dtype = DType::Int32;
  h.channels = 1;
  h.dims = lm.dims();
  h.spacing = lm.spacing();
  return encode(h, lm.voxels(), lm.labels().data());
}

LabelMap decode_labels(std::span<const std::uint8_t> bytes, int num_labels) {
  FileHeader h;
  const std::size_t count = decode_header(bytes, h);
  if (h.dtype != DType::Int32) throw FormatError("expected int32 label payload");
  if (h.channels != 1) throw FormatError("label volumes must have one channel");
  auto labels = decode_payload<std::int32_t>(bytes, count);
  if (num_labels <= 0) {
    std::int32_t mx = 0;
    for (auto l : labels) {
      if (l < 0) throw FormatError("negative label");
      mx = std::max(mx, l);
    }
    num_labels = std::max(2, static_cast<int>(mx) + 1);
  }
  return LabelMap(h.dims, num_labels, std::move(labels), h.spacing);
}

void write_volume(const Volume& v, const std::filesystem::path& path) { dump(path, encode_volume(v)); }

Volume read_volume(const std::filesystem::path& path) { return decode_volume(slurp(path)); }

void write_labels(const LabelMap& lm, const std::filesystem::path& path) {
  dump(path, encode_labels(lm));
}

LabelMap read_labels(const std::filesystem::path& path, int num_labels) {
  return decode_labels(slurp(path), num_labels);
}

FileHeader read_header(const std::filesystem::path& path) {
  FileHeader h;
  decode_header(slurp(path), h);
  return h;
}

// ---------------------------------------------------------------------------

Volume znormalize(const Volume& v) {
  Volume out(v.dims(), v.channels(), v.spacing());
  const double n = static_cast<double>(v.voxels());
  for (int c = 0; c < v.channels(); ++c) {
    auto in = v.channel(c);
    double mean = 0.0;
    for (float x : in) mean += x;
    mean /= n;
    double var = 0.0;
    for (float x : in) var += (x - mean) * (x - mean);
    var /= n;
    const double sd = std::sqrt(var);
    auto dst = out.channel(c);
    // Degenerate (constant) channels stay at zero.
    if (sd < 1e-8 * std::max(1.0, std::abs(mean))) continue;
    for (std::size_t i = 0; i < in.size(); ++i) dst[i] = static_cast<float>((in[i] - mean) / sd);
  }
  return out;
}

Volume coordinate_maps(Dims dims) {
  Volume out(dims, 3);
  auto coord = [](int i, int n) { return n > 1 ? -1.0f + 2.0f * static_cast<float>(i) / static_cast<float>(n - 1) : 0.0f; };
  for (int z = 0; z < dims.z; ++z)
    for (int y = 0; y < dims.y; ++y)
      for (int x = 0; x < dims.x; ++x) {
        out.at(0, x, y, z) = coord(x, dims.x);
        out.at(1, x, y, z) = coord(y, dims.y);
        out.at(2, x, y, z) = coord(z, dims.z);
      }
  return out;
}

Volume one_hot(const LabelMap& lm, int num_labels) {
  if (num_labels < 2) throw std::invalid_argument("one_hot: L must be >= 2");
  Volume out(lm.dims(), num_labels, lm.spacing());
  const std::size_t n = lm.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    const auto l = lm.labels()[i];
    if (l < 0 || l >= num_labels)
      throw std::out_of_range("one_hot: label " + std::to_string(l) + " >= L");
    out.data()[static_cast<std::size_t>(l) * n + i] = 1.0f;
  }
  return out;
}

LabelMap argmax(const Volume& v) {
  LabelMap out(v.dims(), std::max(2, v.channels()), v.spacing());
  const std::size_t n = v.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    float best_value = v.data()[i];
    for (int c = 1; c < v.channels(); ++c) {
      const float value = v.data()[static_cast<std::size_t>(c) * n + i];
      if (value > best_value) {
        best_value = value;
        best = c;
      }
    }
    out.labels()[i] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------

Index3 patch_origin(const PatchSpec& spec, const Dims& dims) {
  for (int a = 0; a < 3; ++a)
    if (spec.size[a] < 1 || spec.size[a] > dims[a])
      throw std::invalid_argument("patch size " + to_string(spec.size) + " exceeds volume " +
                                  to_string(dims));
  auto origin = [](int c, int p, int n) { return std::clamp(c - p / 2, 0, n - p); };
  return {origin(spec.center.x, spec.size.x, dims.x), origin(spec.center.y, spec.size.y, dims.y),
          origin(spec.center.z, spec.size.z, dims.z)};
}

Volume extract_patch(const Volume& v, const PatchSpec& spec) {
  const Index3 o = patch_origin(spec, v.dims());
  Volume out(spec.size, v.channels(), v.spacing());
  for (int c = 0; c < v.channels(); ++c)
    for (int z = 0; z < spec.size.z; ++z)
      for (int y = 0; y < spec.size.y; ++y) {
        const float* src = &v.data()[v.index(c, o.x, o.y + y, o.z + z)];
        std::copy(src, src + spec.size.x, &out.at(c, 0, y, z));
      }
  return out;
}

LabelMap extract_patch(const LabelMap& lm, const PatchSpec& spec) {
  const Index3 o = patch_origin(spec, lm.dims());
  LabelMap out(spec.size, lm.num_labels(), lm.spacing());
  for (int z = 0; z < spec.size.z; ++z)
    for (int y = 0; y < spec.size.y; ++y) {
      const auto* src = &lm.labels()[lm.index(o.x, o.y + y, o.z + z)];
      std::copy(src, src + spec.size.x, &out.labels()[out.index(0, y, z)]);
    }
  return out;
}

std::vector<Index3> dense_grid_centers(Dims dims, Dims patch, Dims stride) {
  std::array<std::vector<int>, 3> axis_centers;
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw std::invalid_argument("stride must be >= 1");
    if (patch[a] < 1 || patch[a] > dims[a]) throw std::invalid_argument("patch larger than volume");
    for (int start = 0;; start += stride[a]) {
      if (start + patch[a] >= dims[a]) {
        axis_centers[a].push_back(dims[a] - patch[a] + patch[a] / 2);
        break;
      }
      axis_centers[a].push_back(start + patch[a] / 2);
    }
  }
  std::vector<Index3> centers;
  for (int z : axis_centers[2])
    for (int y : axis_centers[1])
      for (int x : axis_centers[0]) centers.push_back({x, y, z});
  return centers;
}

Volume stitch_patches(std::span<const Volume> patches, std::span<const Index3> centers, Dims dims,
                      int channels) {
  if (patches.size() != centers.size()) throw std::invalid_argument("stitch: patch/center count mismatch");
  if (patches.empty()) throw std::invalid_argument("stitch: no patches");
  const Dims psize = patches[0].dims();
  std::vector<double> sum(dims.voxels() * static_cast<std::size_t>(channels), 0.0);
  std::vector<std::uint32_t> count(dims.voxels(), 0);
  for (std::size_t p = 0; p < patches.size(); ++p) {
    const auto& patch = patches[p];
    if (!(patch.dims() == psize) || patch.channels() != channels)
      throw std::invalid_argument("stitch: patches differ in size or channel count");
    const Index3 o = patch_origin({centers[p], psize}, dims);
    for (int z = 0; z < psize.z; ++z)
      for (int y = 0; y < psize.y; ++y)
        for (int x = 0; x < psize.x; ++x) {
          const std::size_t vi = (static_cast<std::size_t>(o.z + z) * dims.y + (o.y + y)) * dims.x + (o.x + x);
          ++count[vi];
          for (int c = 0; c < channels; ++c)
            sum[static_cast<std::size_t>(c) * dims.voxels() + vi] += patch.at(c, x, y, z);
        }
  }
  Volume out(dims, channels);
  for (std::size_t vi = 0; vi < dims.voxels(); ++vi) {
    if (count[vi] == 0) throw std::runtime_error("stitch: voxel not covered by any patch");
    for (int c = 0; c < channels; ++c) {
      const std::size_t i = static_cast<std::size_t>(c) * dims.voxels() + vi;
      out.data()[i] = static_cast<float>(sum[i] / count[vi]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma <= 0.0) return {1.0};
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  return k;
}

// Separable smoothing of an n^3 lattice with clamped borders.
void smooth_lattice(std::vector<double>& a, int n, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(a.size());
  const std::array<int, 3> strides{1, n, n * n};
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < n; ++z)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const int pos[3] = {x, y, z};
          const int base = x + n * (y + n * z) - pos[axis] * strides[axis];
          double acc = 0.0;
          for (int j = -r; j <= r; ++j)
            acc += k[j + r] * a[base + std::clamp(pos[axis] + j, 0, n - 1) * strides[axis]];
          tmp[x + n * (y + n * z)] = acc;
        }
    a.swap(tmp);
  }
}

}  // namespace

Volume random_displacement_field(Dims dims, int control_points, double smoothing, std::mt19937_64& rng) {
  check_dims(dims);
  if (control_points < 2) throw std::invalid_argument("displacement field needs >= 2 control points per axis");
  const int n = control_points;
  std::normal_distribution<double> normal;
  Volume field(dims, 3);
  for (int comp = 0; comp < 3; ++comp) {
    std::vector<double> lattice(static_cast<std::size_t>(n) * n * n);
    for (auto& v : lattice) v = normal(rng);
    smooth_lattice(lattice, n, smoothing);
    double mean = 0.0, var = 0.0;
    for (double v : lattice) mean += v;
    mean /= static_cast<double>(lattice.size());
    for (double v : lattice) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(lattice.size()));
    if (sd > 0.0)
      for (auto& v : lattice) v /= sd;

    auto locate = [n](int i, int extent, int& lo, double& t) {
      const double u = extent > 1 ? static_cast<double>(i) * (n - 1) / (extent - 1) : 0.0;
      lo = std::min(static_cast<int>(u), n - 2);
      t = u - lo;
    };
    auto at = [&](int x, int y, int z) { return lattice[x + n * (y + n * z)]; };
    for (int z = 0; z < dims.z; ++z) {
      int z0;
      double tz;
      locate(z, dims.z, z0, tz);
      for (int y = 0; y < dims.y; ++y) {
        int y0;
        double ty;
        locate(y, dims.y, y0, ty);
        for (int x = 0; x < dims.x; ++x) {
          int x0;
          double tx;
          locate(x, dims.x, x0, tx);
          double v = 0.0;
          for (int c = 0; c < 8; ++c) {
            const int dx = c & 1, dy = (c >> 1) & 1, dz = c >> 2;
            v += (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz) * at(x0 + dx, y0 + dy, z0 + dz);
          }
          field.at(comp, x, y, z) = static_cast<float>(v);
        }
      }
    }
  }
  return field;
}

void limit_displacement(Volume& field, double max_length) {
  if (field.channels() != 3) throw std::invalid_argument("displacement field needs 3 channels");
  if (max_length < 0.0) throw std::invalid_argument("max displacement must be >= 0");
  const std::size_t n = field.voxels();
  double longest = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int c = 0; c < 3; ++c) sq += static_cast<double>(field.data()[c * n + i]) * field.data()[c * n + i];
    longest = std::max(longest, sq);
  }
  longest = std::sqrt(longest);
  const double f = longest > 0.0 ? max_length / longest : 0.0;
  for (auto& v : field.data()) v = static_cast<float>(v * f);
}

float sample_trilinear(const Volume& v, int c, double x, double y, double z) {
  const Dims& d = v.dims();
  x = std::clamp(x, 0.0, d.x - 1.0);
  y = std::clamp(y, 0.0, d.y - 1.0);
  z = std::clamp(z, 0.0, d.z - 1.0);
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y), z0 = static_cast<int>(z);
  const int x1 = std::min(x0 + 1, d.x - 1), y1 = std::min(y0 + 1, d.y - 1), z1 = std::min(z0 + 1, d.z - 1);
  const double tx = x - x0, ty = y - y0, tz = z - z0;
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const double c00 = lerp(v.at(c, x0, y0, z0), v.at(c, x1, y0, z0), tx);
  const double c10 = lerp(v.at(c, x0, y1, z0), v.at(c, x1, y1, z0), tx);
  const double c01 = lerp(v.at(c, x0, y0, z1), v.at(c, x1, y0, z1), tx);
  const double c11 = lerp(v.at(c, x0, y1, z1), v.at(c, x1, y1, z1), tx);
  return static_cast<float>(lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz));
}

namespace {

void check_field(const Volume& field, const Dims& dims) {
  if (field.channels() != 3 || !(field.dims() == dims))
    throw std::invalid_argument("displacement field must be 3 channels on " + to_string(dims));
}

}  // namespace

Volume warp_volume(const Volume& v, const Volume& field) {
  check_field(field, v.dims());
  const Dims& d = v.dims();
  Volume out(d, v.channels(), v.spacing());
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const double px = x + field.at(0, x, y, z), py = y + field.at(1, x, y, z), pz = z + field.at(2, x, y, z);
        for (int c = 0; c < v.channels(); ++c) out.at(c, x, y, z) = sample_trilinear(v, c, px, py, pz);
      }
  return out;
}

LabelMap warp_labels(const LabelMap& lm, const Volume& field) {
  check_field(field, lm.dims());
  const Dims& d = lm.dims();
  LabelMap out(d, lm.num_labels(), lm.spacing());
  auto nearest = [](double p, int n) { return std::clamp(static_cast<int>(std::lround(p)), 0, n - 1); };
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        out.labels()[out.index(x, y, z)] = lm.at(nearest(x + field.at(0, x, y, z), d.x),
                                                 nearest(y + field.at(1, x, y, z), d.y),
                                                 nearest(z + field.at(2, x, y, z), d.z));
  return out;
}

}  // namespace dlf::volcore
