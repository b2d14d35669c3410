#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "dlf/volcore.hpp"

using namespace dlf::volcore;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) { return fs::temp_directory_path() / ("dlf_volcore_" + name); }

Volume random_volume(Dims d, int c, std::mt19937& rng) {
  std::normal_distribution<float> n(3.0f, 2.0f);
  Volume v(d, c);
  for (auto& x : v.data()) x = n(rng);
  return v;
}

}  // namespace

TEST_CASE("DLFV round trip is bit exact for both dtypes") {
  std::mt19937 rng(1);
  Volume v = random_volume({3, 3, 3}, 2, rng);
  v.set_spacing({0.4f, 0.4f, 1.2f});
  const auto path = temp_file("rt.dlfv");
  write_volume(v, path);
  Volume back = read_volume(path);
  CHECK(back.dims() == v.dims());
  CHECK(back.channels() == 2);
  CHECK(back.spacing() == v.spacing());
  CHECK(std::memcmp(back.data().data(), v.data().data(), v.size() * sizeof(float)) == 0);

  // Re-encoding yields the same bytes.
  CHECK(encode_volume(back) == encode_volume(v));

  std::uniform_int_distribution<int> lab(0, 4);
  LabelMap lm({4, 2, 3}, 5);
  for (auto& l : lm.labels()) l = lab(rng);
  write_labels(lm, path);
  LabelMap lb = read_labels(path, 5);
  CHECK(lb.labels() == lm.labels());
  CHECK(read_header(path).dtype == DType::Int32);
  fs::remove(path);
}

TEST_CASE("DLFV header is 40 bytes") {
  Volume v({1, 1, 1}, 1);
  const auto bytes = encode_volume(v);
  CHECK(bytes.size() == kHeaderBytes + 4);
  CHECK(kHeaderBytes == 40);
  CHECK(bytes[0] == 0x44);
  CHECK(bytes[1] == 0x4C);
  CHECK(bytes[2] == 0x46);
  CHECK(bytes[3] == 0x56);
  CHECK(bytes[4] == 1);  // version, little-endian
  CHECK(bytes[8] == 0);  // dtype float32
  CHECK(bytes[9] == 0);
  CHECK(bytes[10] == 0);
  CHECK(bytes[11] == 0);
}

TEST_CASE("DLFV decoding errors") {
  Volume v({2, 2, 2}, 1);
  auto bytes = encode_volume(v);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  bad_magic[1] = 'X';
  bad_magic[2] = 'X';
  bad_magic[3] = 'X';
  CHECK_THROWS_WITH_AS(decode_volume(bad_magic), "bad magic", FormatError);

  auto bad_dtype = bytes;
  bad_dtype[8] = 7;
  CHECK_THROWS_WITH_AS(decode_volume(bad_dtype), "dtype code unknown: 7", FormatError);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_WITH_AS(decode_volume(truncated), "truncated payload", FormatError);

  auto huge = bytes;
  for (int i = 16; i < 28; ++i) huge[i] = 0xFF;  // Nx, Ny, Nz = 2^32 - 1
  CHECK_THROWS_WITH_AS(decode_volume(huge), "dims overflow", FormatError);

  CHECK_THROWS_AS(decode_labels(bytes), FormatError);  // float payload read as labels
}

TEST_CASE("znormalize") {
  Volume c({4, 1, 1}, 1, std::vector<float>{2, 2, 2, 2});
  for (float v : znormalize(c).data()) CHECK(v == 0.0f);

  Volume two({2, 1, 1}, 1, std::vector<float>{0, 2});
  auto z = znormalize(two);
  CHECK(z.data()[0] == doctest::Approx(-1.0));
  CHECK(z.data()[1] == doctest::Approx(1.0));

  std::mt19937 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Volume v = random_volume({5, 4, 3}, 2, rng);
    auto n = znormalize(v);
    for (int ch = 0; ch < 2; ++ch) {
      double m = 0, s = 0;
      for (float x : n.channel(ch)) m += x;
      m /= 60.0;
      for (float x : n.channel(ch)) s += (x - m) * (x - m);
      s = std::sqrt(s / 60.0);
      CHECK(std::abs(m) < 1e-5);
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
    // Idempotent up to 1e-5.
    auto nn = znormalize(n);
    for (std::size_t i = 0; i < n.size(); ++i) CHECK(std::abs(nn.data()[i] - n.data()[i]) < 1e-5);
  }
}

TEST_CASE("coordinate maps") {
  auto c = coordinate_maps({3, 1, 1});
  CHECK(c.at(0, 0, 0, 0) == -1.0f);
  CHECK(c.at(0, 1, 0, 0) == 0.0f);
  CHECK(c.at(0, 2, 0, 0) == 1.0f);
  for (float v : coordinate_maps({1, 1, 1}).data()) CHECK(v == 0.0f);

  auto d = coordinate_maps({4, 5, 6});
  for (int k = 0; k < 3; ++k) {
    auto ch = d.channel(k);
    CHECK(*std::min_element(ch.begin(), ch.end()) == -1.0f);
    CHECK(*std::max_element(ch.begin(), ch.end()) == 1.0f);
  }
}

TEST_CASE("one_hot and argmax") {
  LabelMap lm({2, 1, 1}, 3, std::vector<std::int32_t>{0, 2});
  auto oh = one_hot(lm, 3);
  CHECK(oh.data() == std::vector<float>{1, 0, 0, 0, 0, 1});

  LabelMap zero({2, 2, 1}, 4);
  auto oz = one_hot(zero, 4);
  for (float v : oz.channel(0)) CHECK(v == 1.0f);
  for (int c = 1; c < 4; ++c)
    for (float v : oz.channel(c)) CHECK(v == 0.0f);

  CHECK_THROWS_AS(one_hot(lm, 2), std::out_of_range);

  std::mt19937 rng(9);
  std::uniform_int_distribution<int> lab(0, 5);
  LabelMap r({5, 4, 3}, 6);
  for (auto& l : r.labels()) l = lab(rng);
  auto o = one_hot(r, 6);
  for (std::size_t i = 0; i < r.voxels(); ++i) {
    float s = 0;
    for (int c = 0; c < 6; ++c) s += o.channel(c)[i];
    CHECK(s == 1.0f);
  }
  CHECK(argmax(o).labels() == r.labels());
}

TEST_CASE("extract_patch clamps the center") {
  Volume v({5, 5, 5}, 1);
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(i);

  auto interior = extract_patch(v, {{2, 2, 2}, {3, 3, 3}});
  CHECK(interior.at(0, 0, 0, 0) == v.at(0, 1, 1, 1));
  CHECK(interior.at(0, 2, 2, 2) == v.at(0, 3, 3, 3));

  auto corner = extract_patch(v, {{0, 0, 0}, {3, 3, 3}});
  CHECK(patch_origin({{0, 0, 0}, {3, 3, 3}}, v.dims()) == Index3{0, 0, 0});
  CHECK(corner.at(0, 0, 0, 0) == v.at(0, 0, 0, 0));
  CHECK(corner.at(0, 2, 2, 2) == v.at(0, 2, 2, 2));

  auto whole = extract_patch(v, {{2, 2, 2}, {5, 5, 5}});
  CHECK(whole.data() == v.data());

  CHECK_THROWS_AS(extract_patch(v, {{2, 2, 2}, {6, 5, 5}}), std::invalid_argument);
}

TEST_CASE("dense grid centers") {
  auto one = dense_grid_centers({72, 72, 72}, {72, 72, 72}, {36, 36, 36});
  CHECK(one.size() == 1);

  // Axis of 100 with 72-voxel patches: starts {0, 28}, i.e. centers {36, 64}.
  auto two = dense_grid_centers({100, 72, 72}, {72, 72, 72}, {36, 36, 36});
  REQUIRE(two.size() == 2);
  CHECK(two[0].x == 36);
  CHECK(two[1].x == 64);

  std::mt19937 rng(3);
  std::uniform_int_distribution<int> ext(3, 20), stride(1, 8);
  for (int trial = 0; trial < 50; ++trial) {
    Dims d{ext(rng), ext(rng), ext(rng)};
    Dims p{std::min(d.x, 3 + trial % 5), std::min(d.y, 3), std::min(d.z, 2 + trial % 3)};
    Dims s{std::min(p.x, stride(rng)), std::min(p.y, stride(rng)), std::min(p.z, stride(rng))};
    std::vector<int> covered(d.voxels(), 0);
    for (const auto& c : dense_grid_centers(d, p, s)) {
      const auto o = patch_origin({c, p}, d);
      for (int z = 0; z < p.z; ++z)
        for (int y = 0; y < p.y; ++y)
          for (int x = 0; x < p.x; ++x) covered[(static_cast<std::size_t>(o.z + z) * d.y + o.y + y) * d.x + o.x + x] = 1;
    }
    CHECK(std::count(covered.begin(), covered.end(), 0) == 0);
  }
}

TEST_CASE("stitch_patches averages overlaps") {
  Volume p({4, 4, 4}, 2);
  for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = static_cast<float>(i) * 0.5f;
  std::vector<Volume> single{p};
  std::vector<Index3> c1{{2, 2, 2}};
  CHECK(stitch_patches(single, c1, {4, 4, 4}, 2).data() == p.data());

  // Two half-overlapping patches along x: [0,4) and [2,6).
  Volume a({4, 1, 1}, 1, std::vector<float>{0, 0, 0, 0});
  Volume b({4, 1, 1}, 1, std::vector<float>{1, 1, 1, 1});
  std::vector<Volume> ab{a, b};
  std::vector<Index3> cab{{2, 0, 0}, {4, 0, 0}};
  auto s = stitch_patches(ab, cab, {6, 1, 1}, 1);
  CHECK(s.data() == std::vector<float>{0, 0, 0.5f, 0.5f, 1, 1});

  // Constant logits stitch to a constant label map.
  Volume k({4, 1, 1}, 3, std::vector<float>{0, 0, 0, 0, 2, 2, 2, 2, 1, 1, 1, 1});
  std::vector<Volume> kk{k, k};
  for (auto l : argmax(stitch_patches(kk, cab, {6, 1, 1}, 3)).labels()) CHECK(l == 1);

  std::vector<Index3> gap{{2, 0, 0}};
  std::vector<Volume> onlya{a};
  CHECK_THROWS_AS(stitch_patches(onlya, gap, {6, 1, 1}, 1), std::runtime_error);
}

TEST_CASE("displacement fields") {
  std::mt19937_64 a(5), b(5);
  const Dims d{9, 7, 5};
  auto f = random_displacement_field(d, 4, 0.5, a);
  CHECK(f.channels() == 3);
  CHECK(f.data() == random_displacement_field(d, 4, 0.5, b).data());
  double sq = 0.0;
  for (float v : f.data()) sq += v * v;
  CHECK(sq > 0.0);

  limit_displacement(f, 1.5);
  double longest = 0.0;
  for (std::size_t i = 0; i < f.voxels(); ++i) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += f.data()[c * f.voxels() + i] * f.data()[c * f.voxels() + i];
    longest = std::max(longest, std::sqrt(s));
  }
  CHECK(longest == doctest::Approx(1.5).epsilon(1e-6));
  limit_displacement(f, 0.0);
  for (float v : f.data()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(random_displacement_field(d, 1, 0.0, a), std::invalid_argument);
}

TEST_CASE("warping") {
  std::mt19937 rng(21);
  const Dims d{6, 5, 4};
  const auto v = random_volume(d, 2, rng);
  LabelMap lm(d, 4);
  for (auto& l : lm.labels()) l = static_cast<int>(rng() % 4);

  const Volume zero(d, 3);
  CHECK(warp_volume(v, zero).data() == v.data());
  CHECK(warp_labels(lm, zero).labels() == lm.labels());

  // Whole-voxel shift by +1 along x: out(x) = in(x + 1), clamped at the edge.
  Volume shift(d, 3);
  for (auto& x : shift.channel(0)) x = 1.0f;
  const auto ws = warp_volume(v, shift);
  const auto ls = warp_labels(lm, shift);
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        const int sx = std::min(x + 1, d.x - 1);
        CHECK(ws.at(1, x, y, z) == v.at(1, sx, y, z));
        CHECK(ls.at(x, y, z) == lm.at(sx, y, z));
      }

  // Half-voxel shift: trilinear midpoint.
  for (auto& x : shift.channel(0)) x = 0.5f;
  const auto half = warp_volume(v, shift);
  CHECK(half.at(0, 2, 1, 1) == doctest::Approx(0.5 * (v.at(0, 2, 1, 1) + v.at(0, 3, 1, 1))).epsilon(1e-6));

  std::mt19937_64 frng(3);
  auto f = random_displacement_field(d, 3, 0.0, frng);
  limit_displacement(f, 3.0);
  Volume flat(d, 1);
  for (auto& x : flat.data()) x = 2.75f;
  for (float x : warp_volume(flat, f).data()) CHECK(std::abs(x - 2.75f) <= 1e-6);
  const auto wl = warp_labels(lm, f);
  std::set<int> before(lm.labels().begin(), lm.labels().end()), after(wl.labels().begin(), wl.labels().end());
  CHECK(std::includes(before.begin(), before.end(), after.begin(), after.end()));
  CHECK_THROWS_AS(warp_volume(v, Volume({2, 2, 2}, 3)), std::invalid_argument);
}
