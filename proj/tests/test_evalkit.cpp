#include <doctest.h>

#include <cmath>
#include <numbers>
#include <queue>
#include <random>
#include <set>

#include "dlf/evalkit.hpp"
#include "ttest_oracle.hpp"

using namespace dlf::evalkit;
using dlf::volcore::Dims;

namespace {

LabelMap from(Dims d, int L, std::vector<std::int32_t> v) { return LabelMap(d, L, std::move(v)); }

LabelMap random_map(Dims d, int L, std::mt19937& rng) {
  std::uniform_int_distribution<int> lab(0, L - 1);
  LabelMap m(d, L);
  for (auto& l : m.labels()) l = lab(rng);
  return m;
}

Dims random_dims(std::mt19937& rng) {
  std::uniform_int_distribution<int> n(1, 6);
  return {n(rng), n(rng), n(rng)};
}

double brute_gdsc(const LabelMap& a, const LabelMap& b, const std::vector<int>& set) {
  double inter = 0, sa = 0, sb = 0;
  for (int l : set)
    for (int z = 0; z < a.dims().z; ++z)
      for (int y = 0; y < a.dims().y; ++y)
        for (int x = 0; x < a.dims().x; ++x) {
          inter += a.at(x, y, z) == l && b.at(x, y, z) == l;
          sa += a.at(x, y, z) == l;
          sb += b.at(x, y, z) == l;
        }
  return sa + sb == 0 ? 1.0 : 2 * inter / (sa + sb);
}

}  // namespace

TEST_CASE("dsc on constructed masks") {
  const Dims d{4, 4, 1};
  std::vector<std::int32_t> a(16, 0), b(16, 0);
  for (int i = 0; i < 8; ++i) a[i] = 1;
  for (int i = 4; i < 12; ++i) b[i] = 1;
  CHECK(dsc(from(d, 2, a), from(d, 2, b), 1) == 0.5);
  CHECK(dsc(from(d, 2, a), from(d, 2, a), 1) == 1.0);

  std::vector<std::int32_t> c(16, 0);
  for (int i = 8; i < 16; ++i) c[i] = 1;
  CHECK(dsc(from(d, 2, a), from(d, 2, c), 1) == 0.0);

  const auto zeros = from(d, 3, std::vector<std::int32_t>(16, 0));
  CHECK(dsc(zeros, zeros, 2) == 1.0);
  CHECK(dsc(zeros, from(d, 3, a), 1) == 0.0);
  CHECK_THROWS_AS(dsc(zeros, from({4, 2, 2}, 3, std::vector<std::int32_t>(16, 0)), 1), std::invalid_argument);
}

TEST_CASE("gdsc reductions and the pooled example") {
  // Label 1: |A| = 8, |B| = 8, overlap 4. Label 2: |A| = 2, |B| = 2, overlap 1.
  const Dims d{20, 1, 1};
  std::vector<std::int32_t> a(20, 0), b(20, 0);
  for (int i = 0; i < 8; ++i) a[i] = 1;
  for (int i = 4; i < 12; ++i) b[i] = 1;
  a[14] = a[15] = 2;
  b[15] = b[16] = 2;
  const auto A = from(d, 3, a), B = from(d, 3, b);
  const int both[] = {1, 2};
  CHECK(gdsc(A, B, both) == doctest::Approx(2.0 * 5 / 20).epsilon(1e-15));
  const int one[] = {2};
  CHECK(gdsc(A, B, one) == dsc(A, B, 2));
  CHECK(gdsc(A, A, both) == 1.0);
  CHECK_THROWS_AS(gdsc(A, B, std::span<const int>{}), std::invalid_argument);
}

TEST_CASE("dsc and gdsc match voxel counting on random instances") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const Dims d = random_dims(rng);
    const int L = 2 + trial % 4;
    const auto a = random_map(d, L, rng), b = random_map(d, L, rng);
    std::vector<int> set;
    for (int l = 0; l < L; ++l)
      if (rng() % 2) set.push_back(l);
    if (set.empty()) set.push_back(L - 1);
    CHECK(gdsc(a, b, set) == brute_gdsc(a, b, set));
    CHECK(gdsc(a, b, set) == gdsc(b, a, set));
    for (int l = 0; l < L; ++l) CHECK(dsc(a, b, l) == brute_gdsc(a, b, {l}));
    std::vector<int> all(L);
    for (int l = 0; l < L; ++l) all[l] = l;
    CHECK((gdsc(a, b, all) == 1.0) == (a.labels() == b.labels()));
  }
}

TEST_CASE("errormap") {
  std::mt19937 rng(12);
  const Dims d{5, 4, 3};
  const auto a = random_map(d, 4, rng), b = random_map(d, 4, rng);
  for (float v : errormap(a, a).data()) CHECK(v == 0.0f);
  LabelMap comp(d, 4);
  for (std::size_t i = 0; i < a.voxels(); ++i) comp.labels()[i] = (a.labels()[i] + 1) % 4;
  for (float v : errormap(a, comp).data()) CHECK(v == 1.0f);
  const auto e = errormap(a, b);
  CHECK(e.channels() == 1);
  for (std::size_t i = 0; i < a.voxels(); ++i) CHECK(e.data()[i] == (a.labels()[i] != b.labels()[i] ? 1.0f : 0.0f));
  CHECK(errormap(a, b).data() == errormap(b, a).data());
}

TEST_CASE("largest connected component on constructed instances") {
  const Dims d{6, 6, 1};
  LabelMap m(d, 3);
  for (int i = 0; i < 5; ++i) m.set(i, 0, 0, 1), m.set(i, 1, 0, 2);  // 10-voxel blob of mixed labels
  m.set(0, 4, 0, 1), m.set(1, 4, 0, 1), m.set(0, 5, 0, 1);          // 3-voxel blob
  auto mask = largest_cc_mask(m);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) CHECK(mask.at(0, x, y, 0) == (y < 2 && x < 5 ? 1.0f : 0.0f));

  LabelMap diag({2, 2, 2}, 2);
  diag.set(0, 0, 0, 1);
  diag.set(1, 1, 0, 1);
  diag.set(1, 1, 1, 1);
  auto dm = largest_cc_mask(diag);
  CHECK(dm.at(0, 1, 1, 0) == 1.0f);
  CHECK(dm.at(0, 1, 1, 1) == 1.0f);
  CHECK(dm.at(0, 0, 0, 0) == 0.0f);

  // Equal sizes: the component holding the first voxel in storage order wins.
  LabelMap tie({5, 1, 1}, 2, std::vector<std::int32_t>{0, 1, 0, 1, 0});
  auto tm = largest_cc_mask(tie);
  CHECK(tm.data() == std::vector<float>{0, 1, 0, 0, 0});

  for (float v : largest_cc_mask(LabelMap({3, 3, 3}, 2)).data()) CHECK(v == 0.0f);
  LabelMap blob({3, 3, 3}, 4, std::vector<std::int32_t>(27, 3));
  for (float v : largest_cc_mask(blob).data()) CHECK(v == 1.0f);
}

TEST_CASE("largest connected component is connected and maximal") {
  std::mt19937 rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    const Dims d = random_dims(rng);
    auto m = random_map(d, 3, rng);
    const auto mask = largest_cc_mask(m);
    // Oracle: BFS from every foreground voxel, sizes by flood fill.
    const std::size_t n = m.voxels();
    std::vector<int> comp(n, -1);
    std::vector<std::size_t> sizes;
    for (std::size_t s = 0; s < n; ++s) {
      if (m.labels()[s] == 0 || comp[s] >= 0) continue;
      const int id = static_cast<int>(sizes.size());
      std::size_t size = 0;
      std::queue<std::size_t> q;
      q.push(s);
      comp[s] = id;
      while (!q.empty()) {
        const std::size_t i = q.front();
        q.pop();
        ++size;
        const int x = i % d.x, y = (i / d.x) % d.y, z = i / (d.x * d.y);
        for (int k = 0; k < 6; ++k) {
          int p[3] = {x, y, z};
          p[k / 2] += k % 2 ? 1 : -1;
          if (p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= d.x || p[1] >= d.y || p[2] >= d.z) continue;
          const std::size_t j = m.index(p[0], p[1], p[2]);
          if (m.labels()[j] != 0 && comp[j] < 0) comp[j] = id, q.push(j);
        }
      }
      sizes.push_back(size);
    }
    if (sizes.empty()) {
      for (float v : mask.data()) CHECK(v == 0.0f);
      continue;
    }
    const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < n; ++i) CHECK(mask.data()[i] == (comp[i] == best ? 1.0f : 0.0f));
  }
}

TEST_CASE("paired t-test special cases") {
  const std::vector<double> x{0.8, 0.9, 0.85}, d1{1, 1, 1, 1}, z4(4, 0.0);
  auto same = paired_ttest(x, x);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  CHECK_FALSE(same.degenerate);

  auto deg = paired_ttest(d1, z4);
  CHECK(deg.degenerate);
  CHECK(deg.p == 0.0);
  CHECK(std::isinf(deg.t));

  const std::vector<double> d{1, 2, 3, 4, 5}, z5(5, 0.0);
  auto r = paired_ttest(d, z5);
  CHECK(r.t == doctest::Approx(std::sqrt(5.0) * 3 / std::sqrt(2.5)).epsilon(1e-14));
  CHECK(r.df == 4);
  CHECK(std::abs(r.p - oracle::student_t_two_sided(r.t, 4)) < 1e-12);

  CHECK_THROWS_AS(paired_ttest(std::vector<double>{1.0}, std::vector<double>{2.0}), std::invalid_argument);
  CHECK_THROWS_AS(paired_ttest(x, d1), std::invalid_argument);
}

TEST_CASE("paired t-test matches the textbook formulas") {
  std::mt19937 rng(14);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 5 + trial % 16;
    std::vector<double> x(n), y(n);
    const double shift = 0.5 * g(rng);
    for (int i = 0; i < n; ++i) {
      x[i] = 0.8 + 0.05 * g(rng);
      y[i] = x[i] - shift * 0.05 + 0.05 * g(rng);
    }
    const auto ref = oracle::paired(x, y);
    const auto r = paired_ttest(x, y);
    CHECK(std::abs(r.t - ref.t) <= 1e-10 * std::max(1.0, std::abs(ref.t)));
    CHECK(std::abs(r.p - ref.p) <= 1e-10);
    CHECK(r.p >= 0.0);
    CHECK(r.p <= 1.0);
  }
}

TEST_CASE("report keys") {
  const Dims d{2, 2, 1};
  LabelMap a(d, 3, std::vector<std::int32_t>{0, 1, 2, 2});
  a.set_spacing({0.5f, 1.0f, 2.0f});
  auto r = evaluate(a, a);
  CHECK(r.gdsc == 1.0);
  CHECK(r.gdsc_labels == std::vector<int>{1, 2});
  CHECK(r.volume[2] == 2.0);
  const auto text = format_report(r);
  CHECK(text.find("gdsc=1.000000\n") != std::string::npos);
  CHECK(text.find("gdsc_pct=100.000000\n") != std::string::npos);
  CHECK(text.find("volume_mm3.2=2.000000\n") != std::string::npos);
}
