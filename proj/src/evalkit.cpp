#include "dlf/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <boost/math/special_functions/beta.hpp>

namespace dlf::evalkit {

namespace {

void check_same(const LabelMap& a, const LabelMap& b) {
  if (!(a.dims() == b.dims()))
    throw std::invalid_argument("label maps differ in dims: " + to_string(a.dims()) + " vs " + to_string(b.dims()));
}

}  // namespace

double dsc(const LabelMap& a, const LabelMap& b, int label) {
  const int labels[1] = {label};
  return gdsc(a, b, labels);
}

double gdsc(const LabelMap& a, const LabelMap& b, std::span<const int> labels) {
  check_same(a, b);
  if (labels.empty()) throw std::invalid_argument("gdsc: empty label set");
  std::size_t inter = 0, total = 0;
  const auto& la = a.labels();
  const auto& lb = b.labels();
  for (int l : labels)
    for (std::size_t i = 0; i < la.size(); ++i) {
      const bool in_a = la[i] == l, in_b = lb[i] == l;
      inter += in_a && in_b;
      total += in_a + in_b;
    }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

Volume errormap(const LabelMap& pred, const LabelMap& ref) {
  check_same(pred, ref);
  Volume out(pred.dims(), 1, pred.spacing());
  for (std::size_t i = 0; i < pred.voxels(); ++i) out.data()[i] = pred.labels()[i] != ref.labels()[i] ? 1.0f : 0.0f;
  return out;
}

Volume largest_cc_mask(const LabelMap& lm) {
  const auto& d = lm.dims();
  const std::size_t n = lm.voxels();
  std::vector<int> comp(n, -1);
  std::vector<std::size_t> stack;
  int best = -1;
  std::size_t best_size = 0;
  int next = 0;
  // Components are discovered in increasing order of their smallest voxel,
  // so a strict > keeps the earliest one on ties.
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (lm.labels()[seed] == 0 || comp[seed] >= 0) continue;
    const int id = next++;
    std::size_t size = 0;
    comp[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      const int x = static_cast<int>(i % d.x);
      const int y = static_cast<int>((i / d.x) % d.y);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(d.x) * d.y));
      const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= d.x || q[1] >= d.y || q[2] >= d.z) continue;
        const std::size_t j = lm.index(q[0], q[1], q[2]);
        if (lm.labels()[j] == 0 || comp[j] >= 0) continue;
        comp[j] = id;
        stack.push_back(j);
      }
    }
    if (size > best_size) {
      best_size = size;
      best = id;
    }
  }
  Volume out(d, 1, lm.spacing());
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = comp[i] == best && best >= 0 ? 1.0f : 0.0f;
  return out;
}

LabelMap apply_mask(const LabelMap& lm, const Volume& mask) {
  if (!(mask.dims() == lm.dims()) || mask.channels() != 1) throw std::invalid_argument("mask shape differs");
  LabelMap out = lm;
  for (std::size_t i = 0; i < lm.voxels(); ++i)
    if (mask.data()[i] == 0.0f) out.labels()[i] = 0;
  return out;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0)) throw std::invalid_argument("student t: df must be > 0");
  if (std::isinf(t)) return 0.0;
  // P(|T| > t) = I_{df / (df + t^2)}(df / 2, 1 / 2)
  return boost::math::ibeta(df / 2.0, 0.5, df / (df + t * t));
}

TTest paired_ttest(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("paired_ttest: sample sizes differ");
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("paired_ttest: need n >= 2");
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i] - y[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (x[i] - y[i] - mean) * (x[i] - y[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTest r;
  r.df = static_cast<int>(n - 1);
  r.mean_diff = mean;
  if (sd == 0.0) {
    if (mean == 0.0) return r;
    r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p = 0.0;
    r.degenerate = true;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = student_t_two_sided(r.t, r.df);
  return r;
}

MetricReport evaluate(const LabelMap& pred, const LabelMap& ref, std::vector<int> gdsc_labels) {
  check_same(pred, ref);
  const int L = std::max(pred.num_labels(), ref.num_labels());
  if (gdsc_labels.empty())
    for (int l = 1; l < L; ++l) gdsc_labels.push_back(l);
  MetricReport r;
  const auto& sp = pred.spacing();
  const double voxel_mm3 = static_cast<double>(sp.x) * sp.y * sp.z;
  r.volume.assign(L, 0.0);
  r.ref_volume.assign(L, 0.0);
  for (std::size_t i = 0; i < pred.voxels(); ++i) {
    r.volume[pred.labels()[i]] += voxel_mm3;
    r.ref_volume[ref.labels()[i]] += voxel_mm3;
  }
  for (int l = 0; l < L; ++l) r.dsc.push_back(dsc(pred, ref, l));
  r.gdsc_labels = gdsc_labels;
  r.gdsc = gdsc(pred, ref, gdsc_labels);
  return r;
}

std::string format_report(const MetricReport& r) {
  std::ostringstream out;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  out << "gdsc=" << num(r.gdsc) << "\n";
  out << "gdsc_pct=" << num(100.0 * r.gdsc) << "\n";
  out << "gdsc_labels=";
  for (std::size_t i = 0; i < r.gdsc_labels.size(); ++i) out << (i ? "," : "") << r.gdsc_labels[i];
  out << "\n";
  for (std::size_t l = 0; l < r.dsc.size(); ++l) {
    out << "dsc." << l << "=" << num(r.dsc[l]) << "\n";
    out << "dsc_pct." << l << "=" << num(100.0 * r.dsc[l]) << "\n";
    out << "volume_mm3." << l << "=" << num(r.volume[l]) << "\n";
    out << "ref_volume_mm3." << l << "=" << num(r.ref_volume[l]) << "\n";
  }
  return out.str();
}

}  // namespace dlf::evalkit
