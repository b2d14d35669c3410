#pragma once

// Overlap metrics, error maps, connected-component post-processing and the
// paired t-test.

#include <span>
#include <string>
#include <vector>

#include "dlf/volcore.hpp"

namespace dlf::evalkit {

using volcore::LabelMap;
using volcore::Volume;

/// 2|A n B| / (|A| + |B|) for the masks of `label`; both empty gives 1.
double dsc(const LabelMap& a, const LabelMap& b, int label);

/// 2 sum_l |A_l n B_l| / sum_l (|A_l| + |B_l|) over `labels`; 1 when all empty.
double gdsc(const LabelMap& a, const LabelMap& b, std::span<const int> labels);

/// 1 where the labels differ, else 0 (1 channel).
Volume errormap(const LabelMap& pred, const LabelMap& ref);

/// Largest 6-connected component of the nonzero labels as a 0/1 volume. Ties
/// go to the component holding the smallest linear voxel index; no
/// foreground gives all zeros.
Volume largest_cc_mask(const LabelMap& lm);

/// Labels outside the mask become background.
LabelMap apply_mask(const LabelMap& lm, const Volume& mask);

struct TTest {
  double t = 0.0;
  double p = 1.0;  // two-sided
  int df = 0;
  double mean_diff = 0.0;
  bool degenerate = false;  // zero spread with nonzero mean: t infinite, p 0
};

/// Paired two-sided t-test on d = x - y. Throws if sizes differ or n < 2.
TTest paired_ttest(std::span<const double> x, std::span<const double> y);

/// Two-sided Student t tail probability 2 P(T > |t|) for `df` degrees.
double student_t_two_sided(double t, double df);

struct MetricReport {
  std::vector<double> dsc;     // per label 0..L-1
  std::vector<double> volume;  // mm^3 of each label in pred
  std::vector<double> ref_volume;
  std::vector<int> gdsc_labels;
  double gdsc = 1.0;
};

/// gdsc_labels empty means every foreground label 1..L-1.
MetricReport evaluate(const LabelMap& pred, const LabelMap& ref, std::vector<int> gdsc_labels = {});

/// Flat key=value lines; overlap scores are also given x100 as *_pct keys.
std::string format_report(const MetricReport& r);

}  // namespace dlf::evalkit
