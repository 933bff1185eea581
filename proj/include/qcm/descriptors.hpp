#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/lineshape.hpp"
#include "qcm/spectra.hpp"

namespace qcm {

inline constexpr std::size_t kDescriptorCount = 52;

// <Kind>.<param> for every kind in acquisition order: 8 x 6 Gaussian + 4 Lorentzian.
inline const std::vector<std::string>& descriptor_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (FeatureKind k : kAllFeatures)
      for (const auto& p : param_names(k)) out.push_back(std::string(to_string(k)) + "." + p);
    return out;
  }();
  return names;
}

struct DescriptorMatrix {
  std::vector<std::string> names = descriptor_names();
  Matrix x{0, kDescriptorCount};
  std::vector<double> y;
  std::vector<double> timestamps;

  std::size_t rows() const { return x.rows(); }

  DescriptorMatrix select_rows(std::span<const std::size_t> idx) const {
    DescriptorMatrix out;
    out.names = names;
    out.x = x.select_rows(idx);
    for (auto i : idx) {
      out.y.push_back(y[i]);
      out.timestamps.push_back(timestamps[i]);
    }
    return out;
  }

  friend bool operator==(const DescriptorMatrix&, const DescriptorMatrix&) = default;
};

// One 52-value row from the nine fits of a round, in canonical name order.
inline std::vector<double> assemble_round(std::span<const FitRecord> fits) {
  std::array<const FitRecord*, kFeatureCount> by_kind{};
  std::string dup;
  for (const auto& f : fits) {
    auto& slot = by_kind[index_of(f.kind)];
    if (slot) dup += (dup.empty() ? "" : ",") + std::string(to_string(f.kind));
    slot = &f;
  }
  std::string missing;
  for (FeatureKind k : kAllFeatures)
    if (!by_kind[index_of(k)]) missing += (missing.empty() ? "" : ",") + std::string(to_string(k));
  if (!dup.empty() || !missing.empty())
    throw InputError("assemble_round: duplicate kinds [" + dup + "], missing kinds [" + missing + "]");
  std::vector<double> row;
  row.reserve(kDescriptorCount);
  for (FeatureKind k : kAllFeatures) {
    const auto& p = by_kind[index_of(k)]->params;
    if (p.size() != param_count(k))
      throw InputError("assemble_round: " + std::string(to_string(k)) + " has " + std::to_string(p.size()) +
                       " parameters");
    row.insert(row.end(), p.begin(), p.end());
  }
  return row;
}

// Linear interpolation of the reference series at t, clamped at both ends.
inline double interpolate_target(std::span<const TargetSample> targets, double t) {
  if (targets.empty()) throw InputError("interpolate_target: empty target series");
  if (t <= targets.front().timestamp_s) return targets.front().target_pct;
  if (t >= targets.back().timestamp_s) return targets.back().target_pct;
  const auto it = std::upper_bound(targets.begin(), targets.end(), t,
                                   [](double v, const TargetSample& s) { return v < s.timestamp_s; });
  const auto& b = *it;
  const auto& a = *(it - 1);
  if (b.timestamp_s == a.timestamp_s) return a.target_pct;
  const double w = (t - a.timestamp_s) / (b.timestamp_s - a.timestamp_s);
  return a.target_pct + w * (b.target_pct - a.target_pct);
}

struct DescriptorBuild {
  DescriptorMatrix matrix;
  std::vector<int> rounds;          // round index of each row
  std::vector<int> dropped_rounds;  // rounds with a missing or failed kind
};

// Rows from QC-retained fits. A round missing any kind is dropped whole. The
// row timestamp is the mean of its sweep timestamps; targets are interpolated there.
inline DescriptorBuild build_descriptors(std::span<const FitRecord> retained, std::span<const TargetSample> targets,
                                         std::span<const int> all_rounds = {}) {
  std::vector<TargetSample> sorted(targets.begin(), targets.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const TargetSample& a, const TargetSample& b) { return a.timestamp_s < b.timestamp_s; });
  std::map<int, std::vector<FitRecord>> by_round;
  for (const auto& r : retained) by_round[r.round_index].push_back(r);
  for (int r : all_rounds) by_round.try_emplace(r);

  DescriptorBuild out;
  for (const auto& [round, fits] : by_round) {
    std::array<int, kFeatureCount> count{};
    for (const auto& f : fits) ++count[index_of(f.kind)];
    const bool complete = std::all_of(count.begin(), count.end(), [](int c) { return c == 1; });
    if (!complete) {
      if (std::any_of(count.begin(), count.end(), [](int c) { return c > 1; })) assemble_round(fits);  // throws
      out.dropped_rounds.push_back(round);
      continue;
    }
    const auto row = assemble_round(fits);
    double t = 0.0;
    for (const auto& f : fits) t += f.timestamp_s;
    t /= static_cast<double>(fits.size());
    out.matrix.x.append_row(row);
    out.matrix.timestamps.push_back(t);
    out.matrix.y.push_back(interpolate_target(sorted, t));
    out.rounds.push_back(round);
  }
  return out;
}

}  // namespace qcm
