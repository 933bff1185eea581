#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qcm/common.hpp"
#include "qcm/descriptors.hpp"
#include "qcm/kanazawa.hpp"
#include "qcm/lineshape.hpp"
#include "qcm/spectra.hpp"

namespace qcm {

// Shortest decimal form that reads back to the same double (never more than
// 17 significant digits).
inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw InputError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

inline long parse_int(std::string_view s, const std::string& where) {
  long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw InputError(where + ": cannot parse integer '" + std::string(s) + "'");
  return v;
}

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> cells;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<CsvRow> rows;
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

// An empty file reads as a table with no header and no rows.
inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  CsvTable t;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw InputError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(t.header.size()) +
                       " fields, got " + std::to_string(cells.size()));
    t.rows.push_back({n, std::move(cells)});
  }
  return t;
}

inline void expect_header(const CsvTable& t, const std::vector<std::string>& want, const std::filesystem::path& path) {
  if (t.header.empty()) return;
  if (t.header != want) {
    std::string w;
    for (const auto& s : want) w += (w.empty() ? "" : ",") + s;
    throw InputError(path.string() + ":1: header must be '" + w + "'");
  }
}

inline std::string where(const std::filesystem::path& path, const CsvRow& r) {
  return path.string() + ":" + std::to_string(r.line);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

template <class Range>
std::string join(const Range& r, std::string_view sep = ",") {
  std::string out;
  bool first = true;
  for (const auto& v : r) {
    if (!first) out += sep;
    out += v;
    first = false;
  }
  return out;
}

// ---- sweeps ---------------------------------------------------------------

inline void write_sweeps(const std::filesystem::path& path, std::span<const FrequencySweep> sweeps) {
  auto out = open_out(path);
  out << "round,kind,timestamp_s,freq_hz,re_z_ohm,im_z_ohm\n";
  for (const auto& s : sweeps) {
    const std::string head = std::to_string(s.round_index) + "," + std::string(to_string(s.kind)) + "," + fmt(s.timestamp_s) + ",";
    for (std::size_t i = 0; i < s.freq_hz.size(); ++i)
      out << head << fmt(s.freq_hz[i]) << ',' << fmt(s.z_ohm[i].real()) << ',' << fmt(s.z_ohm[i].imag()) << '\n';
  }
}

// Consecutive rows with the same (round, kind) form one sweep.
inline std::vector<FrequencySweep> read_sweeps(const std::filesystem::path& path,
                                               std::size_t expected_points = kSweepPoints) {
  const auto t = read_csv(path);
  expect_header(t, {"round", "kind", "timestamp_s", "freq_hz", "re_z_ohm", "im_z_ohm"}, path);
  std::vector<FrequencySweep> out;
  std::vector<std::size_t> first_line;
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    const int round = static_cast<int>(parse_int(r.cells[0], w));
    const auto kind = parse_feature_kind(r.cells[1]);
    if (!kind) throw InputError(w + ": unknown kind '" + r.cells[1] + "'");
    if (out.empty() || out.back().round_index != round || out.back().kind != *kind) {
      out.push_back({});
      out.back().round_index = round;
      out.back().kind = *kind;
      out.back().timestamp_s = parse_double(r.cells[2], w);
      first_line.push_back(r.line);
    }
    auto& s = out.back();
    const double f = parse_double(r.cells[3], w);
    if (!s.freq_hz.empty() && !(f > s.freq_hz.back()))
      throw InputError(w + ": frequency column not strictly increasing");
    s.freq_hz.push_back(f);
    s.z_ohm.emplace_back(parse_double(r.cells[4], w), parse_double(r.cells[5], w));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    try {
      validate_sweep(out[i], std::nullopt, expected_points);
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(first_line[i]) + ": " + e.what());
    }
  }
  return out;
}

// ---- targets --------------------------------------------------------------

inline void write_targets(const std::filesystem::path& path, std::span<const TargetSample> targets) {
  auto out = open_out(path);
  out << "timestamp_s,target_pct\n";
  for (const auto& t : targets) out << fmt(t.timestamp_s) << ',' << fmt(t.target_pct) << '\n';
}

inline std::vector<TargetSample> read_targets(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  expect_header(t, {"timestamp_s", "target_pct"}, path);
  std::vector<TargetSample> out;
  for (const auto& r : t.rows) out.push_back({parse_double(r.cells[0], where(path, r)), parse_double(r.cells[1], where(path, r))});
  return out;
}

// ---- descriptors ----------------------------------------------------------

inline void write_descriptors(const std::filesystem::path& path, const DescriptorMatrix& d) {
  auto out = open_out(path);
  out << "timestamp_s,target_pct," << join(d.names) << '\n';
  for (std::size_t r = 0; r < d.rows(); ++r) {
    out << fmt(d.timestamps[r]) << ',' << fmt(d.y[r]);
    for (double v : d.x.row(r)) out << ',' << fmt(v);
    out << '\n';
  }
}

inline DescriptorMatrix read_descriptors(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  DescriptorMatrix d;
  if (t.header.empty()) return d;
  if (t.header.size() < 3 || t.header[0] != "timestamp_s" || t.header[1] != "target_pct")
    throw InputError(path.string() + ":1: header must start with 'timestamp_s,target_pct'");
  d.names.assign(t.header.begin() + 2, t.header.end());
  d.x = Matrix(0, d.names.size());
  std::vector<double> row(d.names.size());
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    d.timestamps.push_back(parse_double(r.cells[0], w));
    d.y.push_back(parse_double(r.cells[1], w));
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = parse_double(r.cells[j + 2], w);
    d.x.append_row(row);
  }
  return d;
}

// ---- fits -----------------------------------------------------------------

inline void write_bounds(const std::filesystem::path& path, const FitBounds& b) {
  auto out = open_out(path);
  out << "kind,param,lower,upper\n";
  for (FeatureKind k : kAllFeatures) {
    if (!b.has(k)) continue;
    const auto& names = param_names(k);
    for (std::size_t j = 0; j < names.size(); ++j)
      out << to_string(k) << ',' << names[j] << ',' << fmt(b[k].lower[j]) << ',' << fmt(b[k].upper[j]) << '\n';
  }
}

inline FitBounds read_bounds(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  expect_header(t, {"kind", "param", "lower", "upper"}, path);
  FitBounds b;
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    const auto kind = parse_feature_kind(r.cells[0]);
    if (!kind) throw InputError(w + ": unknown kind '" + r.cells[0] + "'");
    const auto& names = param_names(*kind);
    const auto it = std::find(names.begin(), names.end(), r.cells[1]);
    if (it == names.end()) throw InputError(w + ": unknown parameter '" + r.cells[1] + "'");
    auto& pb = b[*kind];
    if (pb.lower.empty()) {
      pb.lower.assign(names.size(), std::numeric_limits<double>::quiet_NaN());
      pb.upper = pb.lower;
      pb.widened.assign(names.size(), false);
    }
    const auto j = static_cast<std::size_t>(it - names.begin());
    pb.lower[j] = parse_double(r.cells[2], w);
    pb.upper[j] = parse_double(r.cells[3], w);
    if (!(pb.lower[j] < pb.upper[j])) throw InputError(w + ": lower must be below upper");
  }
  for (FeatureKind k : kAllFeatures)
    if (b.has(k))
      for (double v : b[k].lower)
        if (std::isnan(v)) throw InputError(path.string() + ": incomplete bounds for " + std::string(to_string(k)));
  return b;
}

inline void write_fit_report(const std::filesystem::path& path, std::span<const FitRecord> records) {
  auto out = open_out(path);
  out << "round,kind,r2,bounded,active_bounds\n";
  for (const auto& r : records) {
    std::vector<std::string> active;
    for (auto i : r.active_bounds) active.push_back(param_names(r.kind)[i]);
    out << r.round_index << ',' << to_string(r.kind) << ',' << fmt(r.r2) << ',' << (r.bounded ? 1 : 0) << ','
        << join(active, ";") << '\n';
  }
}

// Full fit records: report columns plus the parameters, so `qc` can run later.
inline void write_fit_records(const std::filesystem::path& path, std::span<const FitRecord> records) {
  auto out = open_out(path);
  out << "round,kind,timestamp_s,r2,bounded,error,p0,p1,p2,p3,p4,p5\n";
  for (const auto& r : records) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    out << r.round_index << ',' << to_string(r.kind) << ',' << fmt(r.timestamp_s) << ',' << fmt(r.r2) << ','
        << (r.bounded ? 1 : 0) << ',' << err;
    for (std::size_t j = 0; j < 6; ++j) out << ',' << (j < r.params.size() ? fmt(r.params[j]) : "");
    out << '\n';
  }
}

inline std::vector<FitRecord> read_fit_records(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  expect_header(t, {"round", "kind", "timestamp_s", "r2", "bounded", "error", "p0", "p1", "p2", "p3", "p4", "p5"}, path);
  std::vector<FitRecord> out;
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    FitRecord f;
    f.round_index = static_cast<int>(parse_int(r.cells[0], w));
    const auto kind = parse_feature_kind(r.cells[1]);
    if (!kind) throw InputError(w + ": unknown kind '" + r.cells[1] + "'");
    f.kind = *kind;
    f.timestamp_s = parse_double(r.cells[2], w);
    f.r2 = parse_double(r.cells[3], w);
    f.bounded = r.cells[4] == "1";
    f.error = r.cells[5];
    for (std::size_t j = 0; j < param_count(f.kind); ++j) f.params.push_back(parse_double(r.cells[6 + j], w));
    out.push_back(std::move(f));
  }
  return out;
}

inline void write_qc_drops(const std::filesystem::path& path, std::span<const QcDrop> drops) {
  auto out = open_out(path);
  out << "round,kind,r2,reason\n";
  for (const auto& d : drops) {
    std::string reason = d.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    out << d.round_index << ',' << to_string(d.kind) << ',' << fmt(d.r2) << ',' << reason << '\n';
  }
}

// ---- calibration / baseline -----------------------------------------------

inline ViscosityCalibration read_calibration(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  expect_header(t, {"pct", "eta_pa_s", "rho_kg_m3"}, path);
  std::vector<ViscosityCalibration::Knot> knots;
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    knots.push_back({parse_double(r.cells[0], w), parse_double(r.cells[1], w), parse_double(r.cells[2], w)});
  }
  return ViscosityCalibration(std::move(knots));
}

inline void write_calibration(const std::filesystem::path& path, const ViscosityCalibration& cal) {
  auto out = open_out(path);
  out << "pct,eta_pa_s,rho_kg_m3\n";
  for (const auto& k : cal.knots()) out << fmt(k.pct) << ',' << fmt(k.eta_pa_s) << ',' << fmt(k.rho_kg_m3) << '\n';
}

inline void write_kanazawa(const std::filesystem::path& path, const KanazawaSeries& s) {
  auto out = open_out(path);
  out << "round,timestamp_s,gamma_hz,eta,pred_pct\n";
  for (const auto& p : s.points)
    out << p.round_index << ',' << fmt(p.timestamp_s) << ',' << fmt(p.gamma_hz) << ',' << fmt(p.eta_pa_s) << ','
        << fmt(p.pred_pct) << '\n';
}

inline KanazawaSeries read_kanazawa(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  expect_header(t, {"round", "timestamp_s", "gamma_hz", "eta", "pred_pct"}, path);
  KanazawaSeries s;
  for (const auto& r : t.rows) {
    const auto w = where(path, r);
    KanazawaPoint p;
    p.round_index = static_cast<int>(parse_int(r.cells[0], w));
    p.timestamp_s = parse_double(r.cells[1], w);
    p.gamma_hz = parse_double(r.cells[2], w);
    p.eta_pa_s = parse_double(r.cells[3], w);
    p.pred_pct = parse_double(r.cells[4], w);
    s.points.push_back(p);
  }
  return s;
}

}  // namespace qcm
