#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "neurocell/cell_class.hpp"
#include "neurocell/errors.hpp"
#include "neurocell/image.hpp"

namespace neurocell {

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumCellClasses>, kNumCellClasses> counts{};

  std::size_t& at(CellClass truth, CellClass pred) { return counts[ordinal(truth)][ordinal(pred)]; }
  std::size_t at(CellClass truth, CellClass pred) const { return counts[ordinal(truth)][ordinal(pred)]; }

  std::size_t row_sum(std::size_t r) const {
    std::size_t s = 0;
    for (std::size_t v : counts[r]) s += v;
    return s;
  }
  std::size_t col_sum(std::size_t c) const {
    std::size_t s = 0;
    for (const auto& row : counts) s += row[c];
    return s;
  }
  std::size_t trace() const {
    std::size_t s = 0;
    for (std::size_t i = 0; i < kNumCellClasses; ++i) s += counts[i][i];
    return s;
  }
  std::size_t total() const {
    std::size_t s = 0;
    for (std::size_t r = 0; r < kNumCellClasses; ++r) s += row_sum(r);
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t r = 0; r < kNumCellClasses; ++r) {
      for (std::size_t c = 0; c < kNumCellClasses; ++c) counts[r][c] += o.counts[r][c];
    }
    return *this;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Percentages. A class with no true (or no negative) samples gets NaN.
struct ClassMetrics {
  ConfusionMatrix matrix;
  std::array<double, kNumCellClasses> sensitivity{};
  std::array<double, kNumCellClasses> specificity{};
  double accuracy = 0.0;
};

inline ClassMetrics metrics_from_matrix(const ConfusionMatrix& m) {
  if (m.total() == 0) throw ContractError("confusion matrix is empty");
  ClassMetrics out;
  out.matrix = m;
  const auto total = static_cast<double>(m.total());
  for (std::size_t k = 0; k < kNumCellClasses; ++k) {
    const auto tp = static_cast<double>(m.counts[k][k]);
    const auto positives = static_cast<double>(m.row_sum(k));
    const double negatives = total - positives;
    const double tn = negatives - (static_cast<double>(m.col_sum(k)) - tp);
    out.sensitivity[k] = positives > 0 ? 100.0 * tp / positives : std::nan("");
    out.specificity[k] = negatives > 0 ? 100.0 * tn / negatives : std::nan("");
  }
  out.accuracy = 100.0 * static_cast<double>(m.trace()) / total;
  return out;
}

inline ClassMetrics confusion_and_metrics(const std::vector<CellClass>& truths, const std::vector<CellClass>& preds) {
  if (truths.size() != preds.size()) {
    throw ContractError("confusion_and_metrics: " + std::to_string(truths.size()) + " truths but " +
                        std::to_string(preds.size()) + " predictions");
  }
  if (truths.empty()) throw ContractError("confusion_and_metrics: no samples");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < truths.size(); ++i) ++m.at(truths[i], preds[i]);
  return metrics_from_matrix(m);
}

/// Smallest 1-based epoch e with max(curve[e..]) - curve[e] < epsilon.
inline std::size_t saturation_epoch(const std::vector<double>& curve, double epsilon = 0.5) {
  if (curve.empty()) throw ContractError("saturation_epoch: empty curve");
  std::vector<double> suffix_max(curve.size());
  double running = -std::numeric_limits<double>::infinity();
  for (std::size_t i = curve.size(); i-- > 0;) {
    running = std::max(running, curve[i]);
    suffix_max[i] = running;
  }
  for (std::size_t e = 0; e < curve.size(); ++e) {
    if (suffix_max[e] - curve[e] < epsilon) return e + 1;
  }
  return curve.size();
}

/// Pixel agreement (percent) after binarizing both maps at tau (p > tau).
inline double segmentation_accuracy(const Image& pred, const Image& target, double tau = 0.5) {
  if (pred.channels != target.channels || pred.height != target.height || pred.width != target.width) {
    throw DimensionError("segmentation_accuracy: prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs target " + std::to_string(target.height) + "x" +
                         std::to_string(target.width));
  }
  if (pred.pixels.empty()) throw DimensionError("segmentation_accuracy: empty maps");
  std::size_t agree = 0;
  for (std::size_t i = 0; i < pred.pixels.size(); ++i) agree += (pred.pixels[i] > tau) == (target.pixels[i] > tau);
  return 100.0 * static_cast<double>(agree) / static_cast<double>(pred.pixels.size());
}

// ---------------------------------------------------------------------------
// Reports

/// One row of the cross-validation table.
struct ReportRow {
  std::string method;
  double mean_saturation = 0.0;
  double mean_best = 0.0;
  double std_best = 0.0;
  std::size_t saturation_epoch = 0;
  bool operator==(const ReportRow&) const = default;
};

inline constexpr const char* kReportColumns[5] = {"Methods (Transfer Layer)", "Mean Accuracy (saturation)",
                                                  "Mean Accuracy (best epoch)", "Standard Deviation",
                                                  "Saturation Epoch"};

inline std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV line: " + line);
  return out;
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out;
  for (std::size_t i = 0; i < 5; ++i) out += (i ? "," : "") + csv_field(kReportColumns[i]);
  out += '\n';
  for (const ReportRow& r : rows) {
    out += csv_field(r.method) + "," + fixed3(r.mean_saturation) + "," + fixed3(r.mean_best) + "," +
           fixed3(r.std_best) + "," + std::to_string(r.saturation_epoch) + "\n";
  }
  return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  // Leading '#' lines carry run metadata.
  while (std::getline(in, line) && !line.empty() && line[0] == '#') {
  }
  if (line.empty() || split_csv_line(line).size() != 5) throw FormatError("report CSV: bad header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw FormatError("report CSV: expected 5 fields in '" + line + "'");
    try {
      rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoul(f[4])});
    } catch (const std::exception&) {
      throw FormatError("report CSV: non-numeric field in '" + line + "'");
    }
  }
  return rows;
}

/// Column-aligned plain text with the same columns as the CSV.
inline std::string report_text(const std::vector<ReportRow>& rows) {
  std::vector<std::array<std::string, 5>> cells;
  cells.push_back({kReportColumns[0], kReportColumns[1], kReportColumns[2], kReportColumns[3], kReportColumns[4]});
  for (const ReportRow& r : rows) {
    cells.push_back({r.method, fixed3(r.mean_saturation), fixed3(r.mean_best), fixed3(r.std_best),
                     std::to_string(r.saturation_epoch)});
  }
  std::array<std::size_t, 5> width{};
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < 5; ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::string out;
  for (const auto& row : cells) {
    std::string line;
    for (std::size_t i = 0; i < 5; ++i) {
      const std::string pad(width[i] - row[i].size(), ' ');
      line += (i ? "  " : "") + (i == 0 ? row[i] + pad : pad + row[i]);
    }
    out += line + "\n";
  }
  return out;
}

inline std::string confusion_text(const ClassMetrics& m) {
  std::string out = "truth\\pred";
  for (CellClass c : kAllCellClasses) out += std::string("\t") + cell_class_name(c);
  out += "\tsensitivity\tspecificity\n";
  for (CellClass t : kAllCellClasses) {
    out += cell_class_name(t);
    for (CellClass p : kAllCellClasses) out += "\t" + std::to_string(m.matrix.at(t, p));
    out += "\t" + fixed3(m.sensitivity[ordinal(t)]) + "\t" + fixed3(m.specificity[ordinal(t)]) + "\n";
  }
  out += "Accuracy\t-\t-\t-\t" + fixed3(m.accuracy) + "\n";
  return out;
}

}  // namespace neurocell
