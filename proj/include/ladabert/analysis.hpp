#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ladabert/csv.hpp"
#include "ladabert/error.hpp"
#include "ladabert/factorize.hpp"
#include "ladabert/hybrid.hpp"
#include "ladabert/matrix.hpp"
#include "ladabert/prune.hpp"

namespace ladabert {

/// compressed - original, elementwise.
inline Matrix bias_matrix(const Matrix& original, const Matrix& compressed) {
  detail::require_same_shape(original, compressed, "bias_matrix");
  return compressed - original;
}

enum class BiasMode { prune, svd, hybrid };

inline std::string_view to_string(BiasMode m) {
  switch (m) {
    case BiasMode::prune:
      return "prune";
    case BiasMode::svd:
      return "svd";
    case BiasMode::hybrid:
      return "hybrid";
  }
  return "?";
}

inline std::optional<BiasMode> parse_bias_mode(std::string_view s) {
  if (s == "prune") return BiasMode::prune;
  if (s == "svd") return BiasMode::svd;
  if (s == "hybrid") return BiasMode::hybrid;
  return std::nullopt;
}

struct BiasHistogram {
  BiasMode mode = BiasMode::prune;
  std::vector<double> edges;  // bins + 1, uniform
  std::vector<std::size_t> counts;
  double mean = 0.0;
  double stddev = 0.0;  // sample (n - 1)

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

/// Histogram over [-M, M] with M = max |value| (1 when every value is 0).
inline BiasHistogram histogram(const Matrix& bias, BiasMode mode, std::size_t bins = 101) {
  if (bins == 0) throw RangeError("histogram: bin count must be positive");
  BiasHistogram h;
  h.mode = mode;
  const auto v = bias.data();
  double extent = 0.0;
  for (double x : v) extent = std::max(extent, std::abs(x));
  if (extent == 0.0) extent = 1.0;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) {
    h.edges[i] = -extent + 2.0 * extent * static_cast<double>(i) / static_cast<double>(bins);
  }
  h.counts.assign(bins, 0);
  const double width = 2.0 * extent / static_cast<double>(bins);
  double sum = 0.0;
  for (double x : v) {
    auto k = static_cast<std::size_t>(std::floor((x + extent) / width));
    ++h.counts[std::min(k, bins - 1)];
    sum += x;
  }
  const double n = static_cast<double>(v.size());
  h.mean = sum / n;
  double ss = 0.0;
  for (double x : v) ss += (x - h.mean) * (x - h.mean);
  h.stddev = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return h;
}

/// bin_left,bin_right,count rows followed by a "#stats" row.
inline std::string histogram_csv(const BiasHistogram& h) {
  std::ostringstream os;
  os << "bin_left,bin_right,count\n";
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    os << csv_number(h.edges[i]) << ',' << csv_number(h.edges[i + 1]) << ',' << h.counts[i]
       << '\n';
  }
  os << "#stats mode=" << to_string(h.mode) << " mean=" << csv_number(h.mean)
     << " std=" << csv_number(h.stddev) << " n=" << h.total() << '\n';
  return os.str();
}

/// One-shot compression of a single matrix; fractions >= 1 leave it unchanged.
inline Matrix compress_for_study(const Matrix& w, BiasMode mode, double retain,
                                 std::pair<double, double> split = {1.0, 1.0}) {
  detail::require_fraction(retain, "bias study retain");
  switch (mode) {
    case BiasMode::prune:
      return apply_mask(w, magnitude_mask(w, retain));
    case BiasMode::svd:
      if (retain >= 1.0) return w;
      return reconstruct(factorize_layer(w, retain));
    case BiasMode::hybrid: {
      const auto [p_svd, p_weight] = split;
      detail::require_fraction(p_svd, "bias study svd fraction");
      detail::require_fraction(p_weight, "bias study prune fraction");
      if (std::abs(p_svd * p_weight - retain) > 1e-9) {
        std::ostringstream os;
        os << "bias study: split " << p_svd << " x " << p_weight << " does not give retain "
           << retain;
        throw InfeasibleError(os.str(), p_svd * p_weight - retain);
      }
      if (p_svd >= 1.0 && p_weight >= 1.0) return w;
      return effective_weight(compress_layer(w, p_svd, p_weight));
    }
  }
  return w;
}

struct BiasStudy {
  BiasHistogram prune;
  BiasHistogram svd;
  BiasHistogram hybrid;
};

/// Bias distributions of pure pruning and pure SVD at `retain`, and of the
/// hybrid at `split` = (svd fraction, prune fraction).
inline BiasStudy bias_study(const Matrix& w, double retain, std::pair<double, double> split,
                            std::size_t bins = 101) {
  // Validate the split before doing any work.
  Matrix hybrid = compress_for_study(w, BiasMode::hybrid, retain, split);
  return {
      histogram(bias_matrix(w, compress_for_study(w, BiasMode::prune, retain)), BiasMode::prune,
                bins),
      histogram(bias_matrix(w, compress_for_study(w, BiasMode::svd, retain)), BiasMode::svd, bins),
      histogram(bias_matrix(w, hybrid), BiasMode::hybrid, bins),
  };
}

// ---------------------------------------------------------------------------
// Learning-curve comparison
// ---------------------------------------------------------------------------

struct CurveSummary {
  std::string label;
  std::vector<double> thresholds;
  std::vector<std::optional<std::size_t>> steps_to_threshold;
  std::optional<double> final_value;
};

/// First step at which `metric` reaches each threshold, and its last value.
/// Rows with a blank metric are skipped; without a "step" column the 1-based
/// row number is used.
inline CurveSummary summarize_curve(const CsvTable& curve, const std::string& metric,
                                    const std::vector<double>& thresholds, std::string label = {}) {
  const auto col = curve.column(metric);
  if (!col) throw FormatError("compare_curves: curve '" + label + "' has no column '" + metric + "'");
  const auto step_col = curve.column("step");
  CurveSummary s;
  s.label = std::move(label);
  s.thresholds = thresholds;
  s.steps_to_threshold.assign(thresholds.size(), std::nullopt);
  for (std::size_t i = 0; i < curve.rows.size(); ++i) {
    const auto& row = curve.rows[i];
    if (row[*col].empty()) continue;
    double value = 0.0;
    std::size_t step = i + 1;
    try {
      value = std::stod(row[*col]);
      if (step_col) step = static_cast<std::size_t>(std::stoull(row[*step_col]));
    } catch (const std::exception&) {
      throw FormatError("compare_curves: unparsable value in row " + std::to_string(i + 1));
    }
    s.final_value = value;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      if (!s.steps_to_threshold[t] && value >= thresholds[t]) s.steps_to_threshold[t] = step;
    }
  }
  return s;
}

struct CurveComparison {
  CurveSummary a;
  CurveSummary b;
};

inline CurveComparison compare_curves(const CsvTable& a, const CsvTable& b,
                                      const std::string& metric,
                                      const std::vector<double>& thresholds) {
  return {summarize_curve(a, metric, thresholds, "a"), summarize_curve(b, metric, thresholds, "b")};
}

/// curve,threshold,first_step,final_value; first_step is blank if never reached.
inline std::string comparison_csv(const CurveComparison& c) {
  std::ostringstream os;
  os << "curve,threshold,first_step,final_value\n";
  for (const CurveSummary* s : {&c.a, &c.b}) {
    for (std::size_t t = 0; t < s->thresholds.size(); ++t) {
      os << s->label << ',' << csv_number(s->thresholds[t]) << ',';
      if (s->steps_to_threshold[t]) os << *s->steps_to_threshold[t];
      os << ',';
      if (s->final_value) os << csv_number(*s->final_value);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ladabert
