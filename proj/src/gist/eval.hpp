#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gist/util.hpp"

namespace gist {

/// Fraction of rows whose true label is among the k highest scores. A class
/// outranks the true class when its score is higher, or equal with a lower
/// class index.
double topk_accuracy(const Eigen::MatrixXd& scores, std::span<const int> labels, std::size_t k);

struct BootstrapConfig {
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

/// Nonparametric bootstrap of top-k accuracy: each resample draws N indices
/// with replacement from its own substream, so the result does not depend on
/// the thread count. std is the sample (n-1) standard deviation.
MeanStd bootstrap_accuracy(const Eigen::MatrixXd& scores, std::span<const int> labels,
                           const BootstrapConfig& config, std::size_t k);

enum class StdKind { sample, population };
const char* to_string(StdKind k);
StdKind std_kind_from_string(const std::string& s);

/// Mean and std over per-seed accuracies. Throws precondition unless exactly
/// `expected_runs` values are given.
MeanStd aggregate_kshot(std::span<const double> accuracies, std::size_t expected_runs = 3,
                        StdKind kind = StdKind::sample);

struct MetricRow {
  std::string method;   // e.g. "GIST", "LP", "ZS"
  std::string setting;  // "full", "5-shot", ...
  double top1_mean = 0.0;
  double top1_std = 0.0;
  double top3_mean = 0.0;
  double top3_std = 0.0;
  std::string std_kind;  // "bootstrap" or "kshot-sample" / "kshot-population"
  std::size_t runs = 1;

  bool operator==(const MetricRow&) const = default;
};

struct EvalReport {
  std::string experiment_id;
  std::vector<MetricRow> rows;
  json provenance = json::object();

  bool operator==(const EvalReport& o) const {
    return experiment_id == o.experiment_id && rows == o.rows && provenance == o.provenance;
  }
};

/// "75.77 (2.67)": two decimals, std in parentheses.
std::string format_cell(double mean, double std);

enum class ReportFormat { table_text, json };
ReportFormat report_format_from_string(const std::string& s);

void validate_report(const EvalReport& report);
std::string render_report(const EvalReport& report, ReportFormat format);
json to_json(const EvalReport& report);
EvalReport report_from_json(const json& j);

}  // namespace gist
