#include "gist/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "gist/error.hpp"

namespace gist {

namespace {
void check_scores(const Eigen::MatrixXd& scores, std::span<const int> labels, std::size_t k) {
  if (scores.rows() == 0 || labels.empty()) throw Error(ErrorCode::invalid_argument, "top-k accuracy of empty input");
  if (static_cast<std::size_t>(scores.rows()) != labels.size()) {
    throw Error(ErrorCode::dimension_mismatch, "score rows and labels differ in length");
  }
  if (k == 0 || k > static_cast<std::size_t>(scores.cols())) {
    throw Error(ErrorCode::invalid_argument, "k must be in [1, " + std::to_string(scores.cols()) + "]");
  }
  for (int y : labels) {
    if (y < 0 || y >= scores.cols()) throw Error(ErrorCode::invalid_argument, "label out of range");
  }
}

// Per-row hit indicator for top-k.
std::vector<char> topk_hits(const Eigen::MatrixXd& scores, std::span<const int> labels, std::size_t k) {
  std::vector<char> hits(labels.size());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const double s = scores(i, y);
    std::size_t above = 0;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      if (scores(i, c) > s || (scores(i, c) == s && c < y)) ++above;
    }
    hits[static_cast<std::size_t>(i)] = above < k;
  }
  return hits;
}

double sample_std(std::span<const double> xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}
}  // namespace

double topk_accuracy(const Eigen::MatrixXd& scores, std::span<const int> labels, std::size_t k) {
  check_scores(scores, labels, k);
  const auto hits = topk_hits(scores, labels, k);
  const auto n = std::count(hits.begin(), hits.end(), 1);
  return static_cast<double>(n) / static_cast<double>(hits.size());
}

MeanStd bootstrap_accuracy(const Eigen::MatrixXd& scores, std::span<const int> labels,
                           const BootstrapConfig& config, std::size_t k) {
  check_scores(scores, labels, k);
  if (config.resamples < 1) throw Error(ErrorCode::invalid_argument, "bootstrap needs at least one resample");
  const auto hits = topk_hits(scores, labels, k);
  const std::size_t n = hits.size();
  std::vector<double> accs(config.resamples);
  parallel_for(config.resamples, config.threads, [&](std::size_t r) {
    std::mt19937_64 rng(substream_seed(config.seed, r));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) correct += static_cast<std::size_t>(hits[pick(rng)]);
    accs[r] = static_cast<double>(correct) / static_cast<double>(n);
  });
  double sum = 0.0;
  for (double a : accs) sum += a;
  const double mean = sum / static_cast<double>(accs.size());
  return {mean, sample_std(accs, mean)};
}

const char* to_string(StdKind k) { return k == StdKind::sample ? "sample" : "population"; }

StdKind std_kind_from_string(const std::string& s) {
  if (s == "sample") return StdKind::sample;
  if (s == "population") return StdKind::population;
  throw Error(ErrorCode::invalid_argument, "unknown std convention '" + s + "'");
}

MeanStd aggregate_kshot(std::span<const double> accuracies, std::size_t expected_runs, StdKind kind) {
  if (accuracies.size() != expected_runs) {
    throw Error(ErrorCode::precondition, "expected " + std::to_string(expected_runs) + " seed runs, got " +
                                             std::to_string(accuracies.size()));
  }
  if (accuracies.empty()) throw Error(ErrorCode::precondition, "no seed runs to aggregate");
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  const double mean = sum / static_cast<double>(accuracies.size());
  if (kind == StdKind::sample) return {mean, sample_std(accuracies, mean)};
  double ss = 0.0;
  for (double a : accuracies) ss += (a - mean) * (a - mean);
  return {mean, std::sqrt(ss / static_cast<double>(accuracies.size()))};
}

std::string format_cell(double mean, double std) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f (%.2f)", mean, std);
  return buf;
}

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "table-text" || s == "text") return ReportFormat::table_text;
  if (s == "json") return ReportFormat::json;
  throw Error(ErrorCode::invalid_argument, "unknown report format '" + s + "'");
}

void validate_report(const EvalReport& report) {
  for (const auto& r : report.rows) {
    for (double m : {r.top1_mean, r.top3_mean}) {
      if (!(m >= 0.0 && m <= 100.0)) {
        throw Error(ErrorCode::invalid_argument, "metric mean outside [0, 100] in row " + r.method + "/" + r.setting);
      }
    }
    for (double s : {r.top1_std, r.top3_std}) {
      if (!(s >= 0.0)) throw Error(ErrorCode::invalid_argument, "negative std in row " + r.method + "/" + r.setting);
    }
  }
}

std::string render_report(const EvalReport& report, ReportFormat format) {
  validate_report(report);
  if (format == ReportFormat::json) return to_json(report).dump(2) + "\n";
  std::vector<std::vector<std::string>> cells{{"Method", "Setting", "Top-1", "Top-3", "Std"}};
  for (const auto& r : report.rows) {
    cells.push_back({r.method, r.setting, format_cell(r.top1_mean, r.top1_std), format_cell(r.top3_mean, r.top3_std),
                     r.std_kind});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  out << "Experiment: " << report.experiment_id << "\n";
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << " | ";
      out << row[c] << std::string(width[c] - row[c].size(), ' ');
    }
    out << "\n";
  };
  emit(cells[0]);
  for (std::size_t c = 0; c < width.size(); ++c) {
    if (c) out << "-+-";
    out << std::string(width[c], '-');
  }
  out << "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) emit(cells[i]);
  return out.str();
}

json to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"method", r.method},
                    {"setting", r.setting},
                    {"top1_mean", r.top1_mean},
                    {"top1_std", r.top1_std},
                    {"top3_mean", r.top3_mean},
                    {"top3_std", r.top3_std},
                    {"std_kind", r.std_kind},
                    {"runs", r.runs}});
  }
  return {{"experiment_id", report.experiment_id}, {"rows", rows}, {"provenance", report.provenance}};
}

EvalReport report_from_json(const json& j) {
  EvalReport report;
  report.experiment_id = j.at("experiment_id").get<std::string>();
  for (const auto& r : j.at("rows")) {
    MetricRow row;
    row.method = r.at("method").get<std::string>();
    row.setting = r.at("setting").get<std::string>();
    row.top1_mean = r.at("top1_mean").get<double>();
    row.top1_std = r.at("top1_std").get<double>();
    row.top3_mean = r.at("top3_mean").get<double>();
    row.top3_std = r.at("top3_std").get<double>();
    row.std_kind = r.value("std_kind", "");
    row.runs = r.value("runs", std::size_t{1});
    report.rows.push_back(std::move(row));
  }
  report.provenance = j.value("provenance", json::object());
  return report;
}

}  // namespace gist
