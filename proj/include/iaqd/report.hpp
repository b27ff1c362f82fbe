#pragma once

// Cross-run comparison tables and static SVG plots built from run directories.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace iaqd {

/// Final-phase metrics of one run directory, or of every seed_* child of a
/// fan-out directory.
struct RunSummary {
  std::string name;
  std::vector<nlohmann::json> final_metrics;
};

RunSummary load_run_summary(const std::filesystem::path& run_dir);

struct ReportRow {
  std::string name;
  int seeds = 0;
  double ap_all = 0.0;
  double ap_old = 0.0;
  double ap_new = 0.0;
  double ap_old_before_er = 0.0;
  double related_teacher = 0.0;
  double related_student = 0.0;
  double overall_iou_teacher = 0.0;
  double overall_iou_student = 0.0;
  double max_churn = 0.0;
};

/// Seed means. Missing values (e.g. churn of a run without distillation) are NaN.
ReportRow summarize(const RunSummary& run);

std::string markdown_table(const std::vector<ReportRow>& rows);
nlohmann::ordered_json rows_to_json(const std::vector<ReportRow>& rows);

struct BarSeries {
  std::string name;
  std::vector<double> values;  // one per group; NaN bars are skipped
};

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& groups,
                          const std::vector<BarSeries>& series, const std::string& y_label);

/// Writes table.md, table.json and the plot files into `out_dir`; returns the files written.
std::vector<std::filesystem::path> write_report(const std::vector<std::filesystem::path>& runs,
                                                const std::filesystem::path& out_dir);

}  // namespace iaqd
