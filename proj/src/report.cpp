#include "iaqd/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "iaqd/errors.hpp"

namespace iaqd {

namespace fs = std::filesystem;

namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json last_phase_metrics(const fs::path& run) {
  int last = 0;
  for (const auto& entry : fs::directory_iterator(run / "metrics")) {
    const std::string stem = entry.path().stem().string();
    if (stem.rfind("phase_", 0) == 0) last = std::max(last, std::stoi(stem.substr(6)));
  }
  if (last == 0) throw FormatError("no metrics in " + run.string());
  return read_json(run / "metrics" / ("phase_" + std::to_string(last) + ".json"));
}

double value_at(const nlohmann::json& j, const std::vector<std::string>& path) {
  const nlohmann::json* node = &j;
  for (const auto& key : path) {
    if (!node->is_object() || !node->contains(key)) return kMissing;
    node = &(*node)[key];
  }
  return node->is_number() ? node->get<double>() : kMissing;
}

double mean_of(const std::vector<nlohmann::json>& metrics, const std::vector<std::string>& path) {
  double sum = 0.0;
  int n = 0;
  for (const auto& m : metrics) {
    const double v = value_at(m, path);
    if (!std::isnan(v)) {
      sum += v;
      ++n;
    }
  }
  return n ? sum / n : kMissing;
}

std::string fmt(double v, int digits = 4) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

}  // namespace

RunSummary load_run_summary(const fs::path& run_dir) {
  RunSummary run;
  std::vector<fs::path> dirs;
  if (fs::exists(run_dir / "config.json")) {
    dirs.push_back(run_dir);
  } else if (fs::is_directory(run_dir)) {
    for (const auto& entry : fs::directory_iterator(run_dir))
      if (entry.is_directory() && fs::exists(entry.path() / "config.json")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
  }
  if (dirs.empty()) throw FormatError("no run found in " + run_dir.string());
  for (const auto& d : dirs) run.final_metrics.push_back(last_phase_metrics(d));
  const auto config = read_json(dirs.front() / "config.json");
  run.name = config.value("strategy", run_dir.filename().string());
  if (config.value("skip_er", false)) run.name += " (no ER)";
  return run;
}

ReportRow summarize(const RunSummary& run) {
  const auto& m = run.final_metrics;
  ReportRow r;
  r.name = run.name;
  r.seeds = static_cast<int>(m.size());
  r.ap_all = mean_of(m, {"ap_all"});
  r.ap_old = mean_of(m, {"ap_old"});
  r.ap_new = mean_of(m, {"ap_new"});
  r.ap_old_before_er = mean_of(m, {"before_er", "ap_old"});
  r.related_teacher = mean_of(m, {"diagnostics", "teacher", "related_total"});
  r.related_student = mean_of(m, {"diagnostics", "student_before_er", "related_total"});
  r.overall_iou_teacher = mean_of(m, {"diagnostics", "teacher", "overall_iou"});
  r.overall_iou_student = mean_of(m, {"diagnostics", "student_before_er", "overall_iou"});
  r.max_churn = mean_of(m, {"diagnostics", "churn", "max"});
  return r;
}

std::string markdown_table(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "| Method | Seeds | All AP | Old AP | New AP | Old AP before ER | Related queries | Overall IoU | Max churn |\n"
      << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    out << "| " << r.name << " | " << r.seeds << " | " << fmt(r.ap_all) << " | " << fmt(r.ap_old) << " | "
        << fmt(r.ap_new) << " | " << fmt(r.ap_old_before_er) << " | " << fmt(r.related_student, 1) << " | "
        << fmt(r.overall_iou_student) << " | " << fmt(r.max_churn, 1) << " |\n";
  return out.str();
}

nlohmann::ordered_json rows_to_json(const std::vector<ReportRow>& rows) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v); };
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    out.push_back({{"method", r.name},
                   {"seeds", r.seeds},
                   {"ap_all", num(r.ap_all)},
                   {"ap_old", num(r.ap_old)},
                   {"ap_new", num(r.ap_new)},
                   {"ap_old_before_er", num(r.ap_old_before_er)},
                   {"related_teacher", num(r.related_teacher)},
                   {"related_student", num(r.related_student)},
                   {"overall_iou_teacher", num(r.overall_iou_teacher)},
                   {"overall_iou_student", num(r.overall_iou_student)},
                   {"max_churn", num(r.max_churn)}});
  return out;
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& groups,
                          const std::vector<BarSeries>& series, const std::string& y_label) {
  static const char* palette[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};
  const double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 70;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  double y_max = 0.0;
  for (const auto& s : series)
    for (double v : s.values)
      if (!std::isnan(v)) y_max = std::max(y_max, v);
  if (y_max <= 0.0) y_max = 1.0;
  y_max *= 1.1;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n"
      << "<text transform=\"translate(16," << top + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(y_label) << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = y_max * k / 4.0;
    const double y = top + plot_h - plot_h * k / 4.0;
    svg << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << y << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n"
        << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt(v, 2) << "</text>\n";
  }
  const double group_w = groups.empty() ? plot_w : plot_w / groups.size();
  const double bar_w = series.empty() ? 0 : group_w * 0.8 / series.size();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + g * group_w;
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= series[s].values.size() || std::isnan(series[s].values[g])) continue;
      const double v = series[s].values[g];
      const double h = plot_h * v / y_max;
      svg << "<rect x=\"" << gx + group_w * 0.1 + s * bar_w << "\" y=\"" << top + plot_h - h << "\" width=\""
          << bar_w * 0.95 << "\" height=\"" << h << "\" fill=\"" << palette[s % 6] << "\"><title>"
          << xml_escape(series[s].name) << ": " << fmt(v) << "</title></rect>\n";
    }
    svg << "<text x=\"" << gx + group_w / 2 << "\" y=\"" << top + plot_h + 18 << "\" text-anchor=\"middle\">"
        << xml_escape(groups[g]) << "</text>\n";
  }
  svg << "<line x1=\"" << left << "\" x2=\"" << left + plot_w << "\" y1=\"" << top + plot_h << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double x = left + s * 150;
    svg << "<rect x=\"" << x << "\" y=\"" << height - 24 << "\" width=\"12\" height=\"12\" fill=\""
        << palette[s % 6] << "\"/><text x=\"" << x + 16 << "\" y=\"" << height - 14 << "\">"
        << xml_escape(series[s].name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<fs::path> write_report(const std::vector<fs::path>& runs, const fs::path& out_dir) {
  if (runs.empty()) throw InvariantViolation("runs", "need at least one run directory");
  fs::create_directories(out_dir);
  std::vector<RunSummary> summaries;
  std::vector<ReportRow> rows;
  for (const auto& r : runs) {
    summaries.push_back(load_run_summary(r));
    rows.push_back(summarize(summaries.back()));
  }
  std::vector<fs::path> written;
  auto emit = [&](const char* name, const std::string& text) {
    write_file(out_dir / name, text);
    written.push_back(out_dir / name);
  };
  emit("table.md", markdown_table(rows));
  emit("table.json", rows_to_json(rows).dump(2) + "\n");

  std::vector<BarSeries> ap_series;
  for (const auto& r : rows) ap_series.push_back({r.name, {r.ap_all, r.ap_old, r.ap_new}});
  emit("ap_all_old_new.svg", bar_chart_svg("AP by category group", {"All", "Old", "New"}, ap_series, "AP"));

  std::vector<std::string> names{"teacher"};
  std::vector<double> related{rows.front().related_teacher};
  std::vector<double> ious{rows.front().overall_iou_teacher};
  for (const auto& r : rows) {
    names.push_back(r.name);
    related.push_back(r.related_student);
    ious.push_back(r.overall_iou_student);
  }
  emit("related_queries.svg", bar_chart_svg("Related queries for old categories", names,
                                            {{"related queries", related}}, "count"));
  emit("overall_iou.svg", bar_chart_svg("Overall IoU of related-query regions", names,
                                        {{"overall IoU", ious}}, "IoU"));

  // Teacher-index histogram of the highest-churn student query, first seed of each run.
  for (std::size_t i = 0; i < summaries.size(); ++i) {
    const auto& m = summaries[i].final_metrics.front();
    const auto churn = m.contains("diagnostics") ? m["diagnostics"].value("churn", nlohmann::json()) : nlohmann::json();
    if (churn.is_null()) continue;
    std::vector<std::string> groups;
    std::vector<double> counts;
    for (const auto& [teacher, n] : churn["histogram"].items()) {
      groups.push_back("#" + teacher);
      counts.push_back(n.get<double>());
    }
    const std::string title =
        summaries[i].name + ": matches of student query #" + std::to_string(churn["histogram_query"].get<int>());
    const std::string file = "churn_" + std::to_string(i) + ".svg";
    emit(file.c_str(), bar_chart_svg(title, groups, {{"teacher query", counts}}, "matches"));
  }
  return written;
}

}  // namespace iaqd
