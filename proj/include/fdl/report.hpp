#pragma once

// Report bundle of an ablation: report.json (canonical), CSV tables and SVG
// plots derived from them.

#include "fdl/experiment.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace fdl::report {

inline constexpr int kReportFormatVersion = 1;

struct Stat {
  std::vector<double> per_seed;
  double mean = 0.0;
  double median = 0.0;

  static Stat of(std::vector<double> values);
};

json_io::Json to_json(const Stat& s);

json_io::Json build_report(const AblationResult& result, const std::string& generated_at);

// Writes report.json, the CSV tables and the plots into `out`.
void write_report_bundle(const AblationResult& result, const std::filesystem::path& out,
                         const std::string& generated_at);

// Mean probe-stage gradient norm per step, averaged over seeds and smoothed
// with a trailing moving average of `window` steps.
std::vector<std::pair<double, double>> averaged_trace(const AblationResult& result, std::string_view method,
                                                     int branch, std::size_t window);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);
std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::pair<std::string, double>>& bars);

// Current UTC time, ISO 8601.
std::string utc_timestamp();
std::string build_info_version();

}  // namespace fdl::report
