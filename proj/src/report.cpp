#include "fdl/report.hpp"

#include <Eigen/Core>
#include <fmt/chrono.h>
#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "fdl/tensor_file.hpp"

#ifndef FDL_VERSION
#define FDL_VERSION "0.0.0"
#endif

namespace fdl::report {

using json_io::Json;

namespace {

constexpr std::array<std::string_view, 3> kAblationRows{"baseline", "rsc", "rsc-md"};
constexpr std::array<std::string_view, 2> kUnimodalRows{"unimodal-m1", "unimodal-m2"};

std::string branch_name(int branch) { return fmt::format("m{}", branch + 1); }

const ProbeResult* find_probe(const RunOutcome& run, int branch) {
  for (const auto& p : run.probes) {
    if (p.branch == branch) return &p;
  }
  return nullptr;
}

bool has_branch(const RunOutcome& run, int branch) {
  const auto b = run.trace.branches();
  return std::find(b.begin(), b.end(), branch) != b.end();
}

Json ap_row(const AblationResult& r, std::string_view method) {
  std::vector<double> ap50, ap75, ap;
  Json dirs = Json::array();
  for (auto seed : r.config.run_seeds()) {
    const auto& run = r.run(method, seed);
    ap50.push_back(run.eval.mean_ap50);
    ap75.push_back(run.eval.mean_ap75);
    ap.push_back(run.eval.mean_ap50_95);
    dirs.push_back(run.run_dir);
  }
  return {{"method", method},
          {"run_dirs", dirs},
          {"ap50", to_json(Stat::of(ap50))},
          {"ap75", to_json(Stat::of(ap75))},
          {"ap50_95", to_json(Stat::of(ap))}};
}

std::string compiler_name() {
#if defined(__clang__)
  return fmt::format("clang {}", __clang_version__);
#elif defined(__GNUC__)
  return fmt::format("gcc {}", __VERSION__);
#else
  return "unknown";
#endif
}

std::string csv_number(double v) { return fmt::format("{}", v); }

}  // namespace

Stat Stat::of(std::vector<double> values) {
  Stat s;
  s.per_seed = values;
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return s;
}

Json to_json(const Stat& s) { return {{"per_seed", s.per_seed}, {"mean", s.mean}, {"median", s.median}}; }

std::string build_info_version() { return FDL_VERSION; }

std::string utc_timestamp() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                  std::chrono::system_clock::now())));
}

Json build_report(const AblationResult& r, const std::string& generated_at) {
  const auto seeds = r.config.run_seeds();

  Json runs = Json::array();
  for (const auto& run : r.runs) {
    runs.push_back({{"method", run.method},
                    {"seed", run.seed},
                    {"run_dir", run.run_dir},
                    {"checkpoint_sha256", run.checkpoint_sha256}});
  }
  Json data = Json::array();
  for (const auto& d : r.data) {
    data.push_back({{"seed", d.seed}, {"train_sha256", d.train_sha256}, {"test_sha256", d.test_sha256}});
  }
  Json provenance = {{"config_sha256", config_hash(r.config)},
                     {"seeds", seeds},
                     {"version", build_info_version()},
                     {"compiler", compiler_name()},
                     {"eigen", fmt::format("{}.{}.{}", EIGEN_WORLD_VERSION, EIGEN_MAJOR_VERSION,
                                           EIGEN_MINOR_VERSION)},
                     {"generated_at", generated_at},
                     {"data", data},
                     {"runs", runs}};

  Json ablation = Json::array();
  for (auto m : kAblationRows) ablation.push_back(ap_row(r, m));
  Json unimodal = Json::array();
  for (auto m : kUnimodalRows) unimodal.push_back(ap_row(r, m));

  Json norms = Json::array();
  for (auto m : kMethods) {
    for (int b = 0; b < 2; ++b) {
      if (!has_branch(r.run(m, seeds.front()), b)) continue;
      std::vector<double> v;
      for (auto s : seeds) v.push_back(r.run(m, s).trace.mean_probe_norm(b));
      norms.push_back({{"method", m}, {"branch", branch_name(b)}, {"mean_norm", to_json(Stat::of(v))}});
    }
  }
  Json ratios = Json::array();
  for (auto num : {std::string_view("rsc"), std::string_view("rsc-md")}) {
    for (int b = 0; b < 2; ++b) {
      std::vector<double> v;
      for (auto s : seeds) {
        v.push_back(gradient_ratio_report(r.run(num, s).trace, r.run("baseline", s).trace).ratio(b));
      }
      ratios.push_back({{"numerator", num},
                        {"denominator", "baseline"},
                        {"branch", branch_name(b)},
                        {"ratio", to_json(Stat::of(v))}});
    }
  }

  Json probes = Json::array();
  for (auto m : kMethods) {
    for (int b = 0; b < 2; ++b) {
      if (!find_probe(r.run(m, seeds.front()), b)) continue;
      std::vector<double> ap50, ap;
      for (auto s : seeds) {
        const ProbeResult* p = find_probe(r.run(m, s), b);
        ap50.push_back(p->ap50);
        ap.push_back(p->ap50_95);
      }
      probes.push_back({{"method", m},
                        {"branch", branch_name(b)},
                        {"ap50", to_json(Stat::of(ap50))},
                        {"ap50_95", to_json(Stat::of(ap))}});
    }
  }

  const auto& t = r.theory;
  Json theory = {{"points", t.points},
                 {"suppression_failures", t.suppression_failures},
                 {"negative_failures", t.negative_failures},
                 {"ordering_failures", t.ordering_failures},
                 {"crosscheck_failures", t.crosscheck_failures},
                 {"max_crosscheck_error", t.max_crosscheck_error},
                 {"counterexamples", t.counterexamples()}};

  return {{"format_version", kReportFormatVersion},
          {"provenance", provenance},
          {"config", to_json(r.config)},
          {"ablation", ablation},
          {"unimodal", unimodal},
          {"gradient", {{"mean_norms", norms}, {"ratios", ratios}}},
          {"probes", probes},
          {"theory", theory}};
}

std::vector<std::pair<double, double>> averaged_trace(const AblationResult& result, std::string_view method,
                                                     int branch, std::size_t window) {
  std::map<std::size_t, std::pair<double, int>> by_step;
  for (auto s : result.config.run_seeds()) {
    for (const auto& rec : result.run(method, s).trace.records) {
      if (rec.branch != branch) continue;
      auto& slot = by_step[rec.step];
      slot.first += rec.probe_grad_norm;
      slot.second += 1;
    }
  }
  std::vector<double> steps, values;
  for (const auto& [step, acc] : by_step) {
    steps.push_back(static_cast<double>(step));
    values.push_back(acc.first / acc.second);
  }
  std::vector<std::pair<double, double>> out;
  double running = 0.0;
  window = std::max<std::size_t>(window, 1);
  for (std::size_t i = 0; i < values.size(); ++i) {
    running += values[i];
    if (i >= window) running -= values[i - window];
    out.emplace_back(steps[i], running / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

namespace {

constexpr std::array<const char*, 6> kColors{"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
constexpr double kWidth = 720, kHeight = 420, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char ch : text) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

std::string svg_open(const std::string& title) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">{3}</text>\n",
      kWidth, kHeight, kWidth / 2, xml_escape(title));
}

std::string axes(double y_min, double y_max, const std::string& x_label, const std::string& y_label) {
  const double plot_h = kHeight - kTop - kBottom;
  std::string s = fmt::format(
      "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n"
      "<line x1=\"{0}\" y1=\"{2}\" x2=\"{3}\" y2=\"{2}\" stroke=\"black\"/>\n",
      kLeft, kTop, kHeight - kBottom, kWidth - kRight);
  for (int k = 0; k <= 4; ++k) {
    const double v = y_min + (y_max - y_min) * k / 4.0;
    const double y = kHeight - kBottom - plot_h * k / 4.0;
    s += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3g}</text>\n", kLeft - 6, y + 4, v);
  }
  s += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                   kLeft + (kWidth - kLeft - kRight) / 2, kHeight - 12, xml_escape(x_label));
  s += fmt::format("<text x=\"16\" y=\"{:.1f}\" transform=\"rotate(-90 16 {:.1f})\" text-anchor=\"middle\">{}</text>\n",
                   kTop + plot_h / 2, kTop + plot_h / 2, xml_escape(y_label));
  return s;
}

}  // namespace

std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series) {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 0;
  bool any = false;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (!any) x_min = x_max = x;
      x_min = std::min(x_min, x);
      x_max = std::max(x_max, x);
      y_max = std::max(y_max, y);
      any = true;
    }
  }
  if (x_max <= x_min) x_max = x_min + 1;
  if (y_max <= y_min) y_max = y_min + 1;
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;

  std::string svg = svg_open(title) + axes(y_min, y_max, x_label, y_label);
  svg += fmt::format("<text x=\"{}\" y=\"{}\">{:g}</text>\n", kLeft, kHeight - kBottom + 16, x_min);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:g}</text>\n", kWidth - kRight,
                     kHeight - kBottom + 16, x_max);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % kColors.size()];
    std::string pts;
    for (auto [x, y] : series[i].points) {
      pts += fmt::format("{:.1f},{:.1f} ", kLeft + plot_w * (x - x_min) / (x_max - x_min),
                         kHeight - kBottom - plot_h * (y - y_min) / (y_max - y_min));
    }
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color, pts);
    const double ly = kTop + 10 + 18.0 * static_cast<double>(i);
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
                       kWidth - kRight + 12, ly, kWidth - kRight + 32, color);
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", kWidth - kRight + 38, ly + 4, xml_escape(series[i].name));
  }
  return svg + "</svg>\n";
}

std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<std::pair<std::string, double>>& bars) {
  double y_max = 0;
  for (const auto& b : bars) y_max = std::max(y_max, b.second);
  if (y_max <= 0) y_max = 1;
  const double plot_w = kWidth - kLeft - kRight, plot_h = kHeight - kTop - kBottom;
  std::string svg = svg_open(title) + axes(0, y_max, "", y_label);
  const double slot = bars.empty() ? plot_w : plot_w / static_cast<double>(bars.size());
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double h = plot_h * bars[i].second / y_max;
    const double x = kLeft + slot * static_cast<double>(i) + slot * 0.15;
    svg += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"/>\n", x,
                       kHeight - kBottom - h, slot * 0.7, h, kColors[i % kColors.size()]);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:.4f}</text>\n", x + slot * 0.35,
                       kHeight - kBottom - h - 4, bars[i].second);
    // Labels wrap at spaces, one word per line.
    std::string label = bars[i].first;
    std::string lines;
    for (std::size_t start = 0, line = 0; start <= label.size(); ++line) {
      const std::size_t end = std::min(label.find(' ', start), label.size());
      lines += fmt::format("<tspan x=\"{:.1f}\" dy=\"{}\">{}</tspan>", x + slot * 0.35, line == 0 ? 0 : 12,
                           xml_escape(label.substr(start, end - start)));
      start = end + 1;
    }
    svg += fmt::format("<text y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
                       kHeight - kBottom + 14, lines);
  }
  return svg + "</svg>\n";
}

void write_report_bundle(const AblationResult& r, const std::filesystem::path& out, const std::string& generated_at) {
  std::filesystem::create_directories(out);
  const Json report = build_report(r, generated_at);
  write_file_bytes(out / "report.json", report.dump(2) + "\n");
  const auto seeds = r.config.run_seeds();

  std::string ablation = "method,seed,ap50,ap75,ap50_95\n";
  for (const auto& run : r.runs) {
    ablation += fmt::format("{},{},{},{},{}\n", run.method, run.seed, csv_number(run.eval.mean_ap50),
                            csv_number(run.eval.mean_ap75), csv_number(run.eval.mean_ap50_95));
  }
  write_file_bytes(out / "ablation.csv", ablation);

  std::string norms = "method,seed,branch,mean_probe_grad_norm\n";
  for (const auto& run : r.runs) {
    for (int b : run.trace.branches()) {
      norms += fmt::format("{},{},{},{}\n", run.method, run.seed, branch_name(b),
                           csv_number(run.trace.mean_probe_norm(b)));
    }
  }
  write_file_bytes(out / "gradient_norms.csv", norms);

  std::string ratios = "numerator,denominator,branch,seed,ratio\n";
  for (const auto& row : report.at("gradient").at("ratios")) {
    const auto& per_seed = row.at("ratio").at("per_seed");
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      ratios += fmt::format("{},{},{},{},{}\n", row.at("numerator").get<std::string>(),
                            row.at("denominator").get<std::string>(), row.at("branch").get<std::string>(), seeds[i],
                            csv_number(per_seed.at(i).get<double>()));
    }
  }
  write_file_bytes(out / "gradient_ratios.csv", ratios);

  std::string probes = "method,seed,branch,ap50,ap50_95\n";
  for (const auto& run : r.runs) {
    for (const auto& p : run.probes) {
      probes += fmt::format("{},{},{},{},{}\n", run.method, run.seed, branch_name(p.branch), csv_number(p.ap50),
                            csv_number(p.ap50_95));
    }
  }
  write_file_bytes(out / "probes.csv", probes);

  constexpr std::size_t kSmoothing = 25;
  std::string traces = "method,branch,step,mean_probe_grad_norm\n";
  for (int b = 0; b < 2; ++b) {
    std::vector<Series> series;
    for (auto m : kMethods) {
      if (!has_branch(r.run(m, seeds.front()), b)) continue;
      Series s{std::string(m), averaged_trace(r, m, b, kSmoothing)};
      for (auto [x, y] : s.points) traces += fmt::format("{},{},{},{}\n", m, branch_name(b), x, csv_number(y));
      series.push_back(std::move(s));
    }
    write_file_bytes(out / fmt::format("gradient_trace_{}.svg", branch_name(b)),
                     line_plot_svg(fmt::format("Probe-stage gradient norm, {} backbone", branch_name(b)), "step",
                                   "gradient L2 norm", series));
  }
  write_file_bytes(out / "gradient_traces.csv", traces);

  std::vector<std::pair<std::string, double>> ap_bars;
  for (const auto& row : report.at("ablation")) {
    ap_bars.emplace_back(row.at("method").get<std::string>(), row.at("ap50_95").at("median").get<double>());
  }
  write_file_bytes(out / "ablation_ap50_95.svg", bar_chart_svg("Median AP50-95 over seeds", "AP50-95", ap_bars));

  std::vector<std::pair<std::string, double>> probe_bars;
  for (const auto& row : report.at("probes")) {
    probe_bars.emplace_back(fmt::format("{} {}", row.at("method").get<std::string>(),
                                        row.at("branch").get<std::string>()),
                            row.at("ap50_95").at("mean").get<double>());
  }
  write_file_bytes(out / "probes_ap50_95.svg", bar_chart_svg("Linear probe AP50-95, mean over seeds", "AP50-95",
                                                             probe_bars));
}

}  // namespace fdl::report
