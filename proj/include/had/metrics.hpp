#pragma once

// Incremental-learning metrics (IA / AIA / FIA) and report emission
// (accuracy curves as SVG, per-phase tables as CSV).

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>

#include <json.hpp>

#include "had/common.hpp"

namespace had {

namespace fs = std::filesystem;
using nlohmann::json;

struct RunMetrics {
  std::vector<double> ia;  // percent, one per phase
  double aia = 0.0;
  double fia = 0.0;
};

/// Percent of correct predictions. Counts are exact; the percent conversion
/// happens once at the boundary.
inline double incremental_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty()) fail("validation", "no samples");
  if (predictions.size() != labels.size())
    fail("validation", "prediction/label count mismatch");
  long correct = 0;
  for (size_t i = 0; i < predictions.size(); ++i) correct += predictions[i] == labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(predictions.size());
}

inline RunMetrics aggregate(std::span<const double> ia) {
  if (ia.empty()) fail("validation", "no samples");
  RunMetrics m;
  m.ia.assign(ia.begin(), ia.end());
  double sum = 0.0;
  for (double v : ia) sum += v;
  m.aia = sum / static_cast<double>(ia.size());
  m.fia = ia.back();
  return m;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

struct RunSeries {
  std::string name;
  std::vector<int> phases;
  std::vector<double> ia;
  std::vector<int> classes_seen;
  double aia = 0.0;
  double fia = 0.0;
};

inline RunSeries load_run_series(const fs::path& run_dir) {
  fs::path metrics = run_dir / "metrics.jsonl";
  if (!fs::exists(metrics)) fail("io", "missing metrics.jsonl in " + run_dir.string());
  RunSeries series;
  series.name = run_dir.filename().string();
  std::ifstream in(metrics);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) fail("io", "bad metrics.jsonl line in " + run_dir.string());
    series.phases.push_back(j.at("phase").get<int>());
    series.ia.push_back(j.at("ia").get<double>());
    series.classes_seen.push_back(j.at("classes_seen").get<int>());
  }
  if (series.ia.empty()) fail("io", "metrics.jsonl is empty in " + run_dir.string());
  RunMetrics agg = aggregate(series.ia);
  series.aia = agg.aia;
  series.fia = agg.fia;
  fs::path summary = run_dir / "summary.json";
  if (fs::exists(summary)) {
    json s = json::parse(read_file_bytes(summary.string()), nullptr, false);
    if (!s.is_discarded()) {
      series.aia = s.value("aia", series.aia);
      series.fia = s.value("fia", series.fia);
    }
  }
  return series;
}

namespace detail {

inline std::string fmt(double v, int places = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(places) << v;
  return os.str();
}

constexpr const char* kPalette[] = {"#1f6fb2", "#d1503a", "#3a9a52", "#8652a8",
                                    "#c58a1f", "#3aa0a8", "#b2477f", "#666666"};

}  // namespace detail

/// Accuracy-vs-phase curve, one polyline per run. Rendering is deterministic:
/// identical inputs give identical bytes.
inline std::string render_curve_svg(const std::vector<RunSeries>& runs) {
  const int width = 640, height = 400;
  const int ml = 56, mr = 16, mt = 20, mb = 44;
  const double plot_w = width - ml - mr, plot_h = height - mt - mb;
  int max_phase = 1;
  for (const auto& r : runs)
    for (int p : r.phases) max_phase = std::max(max_phase, p);

  auto x_of = [&](double phase) {
    return ml + (max_phase == 1 ? plot_w / 2 : (phase - 1) / (max_phase - 1) * plot_w);
  };
  auto y_of = [&](double acc) { return mt + (100.0 - acc) / 100.0 * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  for (int tick = 0; tick <= 100; tick += 20) {
    double y = y_of(tick);
    svg << "<line x1=\"" << ml << "\" y1=\"" << detail::fmt(y, 1) << "\" x2=\"" << (width - mr)
        << "\" y2=\"" << detail::fmt(y, 1) << "\" stroke=\"#dddddd\"/>\n";
    svg << "<text x=\"" << (ml - 8) << "\" y=\"" << detail::fmt(y + 4, 1)
        << "\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">" << tick
        << "</text>\n";
  }
  for (int p = 1; p <= max_phase; ++p) {
    double x = x_of(p);
    svg << "<text x=\"" << detail::fmt(x, 1) << "\" y=\"" << (height - mb + 18)
        << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">" << p
        << "</text>\n";
  }
  svg << "<text x=\"" << (ml + plot_w / 2) << "\" y=\"" << (height - 10)
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">phase</text>\n";
  svg << "<text x=\"14\" y=\"" << (mt + plot_h / 2)
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 "
         "14 "
      << (mt + plot_h / 2) << ")\">incremental accuracy (%)</text>\n";

  for (size_t i = 0; i < runs.size(); ++i) {
    const char* color = detail::kPalette[i % std::size(detail::kPalette)];
    std::ostringstream pts;
    for (size_t k = 0; k < runs[i].phases.size(); ++k) {
      if (k) pts << " ";
      pts << detail::fmt(x_of(runs[i].phases[k]), 1) << "," << detail::fmt(y_of(runs[i].ia[k]), 1);
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\""
        << pts.str() << "\"/>\n";
    for (size_t k = 0; k < runs[i].phases.size(); ++k)
      svg << "<circle cx=\"" << detail::fmt(x_of(runs[i].phases[k]), 1) << "\" cy=\""
          << detail::fmt(y_of(runs[i].ia[k]), 1) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << (ml + 10) << "\" y=\"" << (mt + 16 + 16 * static_cast<int>(i))
        << "\" font-size=\"12\" font-family=\"sans-serif\" fill=\"" << color << "\">" << runs[i].name
        << " (aia " << detail::fmt(runs[i].aia, 1) << ", fia " << detail::fmt(runs[i].fia, 1)
        << ")</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

/// Writes per-run phase tables, the overlay curve and (for two or more runs)
/// a comparison table. Returns the list of files written.
inline std::vector<fs::path> emit_report(const std::vector<fs::path>& run_dirs,
                                         const fs::path& out_dir) {
  if (run_dirs.empty()) fail("validation", "no runs given");
  std::vector<RunSeries> runs;
  for (const auto& dir : run_dirs) runs.push_back(load_run_series(dir));

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::vector<fs::path> written;

  for (const auto& r : runs) {
    std::ostringstream csv;
    csv << "phase,ia,classes_seen\n";
    for (size_t k = 0; k < r.phases.size(); ++k)
      csv << r.phases[k] << "," << detail::fmt(r.ia[k], 6) << "," << r.classes_seen[k] << "\n";
    fs::path p = out_dir / (r.name + ".csv");
    write_file_bytes(p.string(), csv.str());
    written.push_back(p);
  }

  fs::path curve = out_dir / "curve.svg";
  write_file_bytes(curve.string(), render_curve_svg(runs));
  written.push_back(curve);

  if (runs.size() > 1) {
    std::ostringstream csv;
    csv << "run,aia,fia\n";
    for (const auto& r : runs)
      csv << r.name << "," << detail::fmt(r.aia, 6) << "," << detail::fmt(r.fia, 6) << "\n";
    fs::path p = out_dir / "comparison.csv";
    write_file_bytes(p.string(), csv.str());
    written.push_back(p);
  }
  return written;
}

}  // namespace had
