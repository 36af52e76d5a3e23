#pragma once

// Empirical probes: the Lipschitz probe on the fusion module and the
// hyperparameter sweep runner.

#include <atomic>
#include <mutex>
#include <thread>

#include "had/trainer.hpp"

namespace had {

// ---------------------------------------------------------------------------
// Lipschitz probe
// ---------------------------------------------------------------------------

struct ProbeReport {
  double epsilon = 0.0;
  int n_samples = 0;
  std::vector<double> distances;    // ||F(x') - F(x)|| on the video feature
  std::vector<double> input_norms;  // actual perturbation norms (not serialized)
  double mean = 0.0;
  double fraction_exceeding = 0.0;

  json to_json() const {
    return json{{"epsilon", epsilon},
                {"n_samples", n_samples},
                {"distances", distances},
                {"mean", mean},
                {"fraction_exceeding", fraction_exceeding}};
  }
};

/// Perturb sampled low-level features with a direction drawn uniformly on
/// the sphere and scaled so the Euclidean norm of the perturbation equals
/// epsilon exactly, then report the output distance of the video-level
/// fusion feature.
inline ProbeReport probe_lipschitz(const FusionClassifier& model,
                                   std::span<const ModalFeatures> pool, double epsilon,
                                   int n_samples, Rng& rng) {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    fail("validation", "epsilon must be finite and >= 0");
  if (n_samples < 1) fail("validation", "n_samples must be >= 1");
  if (pool.empty()) fail("validation", "no samples");
  if (!model.params().finite()) fail("validation", "model has non-finite parameters");

  const FusionConfig& cfg = model.config();
  Eigen::Index flat = static_cast<Eigen::Index>(cfg.snippets) * (cfg.audio_dim + cfg.visual_dim);
  BoundParams bp = model.bind({false, false});

  ProbeReport report;
  report.epsilon = epsilon;
  report.n_samples = n_samples;
  int exceeding = 0;
  for (int i = 0; i < n_samples; ++i) {
    const ModalFeatures& x = pool[rng.index(pool.size())];
    Mat direction = rng.normal_matrix(1, flat);
    double norm = direction.norm();
    while (norm == 0.0) {
      direction = rng.normal_matrix(1, flat);
      norm = direction.norm();
    }
    direction *= epsilon / norm;
    report.input_norms.push_back(direction.norm());

    ModalFeatures xp = x;
    Eigen::Index at = 0;
    for (int t = 0; t < cfg.snippets; ++t)
      for (int d = 0; d < cfg.audio_dim; ++d) xp.audio(t, d) += direction(0, at++);
    for (int t = 0; t < cfg.snippets; ++t)
      for (int d = 0; d < cfg.visual_dim; ++d) xp.visual(t, d) += direction(0, at++);

    RowVec base = model.fuse_values(bp, x).video;
    RowVec moved = model.fuse_values(bp, xp).video;
    double dist = (moved - base).norm();
    if (!std::isfinite(dist)) fail("validation", "non-finite probe distance");
    report.distances.push_back(dist);
    report.mean += dist;
    exceeding += dist > epsilon ? 1 : 0;
  }
  report.mean /= static_cast<double>(n_samples);
  report.fraction_exceeding = static_cast<double>(exceeding) / static_cast<double>(n_samples);
  return report;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  int point = 0;
  uint64_t seed = 0;
  std::map<std::string, json> values;
  double aia = 0.0;
  double fia = 0.0;
  std::string fingerprint;
};

struct SweepResult {
  std::vector<std::string> keys;
  std::vector<SweepRow> rows;  // sorted by (point, seed)
  fs::path csv_path;
};

namespace detail {

inline std::string sanitize_key(const std::string& key) {
  std::string out = key;
  for (char& c : out)
    if (c == '.') c = '_';
  return out;
}

inline std::string json_csv(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

/// Mean-AIA-vs-value curve for one swept parameter.
inline std::string render_param_curve(const std::string& key, const std::vector<json>& values,
                                      const std::vector<double>& mean_aia) {
  const int width = 480, height = 320, ml = 56, mr = 16, mt = 20, mb = 44;
  const double plot_w = width - ml - mr, plot_h = height - mt - mb;
  size_t n = values.size();
  auto x_of = [&](size_t i) {
    return ml + (n == 1 ? plot_w / 2 : static_cast<double>(i) / static_cast<double>(n - 1) * plot_w);
  };
  auto y_of = [&](double acc) { return mt + (100.0 - acc) / 100.0 * plot_h; };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\">\n<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  std::ostringstream pts;
  for (size_t i = 0; i < n; ++i) {
    if (i) pts << " ";
    pts << fmt(x_of(i), 1) << "," << fmt(y_of(mean_aia[i]), 1);
  }
  svg << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"" << pts.str()
      << "\"/>\n";
  for (size_t i = 0; i < n; ++i) {
    svg << "<circle cx=\"" << fmt(x_of(i), 1) << "\" cy=\"" << fmt(y_of(mean_aia[i]), 1)
        << "\" r=\"3\" fill=\"#1f6fb2\"/>\n";
    svg << "<text x=\"" << fmt(x_of(i), 1) << "\" y=\"" << (height - mb + 18)
        << "\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">"
        << json_csv(values[i]) << "</text>\n";
  }
  svg << "<text x=\"" << (ml + plot_w / 2) << "\" y=\"" << (height - 8)
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">" << key
      << "</text>\n<text x=\"14\" y=\"" << (mt + plot_h / 2)
      << "\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "transform=\"rotate(-90 14 "
      << (mt + plot_h / 2) << ")\">mean aia (%)</text>\n</svg>\n";
  return svg.str();
}

}  // namespace detail

/// Run the full pipeline on the cartesian product of the grid, one run per
/// (point, seed). Grid keys must name known config keys. Points may run
/// concurrently (`workers`); results are ordered by (point, seed) regardless
/// of completion order.
inline SweepResult sweep(const RunConfig& base, const std::map<std::string, std::vector<json>>& grid,
                         std::vector<uint64_t> seeds, const fs::path& dataset,
                         const fs::path& out_dir, int workers = 1) {
  if (grid.empty()) fail("validation", "empty grid");
  std::set<std::string> known = known_config_keys();
  for (const auto& [key, values] : grid) {
    if (!known.count(key)) fail("config", "unknown config key in grid: " + key);
    if (values.empty()) fail("validation", "grid key '" + key + "' has no values");
  }
  if (seeds.empty()) seeds.push_back(base.seed);

  SweepResult result;
  for (const auto& [key, values] : grid) result.keys.push_back(key);

  // cartesian product in key-sorted order
  std::vector<std::map<std::string, json>> points;
  points.emplace_back();
  for (const auto& [key, values] : grid) {
    std::vector<std::map<std::string, json>> grown;
    for (const auto& point : points)
      for (const auto& v : values) {
        auto p = point;
        p[key] = v;
        grown.push_back(std::move(p));
      }
    points = std::move(grown);
  }

  struct Job {
    int point;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (size_t p = 0; p < points.size(); ++p)
    for (uint64_t s : seeds) jobs.push_back({static_cast<int>(p), s});
  result.rows.resize(jobs.size());

  std::error_code ec;
  fs::create_directories(out_dir, ec);

  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    while (true) {
      size_t j = next.fetch_add(1);
      if (j >= jobs.size() || failed.load()) return;
      const Job& job = jobs[j];
      try {
        RunConfig cfg = base;
        json cfg_json = config_to_json(cfg);
        for (const auto& [key, v] : points[static_cast<size_t>(job.point)])
          set_dotted_key(cfg_json, key, v.dump());
        cfg = config_from_json(cfg_json);
        cfg.seed = job.seed;
        fs::path run_dir = out_dir / ("point_" + std::to_string(job.point) + "_seed_" +
                                      std::to_string(job.seed));
        RunResult run = run_incremental(dataset, cfg, run_dir);
        SweepRow row;
        row.point = job.point;
        row.seed = job.seed;
        row.values = points[static_cast<size_t>(job.point)];
        row.aia = run.metrics.aia;
        row.fia = run.metrics.fia;
        row.fingerprint = run.fingerprint;
        result.rows[j] = std::move(row);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        failure = e.what();
        failed.store(true);
        return;
      }
    }
  };

  workers = std::max(1, workers);
  std::vector<std::thread> threads;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(jobs.size())); ++w)
    threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failed.load()) fail("internal", "sweep run failed: " + failure);

  std::ostringstream csv;
  csv << "point,seed";
  for (const auto& key : result.keys) csv << "," << key;
  csv << ",aia,fia,fingerprint\n";
  for (const auto& row : result.rows) {
    csv << row.point << "," << row.seed;
    for (const auto& key : result.keys) csv << "," << detail::json_csv(row.values.at(key));
    csv << "," << detail::fmt(row.aia, 6) << "," << detail::fmt(row.fia, 6) << ","
        << row.fingerprint << "\n";
  }
  result.csv_path = out_dir / "sweep.csv";
  write_file_bytes(result.csv_path.string(), csv.str());

  // per-parameter curves: mean AIA at each swept value
  for (const auto& [key, values] : grid) {
    std::vector<double> means;
    for (const auto& v : values) {
      double sum = 0.0;
      int count = 0;
      for (const auto& row : result.rows)
        if (row.values.at(key) == v) {
          sum += row.aia;
          ++count;
        }
      means.push_back(count ? sum / count : 0.0);
    }
    write_file_bytes((out_dir / ("curve_" + detail::sanitize_key(key) + ".svg")).string(),
                     detail::render_param_curve(key, values, means));
  }
  return result;
}

}  // namespace had
