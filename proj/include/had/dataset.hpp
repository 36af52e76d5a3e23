#pragma once

// On-disk dataset format (manifest.json + features.f32), the synthetic
// feature generator, and the adapter for precomputed real features.
//
// features.f32 layout: records in manifest order; each record is the K x D_a
// audio block followed by the K x D_v visual block, float32 little-endian,
// snippet-major (row-major).

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "had/common.hpp"

namespace had {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Split { train, valid, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    default: return "test";
  }
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  fail("validation", "unknown split: " + s);
}

/// Per-video low-level features: K audio and K visual snippet vectors.
struct ModalFeatures {
  Mat audio;   // K x D_a
  Mat visual;  // K x D_v

  bool finite() const { return all_finite(audio) && all_finite(visual); }
};

struct LabeledSample {
  std::string id;
  ModalFeatures features;
  int label = 0;
  Split split = Split::train;
};

struct ManifestRecord {
  std::string id;
  int label = 0;
  Split split = Split::train;
  int record_index = 0;
};

struct DatasetManifest {
  int version = 1;
  std::string name;
  int num_classes = 0;
  int snippets_per_video = 0;
  int audio_dim = 0;
  int visual_dim = 0;
  std::vector<ManifestRecord> records;

  size_t record_floats() const {
    return static_cast<size_t>(snippets_per_video) *
           (static_cast<size_t>(audio_dim) + static_cast<size_t>(visual_dim));
  }

  void validate() const {
    if (num_classes < 1 || snippets_per_video < 1 || audio_dim < 1 || visual_dim < 1)
      fail("validation", "manifest dimensions must be >= 1");
    if (records.empty()) fail("validation", "empty dataset");
    std::vector<bool> seen(records.size(), false);
    std::vector<bool> train_class(static_cast<size_t>(num_classes), false);
    for (const auto& r : records) {
      if (r.record_index < 0 || r.record_index >= static_cast<int>(records.size()))
        fail("validation", "record_index out of range for record " + r.id);
      if (seen[static_cast<size_t>(r.record_index)])
        fail("validation", "duplicate record_index " + std::to_string(r.record_index));
      seen[static_cast<size_t>(r.record_index)] = true;
      if (r.label < 0 || r.label >= num_classes)
        fail("validation", "label out of range for record " + r.id);
      if (r.split == Split::train) train_class[static_cast<size_t>(r.label)] = true;
    }
    for (int c = 0; c < num_classes; ++c)
      if (!train_class[static_cast<size_t>(c)])
        fail("validation", "class " + std::to_string(c) + " has no train sample");
  }
};

inline json manifest_to_json(const DatasetManifest& m) {
  json recs = json::array();
  for (const auto& r : m.records)
    recs.push_back({{"id", r.id},
                    {"label", r.label},
                    {"split", to_string(r.split)},
                    {"record_index", r.record_index}});
  return json{{"version", m.version},
              {"name", m.name},
              {"num_classes", m.num_classes},
              {"snippets_per_video", m.snippets_per_video},
              {"audio_dim", m.audio_dim},
              {"visual_dim", m.visual_dim},
              {"records", recs}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.name = j.at("name").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.snippets_per_video = j.at("snippets_per_video").get<int>();
    m.audio_dim = j.at("audio_dim").get<int>();
    m.visual_dim = j.at("visual_dim").get<int>();
    for (const auto& r : j.at("records")) {
      ManifestRecord rec;
      rec.id = r.at("id").get<std::string>();
      rec.label = r.at("label").get<int>();
      rec.split = split_from_string(r.at("split").get<std::string>());
      rec.record_index = r.at("record_index").get<int>();
      m.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    fail("corrupt-dataset", std::string("bad manifest: ") + e.what());
  }
  return m;
}

// ---------------------------------------------------------------------------
// write / read
// ---------------------------------------------------------------------------

inline void write_dataset(const DatasetManifest& manifest,
                          const std::vector<LabeledSample>& samples, const fs::path& dir) {
  if (samples.empty()) fail("validation", "empty dataset");
  manifest.validate();
  if (samples.size() != manifest.records.size())
    fail("validation", "sample count does not match manifest record count");

  std::string blob;
  blob.reserve(samples.size() * manifest.record_floats() * 4);
  for (size_t i = 0; i < samples.size(); ++i) {
    const LabeledSample& s = samples[i];
    const ManifestRecord& r = manifest.records[i];
    if (s.id != r.id)
      fail("validation", "sample order mismatch at record " + std::to_string(i) + ": " + s.id);
    if (s.features.audio.rows() != manifest.snippets_per_video ||
        s.features.audio.cols() != manifest.audio_dim ||
        s.features.visual.rows() != manifest.snippets_per_video ||
        s.features.visual.cols() != manifest.visual_dim)
      fail("validation", "dimension mismatch for sample " + s.id);
    if (!s.features.finite()) fail("validation", "non-finite feature in sample " + s.id);
    append_matrix_f32(blob, s.features.audio);
    append_matrix_f32(blob, s.features.visual);
  }

  std::error_code ec;
  fs::create_directories(dir, ec);
  write_file_bytes((dir / "features.f32").string(), blob);
  write_file_bytes((dir / "manifest.json").string(), manifest_to_json(manifest).dump(2) + "\n");
}

/// Lazy reader over a dataset directory. Concurrent readers are safe: every
/// record access opens its own stream.
class DatasetReader {
public:
  explicit DatasetReader(fs::path dir) : dir_(std::move(dir)) {
    std::string text = read_file_bytes((dir_ / "manifest.json").string());
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) fail("corrupt-dataset", "manifest.json is not valid JSON");
    manifest_ = manifest_from_json(j);
    manifest_.validate();
    size_t expected = manifest_.records.size() * manifest_.record_floats() * 4;
    std::error_code ec;
    auto actual = fs::file_size(dir_ / "features.f32", ec);
    if (ec) fail("io", "cannot stat features.f32 in " + dir_.string());
    if (actual != expected)
      fail("corrupt-dataset", "corrupt dataset: features.f32 expected " +
                                  std::to_string(expected) + " bytes, found " +
                                  std::to_string(actual));
  }

  const DatasetManifest& manifest() const { return manifest_; }

  LabeledSample sample(int record_index) const {
    if (record_index < 0 || record_index >= static_cast<int>(manifest_.records.size()))
      fail("validation", "record_index out of range");
    const ManifestRecord* rec = nullptr;
    for (const auto& r : manifest_.records)
      if (r.record_index == record_index) {
        rec = &r;
        break;
      }
    std::ifstream in(dir_ / "features.f32", std::ios::binary);
    if (!in) fail("io", "cannot open features.f32");
    size_t bytes = manifest_.record_floats() * 4;
    std::string buf(bytes, '\0');
    in.seekg(static_cast<std::streamoff>(bytes) * record_index);
    in.read(buf.data(), static_cast<std::streamsize>(bytes));
    if (!in) fail("corrupt-dataset", "short read in features.f32");
    LabeledSample s;
    s.id = rec->id;
    s.label = rec->label;
    s.split = rec->split;
    int k = manifest_.snippets_per_video;
    s.features.audio = read_matrix_f32(buf.data(), k, manifest_.audio_dim);
    s.features.visual =
        read_matrix_f32(buf.data() + static_cast<size_t>(k) * manifest_.audio_dim * 4, k,
                        manifest_.visual_dim);
    return s;
  }

  std::vector<LabeledSample> load_all() const {
    std::vector<LabeledSample> out;
    out.reserve(manifest_.records.size());
    std::string blob = read_file_bytes((dir_ / "features.f32").string());
    size_t bytes = manifest_.record_floats() * 4;
    int k = manifest_.snippets_per_video;
    // records sorted by record_index give file order
    std::vector<const ManifestRecord*> byindex(manifest_.records.size());
    for (const auto& r : manifest_.records) byindex[static_cast<size_t>(r.record_index)] = &r;
    for (size_t i = 0; i < byindex.size(); ++i) {
      const char* p = blob.data() + i * bytes;
      LabeledSample s;
      s.id = byindex[i]->id;
      s.label = byindex[i]->label;
      s.split = byindex[i]->split;
      s.features.audio = read_matrix_f32(p, k, manifest_.audio_dim);
      s.features.visual = read_matrix_f32(p + static_cast<size_t>(k) * manifest_.audio_dim * 4, k,
                                          manifest_.visual_dim);
      out.push_back(std::move(s));
    }
    return out;
  }

private:
  fs::path dir_;
  DatasetManifest manifest_;
};

inline std::pair<DatasetManifest, DatasetReader> read_dataset(const fs::path& dir) {
  DatasetReader reader(dir);
  return {reader.manifest(), std::move(reader)};
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  int num_classes = 20;
  int train_per_class = 30;
  int valid_per_class = 10;
  int test_per_class = 10;
  int snippets = 10;     // K
  int audio_dim = 16;    // D_a
  int visual_dim = 24;   // D_v
  double class_separation = 2.0;
  double temporal_smoothing = 0.5;
  double cross_modal_coupling = 0.5;
  uint64_t seed = 1;

  void validate() const {
    if (num_classes < 1 || train_per_class < 1 || valid_per_class < 1 || test_per_class < 1 ||
        snippets < 1 || audio_dim < 1 || visual_dim < 1)
      fail("validation", "synthetic spec counts must be >= 1");
    if (!(class_separation >= 0.0) || !std::isfinite(class_separation))
      fail("validation", "class_separation must be a finite scalar >= 0");
    if (temporal_smoothing < 0.0 || temporal_smoothing > 1.0)
      fail("validation", "temporal_smoothing must lie in [0,1]");
    if (cross_modal_coupling < 0.0 || cross_modal_coupling > 1.0)
      fail("validation", "cross_modal_coupling must lie in [0,1]");
  }
};

namespace detail {

/// AR(1)-smoothed unit-variance noise block, one row per snippet.
inline Mat ar1_noise(int k, int dim, double rho, Rng& rng) {
  Mat e(k, dim);
  double carry = std::sqrt(1.0 - rho * rho);
  for (int t = 0; t < k; ++t)
    for (int d = 0; d < dim; ++d) {
      double xi = rng.normal();
      e(t, d) = t == 0 ? xi : rho * e(t - 1, d) + carry * xi;
    }
  return e;
}

}  // namespace detail

inline std::pair<DatasetManifest, std::vector<LabeledSample>> generate_synthetic(
    const SyntheticSpec& spec) {
  spec.validate();
  Rng root(spec.seed);

  Rng anchors = root.fork("anchors");
  std::vector<Mat> mu_a(static_cast<size_t>(spec.num_classes));
  std::vector<Mat> mu_v(static_cast<size_t>(spec.num_classes));
  for (int c = 0; c < spec.num_classes; ++c) {
    mu_a[static_cast<size_t>(c)] = anchors.normal_matrix(1, spec.audio_dim, spec.class_separation);
    mu_v[static_cast<size_t>(c)] = anchors.normal_matrix(1, spec.visual_dim, spec.class_separation);
  }

  DatasetManifest manifest;
  manifest.name = "synthetic";
  manifest.num_classes = spec.num_classes;
  manifest.snippets_per_video = spec.snippets;
  manifest.audio_dim = spec.audio_dim;
  manifest.visual_dim = spec.visual_dim;

  std::vector<LabeledSample> samples;
  const std::vector<std::pair<Split, int>> splits = {{Split::train, spec.train_per_class},
                                                     {Split::valid, spec.valid_per_class},
                                                     {Split::test, spec.test_per_class}};
  int index = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (const auto& [split, count] : splits) {
      for (int j = 0; j < count; ++j) {
        Rng srng = root.fork("sample", static_cast<uint64_t>(index));
        double latent = srng.normal() * spec.cross_modal_coupling;
        LabeledSample s;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "c%03d_%s_%03d", c, to_string(split).c_str(), j);
        s.id = buf;
        s.label = c;
        s.split = split;
        s.features.audio = detail::ar1_noise(spec.snippets, spec.audio_dim,
                                             spec.temporal_smoothing, srng);
        s.features.audio.array() += latent;
        s.features.audio.rowwise() += RowVec(mu_a[static_cast<size_t>(c)].row(0));
        s.features.visual = detail::ar1_noise(spec.snippets, spec.visual_dim,
                                              spec.temporal_smoothing, srng);
        s.features.visual.array() += latent;
        s.features.visual.rowwise() += RowVec(mu_v[static_cast<size_t>(c)].row(0));
        manifest.records.push_back({s.id, c, split, index});
        samples.push_back(std::move(s));
        ++index;
      }
    }
  }
  return {std::move(manifest), std::move(samples)};
}

// ---------------------------------------------------------------------------
// Ingestion of precomputed real features.
//
// Expected per-video shapes: audio 10 x 128, 2D visual 80 x 2048, 3D visual
// 10 x 512, stored as raw row-major little-endian float32 in
// <dir>/<id>.f32. The 2D stream is mean-pooled 8 frames per snippet and
// concatenated with the 3D stream into a 10 x 2560 visual block.
// ---------------------------------------------------------------------------

struct IngestShapes {
  int snippets = 10;
  int audio_dim = 128;
  int frames = 80;
  int visual2d_dim = 2048;
  int visual3d_dim = 512;
  int frames_per_snippet() const { return frames / snippets; }
  int fused_visual_dim() const { return visual2d_dim + visual3d_dim; }
};

struct IngestSummary {
  int ingested = 0;
  std::vector<std::pair<std::string, std::string>> skipped;  // id -> reason
};

struct LabelEntry {
  std::string id;
  int label;
  Split split;
};

/// labels_file: CSV with header `id,label,split`.
inline std::vector<LabelEntry> read_labels_csv(const fs::path& labels_file) {
  std::ifstream in(labels_file);
  if (!in) fail("io", "cannot open labels file: " + labels_file.string());
  std::vector<LabelEntry> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line == "id,label,split") continue;  // header optional
    }
    auto c1 = line.find(',');
    auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      fail("validation", "bad labels line: " + line);
    LabelEntry e;
    e.id = line.substr(0, c1);
    e.label = std::stoi(line.substr(c1 + 1, c2 - c1 - 1));
    e.split = split_from_string(line.substr(c2 + 1));
    out.push_back(std::move(e));
  }
  if (out.empty()) fail("validation", "empty labels file");
  return out;
}

namespace detail {

inline std::optional<Mat> read_shaped_f32(const fs::path& path, int rows, int cols,
                                          std::string& reason) {
  std::error_code ec;
  auto size = fs::file_size(path, ec);
  if (ec) {
    reason = "missing file " + path.filename().string();
    return std::nullopt;
  }
  size_t expected = static_cast<size_t>(rows) * static_cast<size_t>(cols) * 4;
  if (size != expected) {
    reason = path.filename().string() + " has " + std::to_string(size) + " bytes, expected " +
             std::to_string(expected) + " (" + std::to_string(rows) + "x" + std::to_string(cols) +
             ")";
    return std::nullopt;
  }
  std::string bytes = read_file_bytes(path.string());
  return read_matrix_f32(bytes.data(), rows, cols);
}

}  // namespace detail

inline std::pair<DatasetManifest, IngestSummary> ingest_precomputed(
    const fs::path& audio_dir, const fs::path& visual2d_dir, const fs::path& visual3d_dir,
    const fs::path& labels_file, const fs::path& out_dir, const IngestShapes& shapes = {}) {
  auto labels = read_labels_csv(labels_file);
  IngestSummary summary;
  std::vector<LabeledSample> samples;
  DatasetManifest manifest;
  manifest.name = "ingested";
  manifest.snippets_per_video = shapes.snippets;
  manifest.audio_dim = shapes.audio_dim;
  manifest.visual_dim = shapes.fused_visual_dim();

  int max_label = -1;
  int index = 0;
  int fps = shapes.frames_per_snippet();
  for (const auto& entry : labels) {
    std::string reason;
    auto audio = detail::read_shaped_f32(audio_dir / (entry.id + ".f32"), shapes.snippets,
                                         shapes.audio_dim, reason);
    auto v2d = audio ? detail::read_shaped_f32(visual2d_dir / (entry.id + ".f32"), shapes.frames,
                                               shapes.visual2d_dim, reason)
                     : std::nullopt;
    auto v3d = v2d ? detail::read_shaped_f32(visual3d_dir / (entry.id + ".f32"), shapes.snippets,
                                             shapes.visual3d_dim, reason)
                   : std::nullopt;
    if (!audio || !v2d || !v3d) {
      summary.skipped.emplace_back(entry.id, reason);
      continue;
    }

    LabeledSample s;
    s.id = entry.id;
    s.label = entry.label;
    s.split = entry.split;
    s.features.audio = *audio;
    s.features.visual.resize(shapes.snippets, manifest.visual_dim);
    for (int t = 0; t < shapes.snippets; ++t) {
      s.features.visual.row(t).head(shapes.visual2d_dim) =
          v2d->middleRows(t * fps, fps).colwise().mean();
      s.features.visual.row(t).tail(shapes.visual3d_dim) = v3d->row(t);
    }
    max_label = std::max(max_label, entry.label);
    manifest.records.push_back({s.id, s.label, s.split, index});
    samples.push_back(std::move(s));
    ++index;
  }
  if (samples.empty()) fail("validation", "ingest produced an empty dataset");
  manifest.num_classes = max_label + 1;
  summary.ingested = static_cast<int>(samples.size());
  write_dataset(manifest, samples, out_dir);
  return {std::move(manifest), std::move(summary)};
}

}  // namespace had
