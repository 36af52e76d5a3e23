#include <catch2/catch_amalgamated.hpp>

#include "had/dataset.hpp"
#include "test_util.hpp"

using namespace had;
using testutil::TempDir;

namespace {

LabeledSample random_sample(const std::string& id, int label, Split split, int k, int da, int dv,
                            Rng& rng) {
  LabeledSample s;
  s.id = id;
  s.label = label;
  s.split = split;
  s.features.audio = rng.normal_matrix(k, da);
  s.features.visual = rng.normal_matrix(k, dv);
  quantize_f32(s.features.audio);
  quantize_f32(s.features.visual);
  return s;
}

std::pair<DatasetManifest, std::vector<LabeledSample>> small_dataset(int n, int classes, int k,
                                                                     int da, int dv,
                                                                     uint64_t seed) {
  Rng rng(seed);
  DatasetManifest m;
  m.name = "unit";
  m.num_classes = classes;
  m.snippets_per_video = k;
  m.audio_dim = da;
  m.visual_dim = dv;
  std::vector<LabeledSample> samples;
  for (int i = 0; i < n; ++i) {
    int label = i % classes;
    Split split = i < classes ? Split::train : (i % 7 == 3 ? Split::test : Split::train);
    auto s = random_sample("s" + std::to_string(i), label, split, k, da, dv, rng);
    m.records.push_back({s.id, s.label, s.split, i});
    samples.push_back(std::move(s));
  }
  return {std::move(m), std::move(samples)};
}

}  // namespace

TEST_CASE("feature file size arithmetic") {
  TempDir tmp("dset_size");
  auto [m, samples] = small_dataset(1, 1, 2, 3, 4, 5);
  write_dataset(m, samples, tmp.path());
  REQUIRE(std::filesystem::file_size(tmp / "features.f32") == 56);  // (2*3+2*4)*4
}

TEST_CASE("empty dataset rejected") {
  TempDir tmp("dset_empty");
  DatasetManifest m;
  m.num_classes = 1;
  m.snippets_per_video = 1;
  m.audio_dim = 1;
  m.visual_dim = 1;
  REQUIRE_THROWS_WITH(write_dataset(m, {}, tmp.path()), Catch::Matchers::ContainsSubstring("empty dataset"));
}

TEST_CASE("write/read round-trip is exact") {
  TempDir tmp("dset_rt");
  auto [m, samples] = small_dataset(100, 5, 4, 6, 9, 42);
  write_dataset(m, samples, tmp.path());

  DatasetReader reader(tmp.path());
  REQUIRE(reader.manifest().records.size() == 100);
  for (int i : {0, 1, 17, 63, 99}) {
    auto s = reader.sample(i);
    REQUIRE(s.id == samples[static_cast<size_t>(i)].id);
    REQUIRE(s.label == samples[static_cast<size_t>(i)].label);
    REQUIRE((s.features.audio - samples[static_cast<size_t>(i)].features.audio).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((s.features.visual - samples[static_cast<size_t>(i)].features.visual).cwiseAbs().maxCoeff() == 0.0);
  }
  auto all = reader.load_all();
  for (size_t i = 0; i < all.size(); ++i) {
    REQUIRE((all[i].features.audio - samples[i].features.audio).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((all[i].features.visual - samples[i].features.visual).cwiseAbs().maxCoeff() == 0.0);
  }

  // rewriting what was read reproduces the byte stream
  TempDir tmp2("dset_rt2");
  write_dataset(reader.manifest(), all, tmp2.path());
  REQUIRE(testutil::file_fingerprint(tmp / "features.f32") ==
          testutil::file_fingerprint(tmp2 / "features.f32"));
}

TEST_CASE("dimension mismatch names the offending sample") {
  TempDir tmp("dset_dim");
  auto [m, samples] = small_dataset(4, 2, 3, 5, 7, 9);
  samples[2].features.audio = Mat::Zero(3, 6);  // wrong D_a
  REQUIRE_THROWS_WITH(write_dataset(m, samples, tmp.path()),
                      Catch::Matchers::ContainsSubstring("s2"));
}

TEST_CASE("truncated feature file is a corrupt dataset") {
  TempDir tmp("dset_trunc");
  auto [m, samples] = small_dataset(10, 2, 2, 3, 3, 11);
  write_dataset(m, samples, tmp.path());
  auto bytes = read_file_bytes((tmp / "features.f32").string());
  write_file_bytes((tmp / "features.f32").string(), bytes.substr(0, bytes.size() - 8));
  try {
    DatasetReader reader(tmp.path());
    FAIL("expected corrupt-dataset error");
  } catch (const Error& e) {
    REQUIRE(e.category() == "corrupt-dataset");
    REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring(std::to_string(bytes.size())));
    REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring(std::to_string(bytes.size() - 8)));
  }
}

TEST_CASE("duplicate record_index rejected") {
  TempDir tmp("dset_dup");
  auto [m, samples] = small_dataset(5, 2, 2, 3, 3, 13);
  m.records[4].record_index = 2;
  REQUIRE_THROWS_WITH(write_dataset(m, samples, tmp.path()),
                      Catch::Matchers::ContainsSubstring("duplicate record_index"));
}

TEST_CASE("synthetic generator: counts and determinism") {
  SyntheticSpec spec;
  spec.seed = 99;
  auto [m, samples] = generate_synthetic(spec);
  REQUIRE(m.records.size() == 1000);
  int train = 0;
  for (const auto& r : m.records) train += r.split == Split::train ? 1 : 0;
  REQUIRE(train == 600);

  TempDir a("syn_a"), b("syn_b");
  write_dataset(m, samples, a.path());
  auto [m2, samples2] = generate_synthetic(spec);
  write_dataset(m2, samples2, b.path());
  REQUIRE(testutil::file_fingerprint(a / "features.f32") ==
          testutil::file_fingerprint(b / "features.f32"));
  REQUIRE(testutil::file_fingerprint(a / "manifest.json") ==
          testutil::file_fingerprint(b / "manifest.json"));

  // different seed moves the bytes
  spec.seed = 100;
  auto [m3, samples3] = generate_synthetic(spec);
  TempDir c("syn_c");
  write_dataset(m3, samples3, c.path());
  REQUIRE(testutil::file_fingerprint(a / "features.f32") !=
          testutil::file_fingerprint(c / "features.f32"));
}

TEST_CASE("zero class separation removes class signal") {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 200;
  spec.valid_per_class = 1;
  spec.test_per_class = 1;
  spec.class_separation = 0.0;
  spec.seed = 7;
  auto [m, samples] = generate_synthetic(spec);

  // Welch z-test on the per-sample mean audio activation, class 0 vs class 1.
  std::vector<double> s0, s1;
  for (const auto& s : samples) {
    if (s.split != Split::train) continue;
    (s.label == 0 ? s0 : s1).push_back(s.features.audio.mean());
  }
  auto mean = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    return m / static_cast<double>(v.size());
  };
  auto var = [&](const std::vector<double>& v, double m) {
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
  };
  double m0 = mean(s0), m1 = mean(s1);
  double z = (m0 - m1) / std::sqrt(var(s0, m0) / static_cast<double>(s0.size()) +
                                   var(s1, m1) / static_cast<double>(s1.size()));
  REQUIRE(std::abs(z) < 2.576);  // alpha = 0.01, fail to reject
}

TEST_CASE("temporal smoothing controls lag-1 autocorrelation") {
  SyntheticSpec spec;
  spec.num_classes = 2;
  spec.train_per_class = 500;
  spec.valid_per_class = 1;
  spec.test_per_class = 1;
  spec.snippets = 12;
  spec.class_separation = 0.0;
  spec.cross_modal_coupling = 0.0;
  spec.seed = 5;

  auto lag1 = [](const std::vector<LabeledSample>& samples) {
    double sxy = 0, sxx = 0, syy = 0, sx = 0, sy = 0;
    long n = 0;
    for (const auto& s : samples) {
      for (int t = 0; t + 1 < s.features.audio.rows(); ++t)
        for (int d = 0; d < s.features.audio.cols(); ++d) {
          double x = s.features.audio(t, d), y = s.features.audio(t + 1, d);
          sx += x;
          sy += y;
          sxx += x * x;
          syy += y * y;
          sxy += x * y;
          ++n;
        }
    }
    double nx = static_cast<double>(n);
    double cov = sxy / nx - (sx / nx) * (sy / nx);
    double vx = sxx / nx - (sx / nx) * (sx / nx);
    double vy = syy / nx - (sy / nx) * (sy / nx);
    return cov / std::sqrt(vx * vy);
  };

  spec.temporal_smoothing = 0.0;
  auto [m0, flat] = generate_synthetic(spec);
  REQUIRE(std::abs(lag1(flat)) < 0.1);

  spec.temporal_smoothing = 0.9;
  auto [m1, smooth] = generate_synthetic(spec);
  REQUIRE(lag1(smooth) > 0.6);
}

TEST_CASE("nearest-class-mean learnability guard on the default spec") {
  SyntheticSpec spec;
  spec.seed = 3;
  auto [m, samples] = generate_synthetic(spec);

  // brute-force NCM on snippet-averaged concatenated features
  int dim = spec.audio_dim + spec.visual_dim;
  auto embed = [&](const LabeledSample& s) {
    RowVec v(dim);
    v.head(spec.audio_dim) = s.features.audio.colwise().mean();
    v.tail(spec.visual_dim) = s.features.visual.colwise().mean();
    return v;
  };
  Mat means = Mat::Zero(spec.num_classes, dim);
  std::vector<int> counts(static_cast<size_t>(spec.num_classes), 0);
  for (const auto& s : samples)
    if (s.split == Split::train) {
      means.row(s.label) += embed(s);
      counts[static_cast<size_t>(s.label)]++;
    }
  for (int c = 0; c < spec.num_classes; ++c) means.row(c) /= counts[static_cast<size_t>(c)];

  int correct = 0, total = 0;
  for (const auto& s : samples) {
    if (s.split != Split::test) continue;
    RowVec v = embed(s);
    int best = 0;
    double bestd = (v - means.row(0)).squaredNorm();
    for (int c = 1; c < spec.num_classes; ++c) {
      double d = (v - means.row(c)).squaredNorm();
      if (d < bestd) {
        bestd = d;
        best = c;
      }
    }
    correct += best == s.label ? 1 : 0;
    ++total;
  }
  double acc = 100.0 * correct / total;
  INFO("NCM accuracy " << acc);
  REQUIRE(acc > 90.0);
}

TEST_CASE("ingest pools frames and concatenates 3d features") {
  TempDir tmp("ingest");
  IngestShapes shapes;
  shapes.snippets = 2;
  shapes.audio_dim = 3;
  shapes.frames = 8;  // 4 frames per snippet
  shapes.visual2d_dim = 5;
  shapes.visual3d_dim = 2;

  auto write_raw = [&](const std::filesystem::path& p, const Mat& m) {
    std::string blob;
    append_matrix_f32(blob, m);
    write_file_bytes(p.string(), blob);
  };

  std::filesystem::create_directories(tmp / "a");
  std::filesystem::create_directories(tmp / "v2");
  std::filesystem::create_directories(tmp / "v3");

  // vid0: constant 2D frames of value 2.5 -> pooled snippet value 2.5
  write_raw(tmp / "a" / "vid0.f32", Mat::Zero(2, 3));
  write_raw(tmp / "v2" / "vid0.f32", Mat::Constant(8, 5, 2.5));
  write_raw(tmp / "v3" / "vid0.f32", Mat::Constant(2, 2, -1.0));
  // vid1: wrong frame count -> skipped
  write_raw(tmp / "a" / "vid1.f32", Mat::Zero(2, 3));
  write_raw(tmp / "v2" / "vid1.f32", Mat::Constant(7, 5, 1.0));
  write_raw(tmp / "v3" / "vid1.f32", Mat::Constant(2, 2, 0.0));

  write_file_bytes((tmp / "labels.csv").string(), "id,label,split\nvid0,0,train\nvid1,0,train\n");

  auto [manifest, summary] = ingest_precomputed(tmp / "a", tmp / "v2", tmp / "v3",
                                                tmp / "labels.csv", tmp / "out", shapes);
  REQUIRE(summary.ingested == 1);
  REQUIRE(summary.skipped.size() == 1);
  REQUIRE(summary.skipped[0].first == "vid1");
  REQUIRE_THAT(summary.skipped[0].second, Catch::Matchers::ContainsSubstring("expected"));
  REQUIRE(manifest.visual_dim == 7);

  DatasetReader reader(tmp / "out");
  auto s = reader.sample(0);
  for (int t = 0; t < 2; ++t) {
    for (int d = 0; d < 5; ++d) REQUIRE(s.features.visual(t, d) == 2.5);
    for (int d = 5; d < 7; ++d) REQUIRE(s.features.visual(t, d) == -1.0);
  }
}

TEST_CASE("ingest default shapes give the 2560-dim fused visual block") {
  TempDir tmp("ingest_full");
  IngestShapes shapes;  // paper shapes
  std::filesystem::create_directories(tmp / "a");
  std::filesystem::create_directories(tmp / "v2");
  std::filesystem::create_directories(tmp / "v3");
  Rng rng(8);
  auto write_raw = [&](const std::filesystem::path& p, const Mat& m) {
    std::string blob;
    append_matrix_f32(blob, m);
    write_file_bytes(p.string(), blob);
  };
  write_raw(tmp / "a" / "x.f32", rng.normal_matrix(10, 128));
  write_raw(tmp / "v2" / "x.f32", rng.normal_matrix(80, 2048));
  write_raw(tmp / "v3" / "x.f32", rng.normal_matrix(10, 512));
  write_file_bytes((tmp / "labels.csv").string(), "id,label,split\nx,0,train\n");

  auto [manifest, summary] = ingest_precomputed(tmp / "a", tmp / "v2", tmp / "v3",
                                                tmp / "labels.csv", tmp / "out");
  REQUIRE(manifest.visual_dim == 2560);
  REQUIRE(manifest.audio_dim == 128);
  REQUIRE(manifest.snippets_per_video == 10);
  REQUIRE(summary.ingested == 1);
}
