#pragma once

// Trainable audio-visual model: hybrid-attention fusion (parameter partition
// phi) and classifier head (partition psi).
//
// Per modality the fusion block is: input projection to d_model, pre-norm
// self-attention over the modality's own snippets, then pre-norm
// cross-attention with the other modality's snippets as keys/values, each
// sublayer with a residual connection. Snippet outputs are mean-pooled into
// per-modality video features; the video feature is their sum.

#include <span>
#include <unordered_map>

#include <json.hpp>

#include "had/autodiff.hpp"
#include "had/dataset.hpp"

namespace had {

enum class Modality { audio, visual };
enum class HeadKind { cosine, linear };
enum class Partition { fusion, classifier };

inline std::string to_string(HeadKind h) { return h == HeadKind::cosine ? "cosine" : "linear"; }
inline HeadKind head_from_string(const std::string& s) {
  if (s == "cosine") return HeadKind::cosine;
  if (s == "linear") return HeadKind::linear;
  fail("config", "unknown head kind: " + s);
}

struct FusionConfig {
  int d_model = 64;
  int num_heads = 4;
  int snippets = 10;  // K
  int audio_dim = 16;
  int visual_dim = 24;
  bool positional = true;
  double ln_eps = 1e-5;
  double norm_eps = 1e-8;  // cosine-head norm clamp

  void validate() const {
    if (d_model < 1 || num_heads < 1 || snippets < 1 || audio_dim < 1 || visual_dim < 1)
      fail("config", "fusion config fields must be >= 1");
    if (d_model % num_heads != 0)
      fail("config", "d_model must be divisible by num_heads");
  }
};

struct FusionOutputs {
  Mat audio_snippets;  // K x d
  Mat visual_snippets;
  RowVec audio_video;  // H^a
  RowVec visual_video; // H^v
  RowVec video;        // H = H^a + H^v
};

/// A training sample whose label has been mapped to a classifier slot.
struct Example {
  ModalFeatures features;
  int slot = 0;
};

// ---------------------------------------------------------------------------
// Parameter store and graph bindings
// ---------------------------------------------------------------------------

struct Parameter {
  std::string name;
  Partition part;
  Mat value;
};

class ParameterStore {
public:
  int add(std::string name, Partition part, Mat value) {
    int idx = static_cast<int>(items_.size());
    index_[name] = idx;
    items_.push_back({std::move(name), part, std::move(value)});
    return idx;
  }

  Parameter& operator[](int idx) { return items_[static_cast<size_t>(idx)]; }
  const Parameter& operator[](int idx) const { return items_[static_cast<size_t>(idx)]; }
  int size() const { return static_cast<int>(items_.size()); }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  Mat& at(const std::string& name) {
    int idx = find(name);
    if (idx < 0) fail("internal", "unknown parameter " + name);
    return items_[static_cast<size_t>(idx)].value;
  }

  long scalar_count(Partition p) const {
    long n = 0;
    for (const auto& item : items_)
      if (item.part == p) n += item.value.size();
    return n;
  }
  long scalar_count() const { return scalar_count(Partition::fusion) + scalar_count(Partition::classifier); }

  bool finite() const {
    for (const auto& item : items_)
      if (!all_finite(item.value)) return false;
    return true;
  }

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

private:
  std::vector<Parameter> items_;
  std::unordered_map<std::string, int> index_;
};

/// Which partitions receive gradients in a graph binding.
struct GradFlags {
  bool fusion = true;
  bool classifier = true;
};

/// Per-graph binding of the store: parameters in enabled partitions become
/// leaves, everything else becomes a constant. Gradients for constants are
/// exactly zero by construction (backward never reaches them).
struct BoundParams {
  std::vector<ad::Var> vars;
  GradFlags flags;

  const ad::Var& operator[](int idx) const { return vars[static_cast<size_t>(idx)]; }

  Mat grad_of(int idx) const {
    const ad::Var& v = vars[static_cast<size_t>(idx)];
    if (v->grad.size() == 0) return Mat::Zero(v->val.rows(), v->val.cols());
    return v->grad;
  }
};

inline BoundParams bind(const ParameterStore& store, GradFlags flags) {
  BoundParams bp;
  bp.flags = flags;
  bp.vars.reserve(static_cast<size_t>(store.size()));
  for (int i = 0; i < store.size(); ++i) {
    bool grad = store[i].part == Partition::fusion ? flags.fusion : flags.classifier;
    bp.vars.push_back(grad ? ad::leaf(store[i].value) : ad::constant(store[i].value));
  }
  return bp;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class FusionClassifier;

/// Immutable copy of the model at capture time.
class ModelSnapshot {
public:
  explicit ModelSnapshot(FusionClassifier model);
  const FusionClassifier& model() const { return *model_; }

private:
  std::shared_ptr<const FusionClassifier> model_;
};

class FusionClassifier {
public:
  struct SampleGraph {
    ad::Var audio_snippets;  // K x d
    ad::Var visual_snippets;
    ad::Var audio_video;  // 1 x d
    ad::Var visual_video;
    ad::Var video;
  };

  FusionClassifier(FusionConfig cfg, HeadKind head, Rng& init_rng)
      : cfg_(cfg), head_(head) {
    cfg_.validate();
    ids_a_ = build_modality("audio", cfg_.audio_dim, init_rng);
    ids_v_ = build_modality("visual", cfg_.visual_dim, init_rng);
    head_w_ = params_.add("head.w", Partition::classifier, Mat::Zero(0, cfg_.d_model));
    if (head_ == HeadKind::cosine)
      head_sigma_ = params_.add("head.sigma", Partition::classifier, Mat::Constant(1, 1, 10.0));
    else
      head_b_ = params_.add("head.b", Partition::classifier, Mat::Zero(1, 0));
  }

  const FusionConfig& config() const { return cfg_; }
  HeadKind head_kind() const { return head_; }
  int num_classes() const { return num_classes_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  BoundParams bind(GradFlags flags) const { return had::bind(params_, flags); }

  // ---- graph forward -----------------------------------------------------

  SampleGraph fuse_g(const BoundParams& bp, const ModalFeatures& f) const {
    check_dims(f);
    ad::Var a0 = project_in(bp, ids_a_, f.audio);
    ad::Var v0 = project_in(bp, ids_v_, f.visual);

    ad::Var a_ln = ad::layer_norm_rows(a0, bp[ids_a_.self_ln_g], bp[ids_a_.self_ln_b], cfg_.ln_eps);
    ad::Var a1 = ad::add(a0, attention_g(bp, ids_a_.self_attn, a_ln, a_ln));
    ad::Var v_ln = ad::layer_norm_rows(v0, bp[ids_v_.self_ln_g], bp[ids_v_.self_ln_b], cfg_.ln_eps);
    ad::Var v1 = ad::add(v0, attention_g(bp, ids_v_.self_attn, v_ln, v_ln));

    ad::Var a_q = ad::layer_norm_rows(a1, bp[ids_a_.cross_lnq_g], bp[ids_a_.cross_lnq_b], cfg_.ln_eps);
    ad::Var a_kv = ad::layer_norm_rows(v1, bp[ids_a_.cross_lnkv_g], bp[ids_a_.cross_lnkv_b], cfg_.ln_eps);
    ad::Var a2 = ad::add(a1, attention_g(bp, ids_a_.cross_attn, a_q, a_kv));

    ad::Var v_q = ad::layer_norm_rows(v1, bp[ids_v_.cross_lnq_g], bp[ids_v_.cross_lnq_b], cfg_.ln_eps);
    ad::Var v_kv = ad::layer_norm_rows(a1, bp[ids_v_.cross_lnkv_g], bp[ids_v_.cross_lnkv_b], cfg_.ln_eps);
    ad::Var v2 = ad::add(v1, attention_g(bp, ids_v_.cross_attn, v_q, v_kv));

    SampleGraph g;
    g.audio_snippets = a2;
    g.visual_snippets = v2;
    g.audio_video = ad::mean_rows(a2);
    g.visual_video = ad::mean_rows(v2);
    g.video = ad::add(g.audio_video, g.visual_video);
    return g;
  }

  /// Stack the video features of a batch into a (B x d) variable.
  ad::Var batch_video_g(const BoundParams& bp, std::span<const ModalFeatures> batch) const {
    std::vector<ad::Var> rows;
    rows.reserve(batch.size());
    for (const auto& f : batch) rows.push_back(fuse_g(bp, f).video);
    return ad::vstack(rows);
  }

  /// Logits for stacked video features (B x d) -> (B x C).
  ad::Var classify_g(const BoundParams& bp, const ad::Var& video_rows) const {
    if (num_classes_ < 1) fail("internal", "classifier has no classes");
    if (head_ == HeadKind::cosine) {
      ad::Var hn = ad::l2_normalize_rows(video_rows, cfg_.norm_eps);
      ad::Var wn = ad::l2_normalize_rows(bp[head_w_], cfg_.norm_eps);
      return ad::scalar_mul(bp[head_sigma_], ad::matmul(hn, ad::transpose(wn)));
    }
    return ad::add_rowvec(ad::matmul(video_rows, ad::transpose(bp[head_w_])), bp[head_b_]);
  }

  ad::Var batch_logits_g(const BoundParams& bp, std::span<const ModalFeatures> batch) const {
    return classify_g(bp, batch_video_g(bp, batch));
  }

  // ---- plain forward -----------------------------------------------------

  FusionOutputs fuse(const ModalFeatures& f) const {
    BoundParams bp = bind({false, false});
    return fuse_values(bp, f);
  }

  FusionOutputs fuse_values(const BoundParams& bp, const ModalFeatures& f) const {
    SampleGraph g = fuse_g(bp, f);
    FusionOutputs out;
    out.audio_snippets = g.audio_snippets->val;
    out.visual_snippets = g.visual_snippets->val;
    out.audio_video = g.audio_video->val.row(0);
    out.visual_video = g.visual_video->val.row(0);
    out.video = g.video->val.row(0);
    return out;
  }

  RowVec classify(const RowVec& video_feature) const {
    BoundParams bp = bind({false, false});
    Mat h(1, video_feature.size());
    h.row(0) = video_feature;
    return classify_g(bp, ad::constant(h))->val.row(0);
  }

  RowVec logits(const ModalFeatures& f) const {
    BoundParams bp = bind({false, false});
    return classify_g(bp, fuse_g(bp, f).video)->val.row(0);
  }

  // ---- class expansion ---------------------------------------------------

  void expand_classes(int n_new, Rng& rng) {
    if (n_new < 1) fail("validation", "expand_classes requires n_new >= 1");
    Mat& w = params_[head_w_].value;
    Mat grown(w.rows() + n_new, cfg_.d_model);
    grown.topRows(w.rows()) = w;
    double std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
    grown.bottomRows(n_new) = rng.normal_matrix(n_new, cfg_.d_model, std);
    w = std::move(grown);
    if (head_ == HeadKind::linear) {
      Mat& b = params_[head_b_].value;
      Mat nb(1, b.cols() + n_new);
      nb.leftCols(b.cols()) = b;
      nb.rightCols(n_new).setZero();
      b = std::move(nb);
    }
    num_classes_ += n_new;
  }

  ModelSnapshot snapshot() const { return ModelSnapshot(*this); }

  /// Round every parameter through float32 so the in-memory model matches
  /// its persisted checkpoint exactly.
  void quantize_parameters() {
    for (int i = 0; i < params_.size(); ++i) quantize_f32(params_[i].value);
  }

private:
  struct AttnHeadIds {
    int wq, bq, wk, bk, wv, bv, wo;
  };
  struct AttentionIds {
    std::vector<AttnHeadIds> heads;
    int bo;
  };
  struct ModalityIds {
    int in_w, in_b;
    int pos = -1;
    int self_ln_g, self_ln_b;
    AttentionIds self_attn;
    int cross_lnq_g, cross_lnq_b, cross_lnkv_g, cross_lnkv_b;
    AttentionIds cross_attn;
  };

  ModalityIds build_modality(const std::string& m, int in_dim, Rng& rng) {
    int d = cfg_.d_model;
    ModalityIds ids;
    ids.in_w = add_weight(m + ".in.w", in_dim, d, rng);
    ids.in_b = params_.add(m + ".in.b", Partition::fusion, Mat::Zero(1, d));
    if (cfg_.positional)
      ids.pos = params_.add(m + ".pos", Partition::fusion,
                            rng.normal_matrix(cfg_.snippets, d, 0.02));
    ids.self_ln_g = params_.add(m + ".self.ln.g", Partition::fusion, Mat::Ones(1, d));
    ids.self_ln_b = params_.add(m + ".self.ln.b", Partition::fusion, Mat::Zero(1, d));
    ids.self_attn = build_attention(m + ".self", rng);
    ids.cross_lnq_g = params_.add(m + ".cross.lnq.g", Partition::fusion, Mat::Ones(1, d));
    ids.cross_lnq_b = params_.add(m + ".cross.lnq.b", Partition::fusion, Mat::Zero(1, d));
    ids.cross_lnkv_g = params_.add(m + ".cross.lnkv.g", Partition::fusion, Mat::Ones(1, d));
    ids.cross_lnkv_b = params_.add(m + ".cross.lnkv.b", Partition::fusion, Mat::Zero(1, d));
    ids.cross_attn = build_attention(m + ".cross", rng);
    return ids;
  }

  AttentionIds build_attention(const std::string& prefix, Rng& rng) {
    int d = cfg_.d_model;
    int dh = d / cfg_.num_heads;
    AttentionIds ids;
    for (int h = 0; h < cfg_.num_heads; ++h) {
      std::string hp = prefix + ".h" + std::to_string(h) + ".";
      AttnHeadIds head;
      head.wq = add_weight(hp + "wq", d, dh, rng);
      head.bq = params_.add(hp + "bq", Partition::fusion, Mat::Zero(1, dh));
      head.wk = add_weight(hp + "wk", d, dh, rng);
      head.bk = params_.add(hp + "bk", Partition::fusion, Mat::Zero(1, dh));
      head.wv = add_weight(hp + "wv", d, dh, rng);
      head.bv = params_.add(hp + "bv", Partition::fusion, Mat::Zero(1, dh));
      head.wo = add_weight(hp + "wo", dh, d, rng);
      ids.heads.push_back(head);
    }
    ids.bo = params_.add(prefix + ".bo", Partition::fusion, Mat::Zero(1, d));
    return ids;
  }

  int add_weight(const std::string& name, int rows, int cols, Rng& rng) {
    double std = 1.0 / std::sqrt(static_cast<double>(rows));
    return params_.add(name, Partition::fusion, rng.normal_matrix(rows, cols, std));
  }

  ad::Var project_in(const BoundParams& bp, const ModalityIds& ids, const Mat& input) const {
    ad::Var x = ad::add_rowvec(ad::matmul(ad::constant(input), bp[ids.in_w]), bp[ids.in_b]);
    if (ids.pos >= 0) x = ad::add(x, bp[ids.pos]);
    return x;
  }

  ad::Var attention_g(const BoundParams& bp, const AttentionIds& ids, const ad::Var& q_in,
                      const ad::Var& kv_in) const {
    int dh = cfg_.d_model / cfg_.num_heads;
    double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    ad::Var out;
    for (const auto& h : ids.heads) {
      ad::Var q = ad::add_rowvec(ad::matmul(q_in, bp[h.wq]), bp[h.bq]);
      ad::Var k = ad::add_rowvec(ad::matmul(kv_in, bp[h.wk]), bp[h.bk]);
      ad::Var v = ad::add_rowvec(ad::matmul(kv_in, bp[h.wv]), bp[h.bv]);
      ad::Var weights = ad::row_softmax(ad::scale(ad::matmul(q, ad::transpose(k)), sc));
      ad::Var proj = ad::matmul(ad::matmul(weights, v), bp[h.wo]);
      out = out ? ad::add(out, proj) : proj;
    }
    return ad::add_rowvec(out, bp[ids.bo]);
  }

  void check_dims(const ModalFeatures& f) const {
    if (f.audio.rows() != cfg_.snippets || f.audio.cols() != cfg_.audio_dim ||
        f.visual.rows() != cfg_.snippets || f.visual.cols() != cfg_.visual_dim)
      fail("validation", "feature dimensions do not match the fusion config");
  }

  FusionConfig cfg_;
  HeadKind head_;
  int num_classes_ = 0;
  ParameterStore params_;
  ModalityIds ids_a_, ids_v_;
  int head_w_ = -1, head_b_ = -1, head_sigma_ = -1;
};

inline ModelSnapshot::ModelSnapshot(FusionClassifier model)
    : model_(std::make_shared<const FusionClassifier>(std::move(model))) {}

/// Snapshot forward. The snapshot's parameters enter the graph as constants,
/// so no gradient can reach them or flow to live parameters through them.
inline RowVec forward_snapshot_logits(const ModelSnapshot& snap, const ModalFeatures& f) {
  return snap.model().logits(f);
}
inline FusionOutputs forward_snapshot(const ModelSnapshot& snap, const ModalFeatures& f) {
  return snap.model().fuse(f);
}

// ---------------------------------------------------------------------------
// Checkpoint format: manifest.json + params.f32, same two-file convention as
// the dataset format.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const FusionClassifier& model, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const FusionConfig& c = model.config();
  json params = json::array();
  std::string blob;
  size_t offset = 0;
  for (const auto& p : model.params()) {
    params.push_back({{"name", p.name},
                      {"partition", p.part == Partition::fusion ? "fusion" : "classifier"},
                      {"rows", p.value.rows()},
                      {"cols", p.value.cols()},
                      {"offset", offset}});
    append_matrix_f32(blob, p.value);
    offset += static_cast<size_t>(p.value.size()) * 4;
  }
  json manifest = {{"format", "had-checkpoint"},
                   {"version", 1},
                   {"config",
                    {{"d_model", c.d_model},
                     {"num_heads", c.num_heads},
                     {"snippets", c.snippets},
                     {"audio_dim", c.audio_dim},
                     {"visual_dim", c.visual_dim},
                     {"positional", c.positional}}},
                   {"head", to_string(model.head_kind())},
                   {"num_classes", model.num_classes()},
                   {"params", params}};
  write_file_bytes((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  write_file_bytes((dir / "params.f32").string(), blob);
}

inline FusionClassifier load_checkpoint(const fs::path& dir) {
  json manifest = json::parse(read_file_bytes((dir / "manifest.json").string()), nullptr, false);
  if (manifest.is_discarded()) fail("io", "checkpoint manifest is not valid JSON");
  FusionConfig cfg;
  try {
    const json& c = manifest.at("config");
    cfg.d_model = c.at("d_model").get<int>();
    cfg.num_heads = c.at("num_heads").get<int>();
    cfg.snippets = c.at("snippets").get<int>();
    cfg.audio_dim = c.at("audio_dim").get<int>();
    cfg.visual_dim = c.at("visual_dim").get<int>();
    cfg.positional = c.at("positional").get<bool>();
  } catch (const json::exception& e) {
    fail("io", std::string("bad checkpoint manifest: ") + e.what());
  }
  HeadKind head = head_from_string(manifest.at("head").get<std::string>());
  Rng scratch(0);
  FusionClassifier model(cfg, head, scratch);
  int classes = manifest.at("num_classes").get<int>();
  if (classes > 0) model.expand_classes(classes, scratch);

  std::string blob = read_file_bytes((dir / "params.f32").string());
  for (const auto& p : manifest.at("params")) {
    std::string name = p.at("name").get<std::string>();
    auto rows = p.at("rows").get<Eigen::Index>();
    auto cols = p.at("cols").get<Eigen::Index>();
    auto offset = p.at("offset").get<size_t>();
    if (offset + static_cast<size_t>(rows * cols) * 4 > blob.size())
      fail("io", "checkpoint blob too small for parameter " + name);
    model.params().at(name) = read_matrix_f32(blob.data() + offset, rows, cols);
  }
  return model;
}

}  // namespace had
