#pragma once

// Hierarchical Distillation Module against a frozen snapshot of the
// previous-phase model.
//
//   HLD: logical distillation of old-class probabilities, on the given
//        samples (sl) and on convex-hull draws standing in for the task
//        distributions (dl).
//   HCD: correlative distillation of row-stochastic similarity matrices,
//        across videos (ss) and across snippets within a video (ns), per
//        modality.
//
// The snapshot side is always evaluated outside the graph: its parameters
// cannot receive gradient, and nothing flows through it into the live
// parameters. KL terms are KL(teacher || student), mean-reduced over rows.

#include <span>

#include "had/ham.hpp"

namespace had {

// ---------------------------------------------------------------------------
// Convex hull sampling
// ---------------------------------------------------------------------------

/// Map raw normal draws to convex weights: absolute value, then divide by
/// the sum. Guarantees every weight lies in [0,1] and the sum is one.
inline std::vector<double> convex_weights_from_normals(std::span<const double> draws) {
  if (draws.empty()) fail("validation", "convex weights need a non-empty batch");
  std::vector<double> alpha(draws.size());
  double total = 0.0;
  for (size_t i = 0; i < draws.size(); ++i) {
    alpha[i] = std::abs(draws[i]);
    total += alpha[i];
  }
  if (total <= 0.0) {  // all-zero draw: fall back to the uniform weight
    for (double& a : alpha) a = 1.0 / static_cast<double>(alpha.size());
    return alpha;
  }
  for (double& a : alpha) a /= total;
  return alpha;
}

inline std::vector<double> sample_convex_weights(size_t n, Rng& rng) {
  std::vector<double> draws(n);
  for (double& d : draws) d = rng.normal();
  return convex_weights_from_normals(draws);
}

/// One shared weight vector applied to the audio and visual blocks alike.
inline ModalFeatures convex_combine(std::span<const ModalFeatures> batch,
                                    std::span<const double> alpha) {
  if (batch.empty() || batch.size() != alpha.size())
    fail("validation", "convex_combine: batch/weight size mismatch");
  ModalFeatures out;
  out.audio = Mat::Zero(batch[0].audio.rows(), batch[0].audio.cols());
  out.visual = Mat::Zero(batch[0].visual.rows(), batch[0].visual.cols());
  for (size_t i = 0; i < batch.size(); ++i) {
    out.audio += alpha[i] * batch[i].audio;
    out.visual += alpha[i] * batch[i].visual;
  }
  return out;
}

inline ModalFeatures sample_convex_hull(std::span<const ModalFeatures> batch, Rng& rng) {
  return convex_combine(batch, sample_convex_weights(batch.size(), rng));
}

// ---------------------------------------------------------------------------
// KL building blocks
// ---------------------------------------------------------------------------

/// Mean over rows of KL(teacher_probs || softmax(student_logits)). The
/// teacher matrix is a constant.
inline ad::Var kl_rows_teacher(const Mat& teacher_probs, const ad::Var& student_logits) {
  Eigen::Index rows = teacher_probs.rows();
  double teacher_entropy_part = 0.0;  // sum T log T
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < teacher_probs.cols(); ++c) {
      double t = teacher_probs(r, c);
      if (t > 0.0) teacher_entropy_part += t * std::log(t);
    }
  ad::Var cross = ad::sum_all(ad::hadamard_const(ad::row_log_softmax(student_logits), -teacher_probs));
  return ad::add_scalar(ad::scale(cross, 1.0 / static_cast<double>(rows)),
                        teacher_entropy_part / static_cast<double>(rows));
}

/// Teacher probabilities over the snapshot's own class set.
inline Mat snapshot_probs(const ModelSnapshot& snap, std::span<const ModalFeatures> batch) {
  Mat logits(static_cast<Eigen::Index>(batch.size()), snap.model().num_classes());
  BoundParams bp = snap.model().bind({false, false});
  for (size_t i = 0; i < batch.size(); ++i)
    logits.row(static_cast<Eigen::Index>(i)) =
        snap.model().classify_g(bp, snap.model().fuse_g(bp, batch[i]).video)->val.row(0);
  return softmax_rows(logits);
}

/// Student logits restricted to the old-class columns (renormalized softmax
/// happens inside the KL).
inline ad::Var student_old_logits(const FusionClassifier& live, const BoundParams& bp,
                                  std::span<const ModalFeatures> batch, int n_old) {
  return ad::slice_cols(live.batch_logits_g(bp, batch), 0, n_old);
}

// ---------------------------------------------------------------------------
// HLD
// ---------------------------------------------------------------------------

/// Video-level logical distillation over the memory and current batches.
inline LossTerm loss_sl(const FusionClassifier& live, const BoundParams& bp,
                        const ModelSnapshot& snap, std::span<const ModalFeatures> memory,
                        std::span<const ModalFeatures> current) {
  if (live.num_classes() < snap.model().num_classes())
    fail("validation", "live classifier is narrower than the snapshot");
  if (memory.empty() && current.empty()) return LossTerm::skip();
  int n_old = snap.model().num_classes();
  ad::Var total;
  for (std::span<const ModalFeatures> batch : {memory, current}) {
    if (batch.empty()) continue;
    ad::Var kl = kl_rows_teacher(snapshot_probs(snap, batch),
                                 student_old_logits(live, bp, batch, n_old));
    total = total ? ad::add(total, kl) : kl;
  }
  return LossTerm::of(total);
}

/// Distribution-level logical distillation on pre-drawn hull samples.
inline LossTerm loss_dl(const FusionClassifier& live, const BoundParams& bp,
                        const ModelSnapshot& snap, std::span<const ModalFeatures> memory_hull,
                        std::span<const ModalFeatures> current_hull) {
  return loss_sl(live, bp, snap, memory_hull, current_hull);
}

/// Spec-level entry: draw n_draws hull samples per non-empty source.
inline LossTerm loss_dl_sampled(const FusionClassifier& live, const BoundParams& bp,
                                const ModelSnapshot& snap,
                                std::span<const ModalFeatures> memory_batch,
                                std::span<const ModalFeatures> current_batch, int n_draws,
                                Rng& rng) {
  if (n_draws < 1) fail("validation", "loss_dl requires n_draws >= 1");
  std::vector<ModalFeatures> mem_hull, cur_hull;
  for (int i = 0; i < n_draws; ++i) {
    if (!memory_batch.empty()) mem_hull.push_back(sample_convex_hull(memory_batch, rng));
    if (!current_batch.empty()) cur_hull.push_back(sample_convex_hull(current_batch, rng));
  }
  if (mem_hull.empty() && cur_hull.empty()) return LossTerm::skip();
  return loss_dl(live, bp, snap, mem_hull, cur_hull);
}

struct HldOptions {
  bool sld = true;
  bool dld = true;
};

/// L_HLD = L_sl + L_dl, with the ablation switches.
inline LossTerm loss_hld(const FusionClassifier& live, const BoundParams& bp,
                         const ModelSnapshot& snap, std::span<const ModalFeatures> memory,
                         std::span<const ModalFeatures> current, int n_draws, Rng& rng,
                         const HldOptions& opt = {}) {
  LossTerm sl = opt.sld ? loss_sl(live, bp, snap, memory, current) : LossTerm::skip();
  LossTerm dl = opt.dld ? loss_dl_sampled(live, bp, snap, memory, current, n_draws, rng)
                        : LossTerm::skip();
  if (sl.skipped && dl.skipped) return LossTerm::skip();
  if (sl.skipped) return dl;
  if (dl.skipped) return sl;
  return LossTerm::of(ad::add(sl.node, dl.node));
}

// ---------------------------------------------------------------------------
// HCD
// ---------------------------------------------------------------------------

namespace detail {

inline RowVec modal_video(const FusionOutputs& out, Modality m) {
  return m == Modality::audio ? out.audio_video : out.visual_video;
}

inline ad::Var modal_video_g(const FusionClassifier::SampleGraph& g, Modality m) {
  return m == Modality::audio ? g.audio_video : g.visual_video;
}

inline const Mat& modal_snippets(const FusionOutputs& out, Modality m) {
  return m == Modality::audio ? out.audio_snippets : out.visual_snippets;
}

inline ad::Var modal_snippets_g(const FusionClassifier::SampleGraph& g, Modality m) {
  return m == Modality::audio ? g.audio_snippets : g.visual_snippets;
}

}  // namespace detail

/// Row-stochastic video similarity: softmax over dot products between each
/// augmented sample's per-modality video feature and the whole pool.
inline Mat video_similarity(const FusionClassifier& model,
                            std::span<const ModalFeatures> augmented,
                            std::span<const ModalFeatures> pool, Modality modality) {
  if (pool.empty()) fail("validation", "video_similarity requires a non-empty pool");
  BoundParams bp = model.bind({false, false});
  Mat rows(static_cast<Eigen::Index>(augmented.size()), model.config().d_model);
  for (size_t i = 0; i < augmented.size(); ++i)
    rows.row(static_cast<Eigen::Index>(i)) =
        detail::modal_video(model.fuse_values(bp, augmented[i]), modality);
  Mat cols(static_cast<Eigen::Index>(pool.size()), model.config().d_model);
  for (size_t j = 0; j < pool.size(); ++j)
    cols.row(static_cast<Eigen::Index>(j)) =
        detail::modal_video(model.fuse_values(bp, pool[j]), modality);
  return softmax_rows(rows * cols.transpose());
}

/// Video-level correlative distillation for one modality. The teacher reuses
/// the student's augmentation noise.
inline LossTerm loss_ss(const FusionClassifier& live, const BoundParams& bp,
                        const ModelSnapshot& snap, std::span<const Example> memory_batch,
                        std::span<const Example> current_batch, double lambda,
                        std::span<const LowNoise> noise, Modality modality) {
  size_t pool_size = memory_batch.size() + current_batch.size();
  if (memory_batch.empty() || pool_size < 2) return LossTerm::skip();

  std::vector<ModalFeatures> augmented, pool;
  augmented.reserve(memory_batch.size());
  for (size_t i = 0; i < memory_batch.size(); ++i)
    augmented.push_back(apply_low_noise(memory_batch[i].features, lambda, noise[i]));
  pool.reserve(pool_size);
  for (const auto& e : memory_batch) pool.push_back(e.features);
  for (const auto& e : current_batch) pool.push_back(e.features);

  Mat teacher = video_similarity(snap.model(), augmented, pool, modality);

  std::vector<ad::Var> row_vars, pool_vars;
  for (const auto& f : augmented)
    row_vars.push_back(detail::modal_video_g(live.fuse_g(bp, f), modality));
  for (const auto& f : pool) pool_vars.push_back(detail::modal_video_g(live.fuse_g(bp, f), modality));
  ad::Var student =
      ad::matmul(ad::vstack(row_vars), ad::transpose(ad::vstack(pool_vars)));
  return LossTerm::of(kl_rows_teacher(teacher, student));
}

/// Row-stochastic K x K snippet similarity between the augmented and
/// unaugmented fused snippet features of one sample.
inline Mat snippet_similarity(const FusionClassifier& model, const ModalFeatures& original,
                              const ModalFeatures& augmented, Modality modality) {
  BoundParams bp = model.bind({false, false});
  Mat aug = detail::modal_snippets(model.fuse_values(bp, augmented), modality);
  Mat orig = detail::modal_snippets(model.fuse_values(bp, original), modality);
  return softmax_rows(aug * orig.transpose());
}

/// Snippet-level correlative distillation for one modality: expectation over
/// memory samples of the mean row-wise KL between the snapshot's and the
/// live model's snippet similarity matrices.
inline LossTerm loss_ns(const FusionClassifier& live, const BoundParams& bp,
                        const ModelSnapshot& snap, std::span<const Example> memory_batch,
                        double lambda, std::span<const LowNoise> noise, Modality modality) {
  if (memory_batch.empty()) return LossTerm::skip();
  if (live.config().snippets < 2) return LossTerm::skip();

  ad::Var total;
  for (size_t i = 0; i < memory_batch.size(); ++i) {
    const ModalFeatures& orig = memory_batch[i].features;
    ModalFeatures aug = apply_low_noise(orig, lambda, noise[i]);
    Mat teacher = snippet_similarity(snap.model(), orig, aug, modality);
    ad::Var student = ad::matmul(detail::modal_snippets_g(live.fuse_g(bp, aug), modality),
                                 ad::transpose(detail::modal_snippets_g(live.fuse_g(bp, orig), modality)));
    ad::Var kl = kl_rows_teacher(teacher, student);
    total = total ? ad::add(total, kl) : kl;
  }
  return LossTerm::of(ad::scale(total, 1.0 / static_cast<double>(memory_batch.size())));
}

struct HcdOptions {
  bool scd = true;  // snippet-level terms (ns)
  bool vcd = true;  // video-level terms (ss)
};

struct HcdTerms {
  LossTerm ss_a, ns_a, ss_v, ns_v;

  LossTerm combined() const {
    ad::Var total;
    bool any = false;
    for (const LossTerm* t : {&ss_a, &ns_a, &ss_v, &ns_v}) {
      if (t->skipped) continue;
      total = total ? ad::add(total, t->node) : t->node;
      any = true;
    }
    return any ? LossTerm::of(total) : LossTerm::skip();
  }
};

/// All four correlative terms; L_HCD is their sum. The audio and visual
/// terms come out of one shared set of forwards (a fusion pass yields both
/// modalities), so this is cheaper than calling loss_ss / loss_ns four
/// times while computing exactly the same values.
inline HcdTerms loss_hcd(const FusionClassifier& live, const BoundParams& bp,
                         const ModelSnapshot& snap, std::span<const Example> memory_batch,
                         std::span<const Example> current_batch, double lambda,
                         std::span<const LowNoise> noise, const HcdOptions& opt = {}) {
  HcdTerms t;
  t.ss_a = t.ns_a = t.ss_v = t.ns_v = LossTerm::skip();

  size_t mem = memory_batch.size();
  size_t pool_size = mem + current_batch.size();
  bool want_ss = opt.vcd && mem > 0 && pool_size >= 2;
  bool want_ns = opt.scd && mem > 0 && live.config().snippets >= 2;
  if (!want_ss && !want_ns) return t;

  std::vector<ModalFeatures> augmented;
  augmented.reserve(mem);
  for (size_t i = 0; i < mem; ++i)
    augmented.push_back(apply_low_noise(memory_batch[i].features, lambda, noise[i]));
  std::vector<const ModalFeatures*> pool;
  for (const auto& e : memory_batch) pool.push_back(&e.features);
  for (const auto& e : current_batch) pool.push_back(&e.features);
  size_t pool_used = want_ss ? pool.size() : mem;  // ns needs the memory originals only

  std::vector<FusionClassifier::SampleGraph> g_aug, g_pool;
  for (const auto& f : augmented) g_aug.push_back(live.fuse_g(bp, f));
  for (size_t j = 0; j < pool_used; ++j) g_pool.push_back(live.fuse_g(bp, *pool[j]));

  BoundParams sbp = snap.model().bind({false, false});
  std::vector<FusionOutputs> t_aug, t_pool;
  for (const auto& f : augmented) t_aug.push_back(snap.model().fuse_values(sbp, f));
  for (size_t j = 0; j < pool_used; ++j) t_pool.push_back(snap.model().fuse_values(sbp, *pool[j]));

  for (Modality m : {Modality::audio, Modality::visual}) {
    LossTerm& ss = m == Modality::audio ? t.ss_a : t.ss_v;
    LossTerm& ns = m == Modality::audio ? t.ns_a : t.ns_v;
    if (want_ss) {
      Mat teacher_rows(static_cast<Eigen::Index>(mem), live.config().d_model);
      Mat teacher_cols(static_cast<Eigen::Index>(pool.size()), live.config().d_model);
      for (size_t i = 0; i < mem; ++i)
        teacher_rows.row(static_cast<Eigen::Index>(i)) = detail::modal_video(t_aug[i], m);
      for (size_t j = 0; j < pool.size(); ++j)
        teacher_cols.row(static_cast<Eigen::Index>(j)) = detail::modal_video(t_pool[j], m);
      Mat teacher = softmax_rows(teacher_rows * teacher_cols.transpose());

      std::vector<ad::Var> rows, cols;
      for (const auto& g : g_aug) rows.push_back(detail::modal_video_g(g, m));
      for (const auto& g : g_pool) cols.push_back(detail::modal_video_g(g, m));
      ad::Var student = ad::matmul(ad::vstack(rows), ad::transpose(ad::vstack(cols)));
      ss = LossTerm::of(kl_rows_teacher(teacher, student));
    }
    if (want_ns) {
      ad::Var total;
      for (size_t i = 0; i < mem; ++i) {
        Mat teacher = softmax_rows(detail::modal_snippets(t_aug[i], m) *
                                   detail::modal_snippets(t_pool[i], m).transpose());
        ad::Var student = ad::matmul(detail::modal_snippets_g(g_aug[i], m),
                                     ad::transpose(detail::modal_snippets_g(g_pool[i], m)));
        ad::Var kl = kl_rows_teacher(teacher, student);
        total = total ? ad::add(total, kl) : kl;
      }
      ns = LossTerm::of(ad::scale(total, 1.0 / static_cast<double>(mem)));
    }
  }
  return t;
}

}  // namespace had
