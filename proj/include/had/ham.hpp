#pragma once

// Hierarchical Augmentation Module: Gaussian feature augmentation at the
// low (snippet feature) and high (video feature) levels, with gradient
// routing. The low-level term trains only the fusion partition, the
// high-level term only the classifier partition; routing is enforced by
// binding the frozen partition as graph constants, so the excluded
// gradients are exactly zero. Disabling routing reproduces the noise
//-accumulation ablation mode.

#include <optional>
#include <span>

#include "had/model.hpp"

namespace had {

struct AugmentationConfig {
  double lambda = 0.05;  // augmentation intensity
  Rng* rng = nullptr;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda))
      fail("config", "lambda must be finite and >= 0");
    if (rng == nullptr) fail("config", "augmentation config requires an rng handle");
  }
};

/// One low-level noise draw: independent standard normals per element and
/// per modality.
struct LowNoise {
  Mat audio;
  Mat visual;
};

inline LowNoise draw_low_noise(int snippets, int audio_dim, int visual_dim, Rng& rng) {
  return {rng.normal_matrix(snippets, audio_dim), rng.normal_matrix(snippets, visual_dim)};
}

inline ModalFeatures apply_low_noise(const ModalFeatures& f, double lambda,
                                     const LowNoise& noise) {
  return {f.audio + lambda * noise.audio, f.visual + lambda * noise.visual};
}

inline ModalFeatures augment_low(const ModalFeatures& f, const AugmentationConfig& cfg) {
  cfg.validate();
  return apply_low_noise(
      f, cfg.lambda,
      draw_low_noise(static_cast<int>(f.audio.rows()), static_cast<int>(f.audio.cols()),
                     static_cast<int>(f.visual.cols()), *cfg.rng));
}

inline RowVec augment_high(const RowVec& video_feature, const AugmentationConfig& cfg) {
  cfg.validate();
  return video_feature + cfg.lambda * cfg.rng->normal_matrix(1, video_feature.size()).row(0);
}

/// Noise drawn once per optimization step. The correlative distillation
/// terms reuse the same low-level draw on both the live and snapshot side,
/// so teacher and student matrices differ only through parameters.
struct StepNoise {
  std::vector<LowNoise> low;  // one per memory sample
  Mat high;                   // one row per memory sample (B x d_model)
};

inline StepNoise draw_step_noise(const FusionConfig& cfg, size_t batch, Rng& rng) {
  StepNoise n;
  n.low.reserve(batch);
  for (size_t i = 0; i < batch; ++i)
    n.low.push_back(draw_low_noise(cfg.snippets, cfg.audio_dim, cfg.visual_dim, rng));
  n.high = rng.normal_matrix(static_cast<Eigen::Index>(batch), cfg.d_model);
  return n;
}

/// One scalar loss term. `node` is null when the term was skipped (it then
/// contributes zero and is flagged in the loss breakdown).
struct LossTerm {
  ad::Var node;
  double value = 0.0;
  bool skipped = false;

  static LossTerm skip() { return {nullptr, 0.0, true}; }
  static LossTerm of(ad::Var n) {
    double v = n->val(0, 0);
    return {std::move(n), v, false};
  }
};

/// Low-level segmental augmentation loss. Gradient routing comes from the
/// binding: pass a fusion-only binding to train phi with psi frozen, or a
/// full binding in routing-off mode.
inline LossTerm loss_lsm(const FusionClassifier& model, const BoundParams& bp,
                         std::span<const Example> memory_batch, double lambda,
                         std::span<const LowNoise> noise) {
  if (memory_batch.empty()) return LossTerm::skip();
  std::vector<ModalFeatures> augmented;
  std::vector<int> labels;
  augmented.reserve(memory_batch.size());
  for (size_t i = 0; i < memory_batch.size(); ++i) {
    augmented.push_back(apply_low_noise(memory_batch[i].features, lambda, noise[i]));
    labels.push_back(memory_batch[i].slot);
  }
  return LossTerm::of(ad::cross_entropy_mean(model.batch_logits_g(bp, augmented), labels));
}

/// High-level video feature augmentation loss. With routing on the fusion
/// module is evaluated outside the graph and enters as a constant; with
/// routing off (noise-accumulation mode) it stays in the graph.
inline LossTerm loss_hsm(const FusionClassifier& model, const BoundParams& bp,
                         std::span<const Example> memory_batch, double lambda, const Mat& high_noise,
                         bool fusion_in_graph) {
  if (memory_batch.empty()) return LossTerm::skip();
  std::vector<int> labels;
  labels.reserve(memory_batch.size());
  for (const auto& e : memory_batch) labels.push_back(e.slot);

  ad::Var video_rows;
  if (fusion_in_graph) {
    std::vector<ad::Var> rows;
    for (size_t i = 0; i < memory_batch.size(); ++i) {
      ad::Var h = model.fuse_g(bp, memory_batch[i].features).video;
      rows.push_back(ad::add(h, ad::constant(lambda * high_noise.row(static_cast<Eigen::Index>(i)))));
    }
    video_rows = ad::vstack(rows);
  } else {
    Mat rows(static_cast<Eigen::Index>(memory_batch.size()), model.config().d_model);
    for (size_t i = 0; i < memory_batch.size(); ++i)
      rows.row(static_cast<Eigen::Index>(i)) =
          model.fuse(memory_batch[i].features).video + lambda * high_noise.row(static_cast<Eigen::Index>(i));
    video_rows = ad::constant(rows);
  }
  return LossTerm::of(ad::cross_entropy_mean(model.classify_g(bp, video_rows), labels));
}

/// Total augmentation loss: the sum of the two routed terms.
inline LossTerm loss_ham(const FusionClassifier& model, const BoundParams& fusion_bp,
                         const BoundParams& classifier_bp, std::span<const Example> memory_batch,
                         double lambda, const StepNoise& noise, bool routing = true) {
  LossTerm low = loss_lsm(model, fusion_bp, memory_batch, lambda, noise.low);
  LossTerm high = loss_hsm(model, classifier_bp, memory_batch, lambda, noise.high, !routing);
  if (low.skipped && high.skipped) return LossTerm::skip();
  if (low.skipped) return high;
  if (high.skipped) return low;
  return LossTerm::of(ad::add(low.node, high.node));
}

}  // namespace had
