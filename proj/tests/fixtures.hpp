#pragma once

// Shared fixtures for the loss-module tests: tiny models, random batches and
// a finite-difference harness that compares analytic gradients against the
// oracle for a chosen parameter partition.

#include <functional>
#include <vector>

#include "had/hdm.hpp"
#include "oracle/oracle.hpp"

namespace fixtures {

using namespace had;

inline FusionConfig tiny_config(bool positional = false, int snippets = 3) {
  FusionConfig cfg;
  cfg.d_model = 8;
  cfg.num_heads = 2;
  cfg.snippets = snippets;
  cfg.audio_dim = 4;
  cfg.visual_dim = 5;
  cfg.positional = positional;
  return cfg;
}

inline FusionClassifier tiny_model(HeadKind head, uint64_t seed, int num_classes,
                                   bool positional = false, int snippets = 3) {
  Rng rng(seed);
  FusionClassifier m(tiny_config(positional, snippets), head, rng);
  m.expand_classes(num_classes, rng);
  return m;
}

inline std::vector<Example> random_examples(const FusionConfig& cfg, int n, int num_slots,
                                            Rng& rng) {
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    Example e;
    e.features.audio = rng.normal_matrix(cfg.snippets, cfg.audio_dim);
    e.features.visual = rng.normal_matrix(cfg.snippets, cfg.visual_dim);
    e.slot = static_cast<int>(rng.index(static_cast<uint64_t>(num_slots)));
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<ModalFeatures> features_of(const std::vector<Example>& batch) {
  std::vector<ModalFeatures> out;
  out.reserve(batch.size());
  for (const auto& e : batch) out.push_back(e.features);
  return out;
}

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_analytic = 0.0;
  long checked = 0;
};

/// Compare analytic gradients (read from `bound` after the caller ran
/// backward) against central differences of `eval` for every parameter in
/// the given partition. Gradients below `floor` on both sides are compared
/// absolutely.
inline FdReport fd_compare(FusionClassifier& model, const BoundParams& bound, Partition part,
                           const std::function<double()>& eval, double step = 1e-4,
                           double floor = 1e-5) {
  FdReport report;
  for (int i = 0; i < model.params().size(); ++i) {
    if (model.params()[i].part != part) continue;
    Mat& value = model.params()[i].value;
    std::vector<double*> ptrs;
    for (Eigen::Index r = 0; r < value.rows(); ++r)
      for (Eigen::Index c = 0; c < value.cols(); ++c) ptrs.push_back(&value(r, c));
    std::vector<double> fd = oracle::fd_gradient(eval, ptrs, step);
    Mat analytic = bound.grad_of(i);
    size_t k = 0;
    for (Eigen::Index r = 0; r < value.rows(); ++r)
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        double a = analytic(r, c), b = fd[k++];
        report.max_abs_analytic = std::max(report.max_abs_analytic, std::abs(a));
        double denom = std::max(std::abs(a), std::abs(b));
        double err = denom < floor ? std::abs(a - b) : std::abs(a - b) / denom;
        report.max_rel_err = std::max(report.max_rel_err, err);
        ++report.checked;
      }
  }
  return report;
}

/// Max absolute analytic gradient over one partition.
inline double max_abs_grad(const FusionClassifier& model, const BoundParams& bound,
                           Partition part) {
  double mx = 0.0;
  for (int i = 0; i < model.params().size(); ++i) {
    if (model.params()[i].part != part) continue;
    mx = std::max(mx, bound.grad_of(i).cwiseAbs().maxCoeff());
  }
  return mx;
}

}  // namespace fixtures
