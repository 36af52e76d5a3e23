#pragma once

// Incremental protocol engine: task schedule, exemplar memory bank, batch
// composition, the per-phase optimization loop with the combined objective,
// and the phase-by-phase run driver with its on-disk artifacts.

#include <algorithm>
#include <numeric>

#include "had/config.hpp"
#include "had/hdm.hpp"
#include "had/metrics.hpp"

namespace had {

// ---------------------------------------------------------------------------
// Task schedule
// ---------------------------------------------------------------------------

struct TaskSchedule {
  int num_classes_total = 0;
  int base_classes = 0;
  int num_increments = 0;
  int classes_per_increment = 0;

  int num_phases() const { return 1 + num_increments; }

  int classes_in_phase(int phase) const {  // 1-based
    return phase == 1 ? base_classes : classes_per_increment;
  }
  int classes_seen_after(int phase) const {
    return base_classes + (phase - 1) * classes_per_increment;
  }

  void validate() const {
    if (num_classes_total < 1 || base_classes < 1 || num_increments < 0)
      fail("config", "schedule requires positive class counts");
    if (num_increments > 0 && classes_per_increment < 1)
      fail("config", "classes_per_increment must be >= 1");
    if (base_classes + num_increments * classes_per_increment != num_classes_total)
      fail("config", "schedule mismatch: base + increments x per_increment != total classes");
  }
};

struct ScheduleWithMemory {
  TaskSchedule schedule;
  int memory_size = 0;
};

/// Resolve a preset name or explicit fields into a validated schedule.
inline ScheduleWithMemory build_schedule(const ScheduleConfig& cfg) {
  ScheduleConfig resolved = cfg;
  if (!cfg.preset.empty()) {
    RunConfig tmp;
    apply_preset(tmp, cfg.preset);
    resolved = tmp.schedule;
  }
  ScheduleWithMemory out;
  out.schedule.num_classes_total = resolved.num_classes;
  out.schedule.base_classes = resolved.base_classes;
  out.schedule.num_increments = resolved.num_increments;
  out.schedule.classes_per_increment = resolved.classes_per_increment;
  out.memory_size = resolved.memory_size;
  out.schedule.validate();
  if (out.memory_size < 0) fail("config", "memory_size must be >= 0");
  return out;
}

// ---------------------------------------------------------------------------
// Memory bank
// ---------------------------------------------------------------------------

struct TrainItem {
  std::string id;
  ModalFeatures features;
  int slot = 0;  // classifier slot of the class within this run
};

class MemoryBank {
public:
  explicit MemoryBank(int capacity) : capacity_(capacity) {}

  int capacity() const { return capacity_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<TrainItem>& entries() const { return entries_; }

  std::map<int, int> per_class_counts() const {
    std::map<int, int> counts;
    for (const auto& e : entries_) counts[e.slot]++;
    return counts;
  }

  friend void update_memory(MemoryBank& bank, std::span<const TrainItem> new_task_samples,
                            Rng& rng);

private:
  int capacity_;
  std::vector<TrainItem> entries_;
};

/// Rebalance the bank after a task: capacity is split as evenly as possible
/// over all classes seen so far (remainder to the lowest slots), over-quota
/// classes are trimmed by uniform random eviction, new classes are filled by
/// uniform sampling without replacement, and quota a class cannot absorb is
/// handed round-robin to classes that still have samples available.
inline void update_memory(MemoryBank& bank, std::span<const TrainItem> new_task_samples,
                          Rng& rng) {
  std::map<int, std::vector<TrainItem>> available;
  for (const auto& e : bank.entries_) available[e.slot].push_back(e);
  for (const auto& s : new_task_samples) available[s.slot].push_back(s);
  if (available.empty() || bank.capacity_ == 0) {
    bank.entries_.clear();
    return;
  }

  int n_classes = static_cast<int>(available.size());
  int quota = bank.capacity_ / n_classes;
  int remainder = bank.capacity_ % n_classes;

  std::map<int, int> target;
  int idx = 0;
  for (const auto& [slot, pool] : available) {
    int want = quota + (idx < remainder ? 1 : 0);
    target[slot] = std::min<int>(want, static_cast<int>(pool.size()));
    ++idx;
  }
  int slack = bank.capacity_;
  for (const auto& [slot, t] : target) slack -= t;
  while (slack > 0) {
    bool progressed = false;
    for (auto& [slot, t] : target) {
      if (slack == 0) break;
      if (t < static_cast<int>(available[slot].size())) {
        ++t;
        --slack;
        progressed = true;
      }
    }
    if (!progressed) break;  // fewer samples exist than capacity
  }

  std::vector<TrainItem> rebuilt;
  rebuilt.reserve(static_cast<size_t>(bank.capacity_));
  for (auto& [slot, pool] : available) {
    rng.shuffle(pool);
    for (int i = 0; i < target[slot]; ++i) rebuilt.push_back(std::move(pool[static_cast<size_t>(i)]));
  }
  bank.entries_ = std::move(rebuilt);
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

struct StepBatch {
  std::vector<Example> current;
  std::vector<Example> memory;  // half old exemplars, half current samples
};

/// One epoch of batches: every current sample appears exactly once (seeded
/// shuffle, last batch may be short); each step also carries an exemplar
/// batch of batch_size when the bank is non-empty.
inline std::vector<StepBatch> build_batches(std::span<const TrainItem> task_data,
                                            const MemoryBank& bank, int batch_size, Rng& rng) {
  if (task_data.empty()) fail("validation", "build_batches requires task data");
  if (batch_size < 1) fail("config", "batch_size must be >= 1");
  std::vector<size_t> order(task_data.size());
  std::iota(order.begin(), order.end(), 0u);
  rng.shuffle(order);

  auto draw_indices = [&rng](size_t pool, size_t want) {
    std::vector<size_t> out;
    out.reserve(want);
    if (pool >= want) {  // without replacement
      std::vector<size_t> idx(pool);
      std::iota(idx.begin(), idx.end(), 0u);
      rng.shuffle(idx);
      out.assign(idx.begin(), idx.begin() + static_cast<long>(want));
    } else {
      for (size_t i = 0; i < want; ++i) out.push_back(rng.index(pool));
    }
    return out;
  };

  std::vector<StepBatch> steps;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    StepBatch step;
    size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
    for (size_t i = start; i < end; ++i) {
      const TrainItem& item = task_data[order[i]];
      step.current.push_back({item.features, item.slot});
    }
    if (!bank.empty()) {
      size_t half_old = static_cast<size_t>(batch_size) / 2;
      size_t half_cur = static_cast<size_t>(batch_size) - half_old;
      for (size_t i : draw_indices(bank.size(), half_old)) {
        const TrainItem& item = bank.entries()[i];
        step.memory.push_back({item.features, item.slot});
      }
      for (size_t i : draw_indices(task_data.size(), half_cur)) {
        const TrainItem& item = task_data[i];
        step.memory.push_back({item.features, item.slot});
      }
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Adam {
public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore& params, const std::vector<Mat>& grads) {
    if (state_.empty()) {
      state_.resize(static_cast<size_t>(params.size()));
      for (int i = 0; i < params.size(); ++i) {
        state_[static_cast<size_t>(i)].m = Mat::Zero(params[i].value.rows(), params[i].value.cols());
        state_[static_cast<size_t>(i)].v = Mat::Zero(params[i].value.rows(), params[i].value.cols());
      }
    }
    ++t_;
    double correction =
        std::sqrt(1.0 - std::pow(beta2_, t_)) / (1.0 - std::pow(beta1_, t_));
    for (int i = 0; i < params.size(); ++i) {
      State& s = state_[static_cast<size_t>(i)];
      const Mat& g = grads[static_cast<size_t>(i)];
      s.m = beta1_ * s.m + (1.0 - beta1_) * g;
      s.v = beta2_ * s.v + (1.0 - beta2_) * g.cwiseProduct(g);
      params[i].value -=
          (lr_ * correction) * s.m.cwiseQuotient((s.v.cwiseSqrt().array() + eps_).matrix());
    }
  }

private:
  struct State {
    Mat m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<State> state_;
};

// ---------------------------------------------------------------------------
// Loss breakdown and the combined objective
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double cls = 0, lsm = 0, hsm = 0, sl = 0, dl = 0;
  double ss_a = 0, ns_a = 0, ss_v = 0, ns_v = 0;
  double total = 0;
  std::vector<std::string> skipped;

  json to_json() const {
    return json{{"cls", cls},   {"lsm", lsm},   {"hsm", hsm},   {"sl", sl},
                {"dl", dl},     {"ss_a", ss_a}, {"ns_a", ns_a}, {"ss_v", ss_v},
                {"ns_v", ns_v}, {"total", total}, {"skipped", skipped}};
  }
};

inline LossBreakdown mean_breakdown(std::span<const LossBreakdown> steps) {
  LossBreakdown mean;
  std::set<std::string> skipped;
  for (const auto& s : steps) {
    mean.cls += s.cls;
    mean.lsm += s.lsm;
    mean.hsm += s.hsm;
    mean.sl += s.sl;
    mean.dl += s.dl;
    mean.ss_a += s.ss_a;
    mean.ns_a += s.ns_a;
    mean.ss_v += s.ss_v;
    mean.ns_v += s.ns_v;
    mean.total += s.total;
    skipped.insert(s.skipped.begin(), s.skipped.end());
  }
  double n = static_cast<double>(steps.size());
  if (n > 0) {
    mean.cls /= n;
    mean.lsm /= n;
    mean.hsm /= n;
    mean.sl /= n;
    mean.dl /= n;
    mean.ss_a /= n;
    mean.ns_a /= n;
    mean.ss_v /= n;
    mean.ns_v /= n;
    mean.total /= n;
  }
  mean.skipped.assign(skipped.begin(), skipped.end());
  return mean;
}

struct PhaseResult {
  std::vector<LossBreakdown> steps;
};

namespace detail {

inline std::vector<ModalFeatures> features_of(std::span<const Example> batch) {
  std::vector<ModalFeatures> out;
  out.reserve(batch.size());
  for (const auto& e : batch) out.push_back(e.features);
  return out;
}

inline void check_finite(double v, const char* term, int step) {
  if (!std::isfinite(v))
    fail("nan-loss", std::string("non-finite loss term '") + term + "' at step " +
                         std::to_string(step));
}

}  // namespace detail

/// One optimization step of the combined objective
///   total = cls + beta (lsm + hsm) + gamma (sl + dl) + eta (ss_a + ns_a + ss_v + ns_v)
/// with routing-aware bindings. Returns the breakdown; `grads` (parallel to
/// the parameter store) receives the accumulated gradient.
inline LossBreakdown objective_step(FusionClassifier& model, const StepBatch& batch,
                                    const ModelSnapshot* snapshot, const RunConfig& cfg,
                                    Rng& rng, std::vector<Mat>* grads, int step_index = 0) {
  LossBreakdown out;
  std::span<const Example> mem = batch.memory;
  std::span<const Example> cur = batch.current;

  BoundParams full = model.bind({true, true});
  bool routed = cfg.ham.routing;
  BoundParams fusion_bp = routed ? model.bind({true, false}) : full;
  BoundParams classifier_bp = routed ? model.bind({false, true}) : full;

  StepNoise noise;
  if (!mem.empty()) noise = draw_step_noise(model.config(), mem.size(), rng);

  std::vector<int> cur_labels;
  for (const auto& e : cur) cur_labels.push_back(e.slot);
  LossTerm cls =
      LossTerm::of(ad::cross_entropy_mean(model.batch_logits_g(full, detail::features_of(cur)),
                                          cur_labels));

  auto skip = [&out](const char* name) { out.skipped.push_back(name); };

  LossTerm lsm = LossTerm::skip(), hsm = LossTerm::skip();
  if (cfg.ham.enabled && cfg.ham.low_level && !mem.empty())
    lsm = loss_lsm(model, fusion_bp, mem, cfg.lambda, noise.low);
  if (lsm.skipped) skip("lsm");
  if (cfg.ham.enabled && cfg.ham.high_level && !mem.empty())
    hsm = loss_hsm(model, classifier_bp, mem, cfg.lambda, noise.high, /*fusion_in_graph=*/!routed);
  if (hsm.skipped) skip("hsm");

  LossTerm sl = LossTerm::skip(), dl = LossTerm::skip();
  HcdTerms hcd;
  hcd.ss_a = hcd.ns_a = hcd.ss_v = hcd.ns_v = LossTerm::skip();
  if (snapshot != nullptr) {
    auto mem_f = detail::features_of(mem);
    auto cur_f = detail::features_of(cur);
    if (cfg.hld.enabled && cfg.hld.sld) sl = loss_sl(model, full, *snapshot, mem_f, cur_f);
    if (cfg.hld.enabled && cfg.hld.dld) {
      int draws = cfg.hld.n_draws > 0 ? cfg.hld.n_draws : cfg.optim.batch_size;
      dl = loss_dl_sampled(model, full, *snapshot, mem_f, cur_f, draws, rng);
    }
    if (cfg.hcd.enabled)
      hcd = loss_hcd(model, full, *snapshot, mem, cur, cfg.lambda, noise.low,
                     {cfg.hcd.scd, cfg.hcd.vcd});
  }
  if (sl.skipped) skip("sl");
  if (dl.skipped) skip("dl");
  if (hcd.ss_a.skipped) skip("ss_a");
  if (hcd.ns_a.skipped) skip("ns_a");
  if (hcd.ss_v.skipped) skip("ss_v");
  if (hcd.ns_v.skipped) skip("ns_v");

  ad::Var total = cls.node;
  auto add_weighted = [&total](const LossTerm& term, double weight) {
    if (term.skipped || weight == 0.0) return;
    total = ad::add(total, ad::scale(term.node, weight));
  };
  add_weighted(lsm, cfg.beta);
  add_weighted(hsm, cfg.beta);
  add_weighted(sl, cfg.gamma);
  add_weighted(dl, cfg.gamma);
  add_weighted(hcd.ss_a, cfg.eta);
  add_weighted(hcd.ns_a, cfg.eta);
  add_weighted(hcd.ss_v, cfg.eta);
  add_weighted(hcd.ns_v, cfg.eta);

  out.cls = cls.value;
  out.lsm = lsm.value;
  out.hsm = hsm.value;
  out.sl = sl.value;
  out.dl = dl.value;
  out.ss_a = hcd.ss_a.value;
  out.ns_a = hcd.ns_a.value;
  out.ss_v = hcd.ss_v.value;
  out.ns_v = hcd.ns_v.value;
  out.total = total->val(0, 0);
  detail::check_finite(out.cls, "cls", step_index);
  detail::check_finite(out.lsm, "lsm", step_index);
  detail::check_finite(out.hsm, "hsm", step_index);
  detail::check_finite(out.sl, "sl", step_index);
  detail::check_finite(out.dl, "dl", step_index);
  detail::check_finite(out.ss_a, "ss_a", step_index);
  detail::check_finite(out.ns_a, "ns_a", step_index);
  detail::check_finite(out.ss_v, "ss_v", step_index);
  detail::check_finite(out.ns_v, "ns_v", step_index);
  detail::check_finite(out.total, "total", step_index);

  if (grads != nullptr) {
    ad::backward(total);
    grads->clear();
    grads->reserve(static_cast<size_t>(model.params().size()));
    for (int i = 0; i < model.params().size(); ++i) {
      Mat g = full.grad_of(i);
      if (routed) {
        g += fusion_bp.grad_of(i);
        g += classifier_bp.grad_of(i);
      }
      grads->push_back(std::move(g));
    }
  }
  return out;
}

/// Run the configured epochs of Adam over one phase.
inline PhaseResult train_phase(FusionClassifier& model, std::span<const TrainItem> phase_data,
                               const MemoryBank& bank, const ModelSnapshot* snapshot,
                               const RunConfig& cfg, Rng rng) {
  PhaseResult result;
  Adam adam(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
  std::vector<Mat> grads;
  int step_index = 0;
  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    auto steps = build_batches(phase_data, bank, cfg.optim.batch_size, rng);
    for (const StepBatch& batch : steps) {
      LossBreakdown breakdown =
          objective_step(model, batch, snapshot, cfg, rng, &grads, step_index);
      adam.step(model.params(), grads);
      result.steps.push_back(std::move(breakdown));
      ++step_index;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation and the full incremental run
// ---------------------------------------------------------------------------

inline double evaluate_accuracy(const FusionClassifier& model,
                                std::span<const TrainItem> test_items) {
  if (test_items.empty()) fail("validation", "no samples");
  BoundParams bp = model.bind({false, false});
  std::vector<int> predictions, labels;
  predictions.reserve(test_items.size());
  for (const auto& item : test_items) {
    RowVec logits = model.classify_g(bp, model.fuse_g(bp, item.features).video)->val.row(0);
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    predictions.push_back(static_cast<int>(arg));
    labels.push_back(item.slot);
  }
  return incremental_accuracy(predictions, labels);
}

struct RunResult {
  RunMetrics metrics;
  fs::path run_dir;
  std::string fingerprint;
};

/// Seeded class permutation: slot_of_class[label] is the classifier slot the
/// class occupies for a run with this seed.
inline std::vector<int> class_slot_mapping(int num_classes, uint64_t seed) {
  std::vector<int> order(static_cast<size_t>(num_classes));
  std::iota(order.begin(), order.end(), 0);
  Rng class_rng = Rng(seed).fork("classes");
  class_rng.shuffle(order);
  std::vector<int> slot_of_class(order.size());
  for (size_t i = 0; i < order.size(); ++i)
    slot_of_class[static_cast<size_t>(order[i])] = static_cast<int>(i);
  return slot_of_class;
}

/// Full phase loop: expand, snapshot, train, evaluate on all seen classes,
/// rebalance the memory bank, and persist artifacts
/// (config.json, phase_<t>/checkpoint, metrics.jsonl, summary.json).
inline RunResult run_incremental(const fs::path& dataset_dir, RunConfig cfg,
                                 const fs::path& run_dir) {
  cfg.validate();
  cfg.dataset = dataset_dir.string();
  ScheduleWithMemory sched = build_schedule(cfg.schedule);
  const TaskSchedule& schedule = sched.schedule;

  DatasetReader reader(dataset_dir);
  const DatasetManifest& manifest = reader.manifest();
  if (manifest.num_classes != schedule.num_classes_total)
    fail("config", "schedule expects " + std::to_string(schedule.num_classes_total) +
                       " classes but the dataset has " + std::to_string(manifest.num_classes));

  Rng root(cfg.seed);
  std::vector<int> slot_of_class = class_slot_mapping(manifest.num_classes, cfg.seed);

  auto samples = reader.load_all();
  std::vector<TrainItem> train_items;
  std::vector<TrainItem> test_items;
  for (auto& s : samples) {
    TrainItem item{s.id, std::move(s.features), slot_of_class[static_cast<size_t>(s.label)]};
    if (s.split == Split::train) train_items.push_back(std::move(item));
    else if (s.split == Split::test) test_items.push_back(std::move(item));
  }

  FusionConfig mcfg;
  mcfg.d_model = cfg.model.d_model;
  mcfg.num_heads = cfg.model.num_heads;
  mcfg.snippets = manifest.snippets_per_video;
  mcfg.audio_dim = manifest.audio_dim;
  mcfg.visual_dim = manifest.visual_dim;
  mcfg.positional = cfg.model.positional;
  Rng init_rng = root.fork("init");
  FusionClassifier model(mcfg, head_from_string(cfg.model.head), init_rng);

  std::error_code ec;
  fs::create_directories(run_dir, ec);
  json cfg_json = config_to_json(cfg);
  std::string fingerprint = config_fingerprint(cfg_json);
  cfg_json["fingerprint"] = fingerprint;
  write_file_bytes((run_dir / "config.json").string(), cfg_json.dump(2) + "\n");
  fs::remove(run_dir / "metrics.jsonl");

  MemoryBank bank(sched.memory_size);
  std::vector<double> ia;
  std::optional<ModelSnapshot> snapshot;

  std::ofstream metrics_out(run_dir / "metrics.jsonl", std::ios::app);
  for (int phase = 1; phase <= schedule.num_phases(); ++phase) {
    int first_slot = phase == 1 ? 0 : schedule.classes_seen_after(phase - 1);
    int seen = schedule.classes_seen_after(phase);

    if (phase > 1) snapshot.emplace(model.snapshot());
    Rng expand_rng = root.fork("expand", static_cast<uint64_t>(phase));
    model.expand_classes(schedule.classes_in_phase(phase), expand_rng);

    std::vector<TrainItem> phase_train;
    for (const auto& item : train_items)
      if (item.slot >= first_slot && item.slot < seen) phase_train.push_back(item);
    if (phase_train.empty()) fail("validation", "phase " + std::to_string(phase) + " has no train data");

    PhaseResult phase_result =
        train_phase(model, phase_train, bank, snapshot ? &*snapshot : nullptr, cfg,
                    root.fork("phase", static_cast<uint64_t>(phase)));

    model.quantize_parameters();

    std::vector<TrainItem> seen_test;
    for (const auto& item : test_items)
      if (item.slot < seen) seen_test.push_back(item);
    double accuracy = evaluate_accuracy(model, seen_test);
    ia.push_back(accuracy);

    Rng memory_rng = root.fork("memory", static_cast<uint64_t>(phase));
    update_memory(bank, phase_train, memory_rng);

    save_checkpoint(model, run_dir / ("phase_" + std::to_string(phase)) / "checkpoint");
    json record = {{"phase", phase},
                   {"ia", accuracy},
                   {"classes_seen", seen},
                   {"loss", mean_breakdown(phase_result.steps).to_json()}};
    metrics_out << record.dump() << "\n";
    metrics_out.flush();
  }

  RunResult result;
  result.metrics = aggregate(ia);
  result.run_dir = run_dir;
  result.fingerprint = fingerprint;
  json summary = {{"aia", result.metrics.aia},
                  {"fia", result.metrics.fia},
                  {"seed", cfg.seed},
                  {"schedule",
                   {{"preset", cfg.schedule.preset},
                    {"num_classes", schedule.num_classes_total},
                    {"base_classes", schedule.base_classes},
                    {"num_increments", schedule.num_increments},
                    {"classes_per_increment", schedule.classes_per_increment},
                    {"memory_size", sched.memory_size}}},
                  {"fingerprint", fingerprint},
                  {"ia", result.metrics.ia}};
  write_file_bytes((run_dir / "summary.json").string(), summary.dump(2) + "\n");
  return result;
}

}  // namespace had
