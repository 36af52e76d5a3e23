#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "fixtures.hpp"
#include "had/trainer.hpp"
#include "test_util.hpp"

using namespace had;
using testutil::TempDir;

namespace {

std::vector<TrainItem> class_samples(int slot, int count, const FusionConfig& cfg, Rng& rng,
                                     const std::string& prefix) {
  std::vector<TrainItem> out;
  for (int i = 0; i < count; ++i) {
    TrainItem item;
    item.id = prefix + "_" + std::to_string(slot) + "_" + std::to_string(i);
    item.slot = slot;
    item.features.audio = rng.normal_matrix(cfg.snippets, cfg.audio_dim);
    item.features.visual = rng.normal_matrix(cfg.snippets, cfg.visual_dim);
    out.push_back(std::move(item));
  }
  return out;
}

std::filesystem::path write_tiny_dataset(const TempDir& tmp, int classes, uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.train_per_class = 6;
  spec.valid_per_class = 1;
  spec.test_per_class = 3;
  spec.snippets = 2;
  spec.audio_dim = 4;
  spec.visual_dim = 5;
  spec.seed = seed;
  auto [manifest, samples] = generate_synthetic(spec);
  write_dataset(manifest, samples, tmp / "data");
  return tmp / "data";
}

RunConfig tiny_run_config(int classes, int base, int increments, int per, int memory) {
  RunConfig cfg;
  cfg.schedule.num_classes = classes;
  cfg.schedule.base_classes = base;
  cfg.schedule.num_increments = increments;
  cfg.schedule.classes_per_increment = per;
  cfg.schedule.memory_size = memory;
  cfg.model.d_model = 8;
  cfg.model.num_heads = 2;
  cfg.optim.epochs = 2;
  cfg.optim.batch_size = 4;
  cfg.optim.lr = 1e-3;
  cfg.hld.n_draws = 2;
  return cfg;
}

}  // namespace

TEST_CASE("schedule presets reproduce the benchmark protocol table") {
  struct Row {
    const char* preset;
    int total, base, increments, per, memory;
  };
  const Row rows[] = {
      {"ave-3", 28, 10, 3, 6, 140},        {"ave-6", 28, 10, 6, 3, 140},
      {"avk100-5", 100, 50, 5, 10, 1000},  {"avk100-10", 100, 50, 10, 5, 1000},
      {"avk200-10", 200, 100, 10, 10, 2000}, {"avk200-20", 200, 100, 20, 5, 2000},
      {"avk400-20", 400, 200, 20, 10, 4000}, {"avk400-40", 400, 200, 40, 5, 4000},
      {"syn20-4", 20, 8, 3, 4, 40},
  };
  for (const Row& r : rows) {
    ScheduleConfig sc;
    sc.preset = r.preset;
    ScheduleWithMemory s = build_schedule(sc);
    INFO(r.preset);
    REQUIRE(s.schedule.num_classes_total == r.total);
    REQUIRE(s.schedule.base_classes == r.base);
    REQUIRE(s.schedule.num_increments == r.increments);
    REQUIRE(s.schedule.classes_per_increment == r.per);
    REQUIRE(s.memory_size == r.memory);
  }
}

TEST_CASE("explicit schedules validate the class arithmetic") {
  ScheduleConfig ok;
  ok.num_classes = 20;
  ok.base_classes = 8;
  ok.num_increments = 3;
  ok.classes_per_increment = 4;
  ok.memory_size = 40;
  REQUIRE(build_schedule(ok).schedule.num_phases() == 4);

  ScheduleConfig bad = ok;
  bad.classes_per_increment = 5;
  REQUIRE_THROWS_WITH(build_schedule(bad), Catch::Matchers::ContainsSubstring("schedule mismatch"));
}

TEST_CASE("memory quotas split capacity evenly with remainder to low slots") {
  FusionConfig cfg = fixtures::tiny_config();
  Rng rng(1);

  MemoryBank bank(140);
  std::vector<TrainItem> task;
  for (int c = 0; c < 10; ++c)
    for (auto& s : class_samples(c, 20, cfg, rng, "t1")) task.push_back(std::move(s));
  Rng urng(2);
  update_memory(bank, task, urng);
  REQUIRE(bank.size() == 140);
  for (const auto& [slot, count] : bank.per_class_counts()) REQUIRE(count == 14);

  MemoryBank small(10);
  std::vector<TrainItem> three;
  for (int c = 0; c < 3; ++c)
    for (auto& s : class_samples(c, 8, cfg, rng, "t2")) three.push_back(std::move(s));
  Rng urng2(3);
  update_memory(small, three, urng2);
  auto counts = small.per_class_counts();
  REQUIRE(counts[0] == 4);
  REQUIRE(counts[1] == 3);
  REQUIRE(counts[2] == 3);
}

TEST_CASE("memory rebalance shrinks old classes and absorbs short classes") {
  FusionConfig cfg = fixtures::tiny_config();
  Rng rng(5);
  MemoryBank bank(12);

  std::vector<TrainItem> task1;
  for (int c = 0; c < 2; ++c)
    for (auto& s : class_samples(c, 10, cfg, rng, "p1")) task1.push_back(std::move(s));
  Rng u1(6);
  update_memory(bank, task1, u1);
  REQUIRE(bank.size() == 12);
  REQUIRE(bank.per_class_counts()[0] == 6);

  // second task introduces two classes, one with fewer samples than quota
  std::vector<TrainItem> task2;
  for (auto& s : class_samples(2, 10, cfg, rng, "p2")) task2.push_back(std::move(s));
  for (auto& s : class_samples(3, 1, cfg, rng, "p2")) task2.push_back(std::move(s));
  Rng u2(7);
  update_memory(bank, task2, u2);
  REQUIRE(bank.size() == 12);
  auto counts = bank.per_class_counts();
  REQUIRE(counts[3] == 1);                              // keep all it has
  REQUIRE(counts[0] + counts[1] + counts[2] == 11);     // slack redistributed
  for (int c = 0; c < 3; ++c) REQUIRE(counts[c] >= 3);
}

TEST_CASE("memory retention keeps subsets without duplicates over random trials") {
  FusionConfig cfg = fixtures::tiny_config();
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    Rng trial_rng(static_cast<uint64_t>(trial) + 100);
    MemoryBank bank(7 + trial % 9);
    std::set<std::string> all_ids;
    for (int phase = 0; phase < 3; ++phase) {
      std::vector<TrainItem> task;
      int classes = 1 + static_cast<int>(trial_rng.index(3));
      for (int c = 0; c < classes; ++c) {
        int slot = phase * 3 + c;
        for (auto& s :
             class_samples(slot, 1 + static_cast<int>(trial_rng.index(6)), cfg, rng,
                           "tr" + std::to_string(trial) + "p" + std::to_string(phase)))
          task.push_back(std::move(s));
      }
      for (const auto& item : task) all_ids.insert(item.id);
      update_memory(bank, task, trial_rng);
      REQUIRE(bank.size() <= static_cast<size_t>(bank.capacity()));
      std::set<std::string> seen;
      for (const auto& e : bank.entries()) {
        REQUIRE(all_ids.count(e.id) == 1);
        REQUIRE(seen.insert(e.id).second);  // no duplicates
      }
    }
  }
}

TEST_CASE("batch composition: empty bank, half-and-half, epoch coverage") {
  FusionConfig cfg = fixtures::tiny_config();
  Rng rng(11);
  auto task = class_samples(0, 10, cfg, rng, "cur");
  for (auto& s : class_samples(1, 9, cfg, rng, "cur2")) task.push_back(std::move(s));

  MemoryBank empty_bank(20);
  Rng b1(12);
  auto steps = build_batches(task, empty_bank, 16, b1);
  REQUIRE(steps.size() == 2);
  for (const auto& s : steps) REQUIRE(s.memory.empty());

  MemoryBank bank(20);
  std::vector<TrainItem> old;
  for (int c = 10; c < 12; ++c)
    for (auto& s : class_samples(c, 10, cfg, rng, "old")) old.push_back(std::move(s));
  Rng u(13);
  update_memory(bank, old, u);
  REQUIRE(bank.size() == 20);

  Rng b2(14);
  auto mixed = build_batches(task, bank, 16, b2);
  for (const auto& s : mixed) {
    REQUIRE(s.memory.size() == 16);
    int old_count = 0, cur_count = 0;
    for (const auto& e : s.memory) (e.slot >= 10 ? old_count : cur_count)++;
    REQUIRE(old_count == 8);
    REQUIRE(cur_count == 8);
  }

  // every current sample appears exactly once per epoch
  size_t total = 0;
  for (const auto& s : mixed) total += s.current.size();
  REQUIRE(total == task.size());
}

TEST_CASE("phase-1 objective reduces to the classification loss") {
  auto model = fixtures::tiny_model(HeadKind::cosine, 71, 3);
  Rng rng(72);
  StepBatch batch;
  for (auto& e : fixtures::random_examples(model.config(), 4, 3, rng)) batch.current.push_back(e);

  RunConfig cfg;
  Rng step_rng(73);
  LossBreakdown b = objective_step(model, batch, nullptr, cfg, step_rng, nullptr);
  REQUIRE(b.total == b.cls);
  std::set<std::string> skipped(b.skipped.begin(), b.skipped.end());
  for (const char* t : {"lsm", "hsm", "sl", "dl", "ss_a", "ns_a", "ss_v", "ns_v"})
    REQUIRE(skipped.count(t) == 1);
}

TEST_CASE("zero trade-off weights leave only the classification term") {
  auto model = fixtures::tiny_model(HeadKind::cosine, 75, 4);
  ModelSnapshot snap = model.snapshot();
  Rng rng(76);
  model.expand_classes(1, rng);
  StepBatch batch;
  for (auto& e : fixtures::random_examples(model.config(), 3, 5, rng)) batch.current.push_back(e);
  for (auto& e : fixtures::random_examples(model.config(), 3, 4, rng)) batch.memory.push_back(e);

  RunConfig cfg;
  cfg.beta = cfg.gamma = cfg.eta = 0.0;
  Rng step_rng(77);
  LossBreakdown b = objective_step(model, batch, &snap, cfg, step_rng, nullptr);
  REQUIRE(b.total == b.cls);
  REQUIRE(b.lsm > 0.0);  // term computed, weight zero
}

TEST_CASE("loss breakdown satisfies the weighted-total identity at every step") {
  auto model = fixtures::tiny_model(HeadKind::cosine, 79, 3);
  ModelSnapshot snap = model.snapshot();
  Rng rng(80);
  model.expand_classes(2, rng);

  auto phase_data = class_samples(3, 6, model.config(), rng, "cur");
  for (auto& s : class_samples(4, 6, model.config(), rng, "cur")) phase_data.push_back(std::move(s));
  MemoryBank bank(9);
  std::vector<TrainItem> old;
  for (int c = 0; c < 3; ++c)
    for (auto& s : class_samples(c, 4, model.config(), rng, "old")) old.push_back(std::move(s));
  Rng u(81);
  update_memory(bank, old, u);

  RunConfig cfg;
  cfg.optim.epochs = 1;
  cfg.optim.batch_size = 4;
  cfg.optim.lr = 1e-3;
  cfg.hld.n_draws = 2;
  PhaseResult result = train_phase(model, phase_data, bank, &snap, cfg, Rng(82));
  REQUIRE(result.steps.size() == 3);
  for (const auto& b : result.steps) {
    double expected = b.cls + cfg.beta * (b.lsm + b.hsm) + cfg.gamma * (b.sl + b.dl) +
                      cfg.eta * (b.ss_a + b.ns_a + b.ss_v + b.ns_v);
    REQUIRE(std::abs(b.total - expected) < 1e-6);
    REQUIRE(b.skipped.empty());
  }
}

TEST_CASE("a single optimization step decreases the objective on its batch") {
  // unit trade-off weights: with the full eta=25 weighting Adam's
  // magnitude-normalized first step can overshoot the sharply curved
  // similarity terms
  for (uint64_t seed : {83, 101, 202, 303, 404}) {
    auto model = fixtures::tiny_model(HeadKind::cosine, seed, 3);
    ModelSnapshot snap = model.snapshot();
    Rng rng(seed + 1);
    model.expand_classes(1, rng);
    for (int i = 0; i < model.params().size(); ++i)
      model.params()[i].value += rng.normal_matrix(model.params()[i].value.rows(),
                                                   model.params()[i].value.cols(), 0.15);
    StepBatch batch;
    for (auto& e : fixtures::random_examples(model.config(), 4, 4, rng)) batch.current.push_back(e);
    for (auto& e : fixtures::random_examples(model.config(), 4, 3, rng)) batch.memory.push_back(e);

    RunConfig cfg;
    cfg.beta = cfg.gamma = cfg.eta = 1.0;
    cfg.hld.n_draws = 2;
    std::vector<Mat> grads;
    Rng before_rng(seed + 2);
    LossBreakdown before = objective_step(model, batch, &snap, cfg, before_rng, &grads);
    Adam adam(1e-2, 0.9, 0.999, 1e-8);
    adam.step(model.params(), grads);
    Rng after_rng(seed + 2);  // replay the same draws
    LossBreakdown after = objective_step(model, batch, &snap, cfg, after_rng, nullptr);
    REQUIRE(after.total < before.total);
  }
}

TEST_CASE("non-finite parameters abort with the offending term named") {
  auto model = fixtures::tiny_model(HeadKind::cosine, 87, 2);
  model.params().at("audio.in.w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(88);
  StepBatch batch;
  for (auto& e : fixtures::random_examples(model.config(), 2, 2, rng)) batch.current.push_back(e);
  RunConfig cfg;
  Rng step_rng(89);
  try {
    objective_step(model, batch, nullptr, cfg, step_rng, nullptr, 7);
    FAIL("expected nan-loss error");
  } catch (const Error& e) {
    REQUIRE(e.category() == "nan-loss");
    REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("cls"));
    REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("7"));
  }
}

TEST_CASE("single-phase run collapses aia and fia to ia_1") {
  TempDir tmp("run_s1");
  auto data = write_tiny_dataset(tmp, 4, 21);
  RunConfig cfg = tiny_run_config(4, 4, 0, 0, 8);
  cfg.seed = 5;
  RunResult r = run_incremental(data, cfg, tmp / "run");
  REQUIRE(r.metrics.ia.size() == 1);
  REQUIRE(r.metrics.aia == r.metrics.ia[0]);
  REQUIRE(r.metrics.fia == r.metrics.ia[0]);
}

TEST_CASE("incremental run: artifacts, determinism, checkpoint consistency") {
  TempDir tmp("run_full");
  auto data = write_tiny_dataset(tmp, 6, 22);
  RunConfig cfg = tiny_run_config(6, 2, 2, 2, 8);
  cfg.seed = 9;

  RunResult first = run_incremental(data, cfg, tmp / "run_a");
  REQUIRE(first.metrics.ia.size() == 3);

  // determinism: same config and seed reproduce the metrics exactly
  RunResult second = run_incremental(data, cfg, tmp / "run_b");
  REQUIRE(second.metrics.aia == first.metrics.aia);
  REQUIRE(second.metrics.fia == first.metrics.fia);
  for (size_t i = 0; i < 3; ++i) REQUIRE(second.metrics.ia[i] == first.metrics.ia[i]);

  // a different seed gives a different trajectory
  RunConfig other = cfg;
  other.seed = 10;
  RunResult third = run_incremental(data, other, tmp / "run_c");
  REQUIRE(third.metrics.aia != first.metrics.aia);

  // artifacts
  REQUIRE(std::filesystem::exists(tmp / "run_a" / "config.json"));
  json cfg_json = json::parse(read_file_bytes((tmp / "run_a" / "config.json").string()));
  REQUIRE(cfg_json.at("fingerprint").get<std::string>() == first.fingerprint);
  std::string metrics_text = read_file_bytes((tmp / "run_a" / "metrics.jsonl").string());
  REQUIRE(static_cast<size_t>(std::count(metrics_text.begin(), metrics_text.end(), '\n')) == 3);
  json summary = json::parse(read_file_bytes((tmp / "run_a" / "summary.json").string()));
  REQUIRE(std::abs(summary.at("aia").get<double>() - first.metrics.aia) < 1e-12);

  // final checkpoint re-evaluates to fia
  FusionClassifier final_model = load_checkpoint(tmp / "run_a" / "phase_3" / "checkpoint");
  DatasetReader reader(data);
  json sched = summary.at("schedule");
  REQUIRE(sched.at("num_classes").get<int>() == 6);
  // rebuild slot mapping exactly as the run did
  Rng root(cfg.seed);
  std::vector<int> order(6);
  std::iota(order.begin(), order.end(), 0);
  Rng class_rng = root.fork("classes");
  class_rng.shuffle(order);
  std::vector<int> slot_of_class(6);
  for (size_t i = 0; i < 6; ++i) slot_of_class[static_cast<size_t>(order[i])] = static_cast<int>(i);
  std::vector<TrainItem> test_items;
  for (auto& s : reader.load_all())
    if (s.split == Split::test)
      test_items.push_back({s.id, s.features, slot_of_class[static_cast<size_t>(s.label)]});
  double fia = evaluate_accuracy(final_model, test_items);
  REQUIRE(std::abs(fia - first.metrics.fia) < 1e-9);
}

TEST_CASE("schedule and dataset class counts must agree") {
  TempDir tmp("run_mismatch");
  auto data = write_tiny_dataset(tmp, 4, 23);
  RunConfig cfg = tiny_run_config(6, 2, 2, 2, 8);
  REQUIRE_THROWS_WITH(run_incremental(data, cfg, tmp / "run"),
                      Catch::Matchers::ContainsSubstring("classes"));
}
