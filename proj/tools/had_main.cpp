// had: class-incremental audio-visual recognition toolkit.
//
// Subcommands: generate, ingest, train, eval, report, probe-lipschitz, sweep.
// Every failure exits nonzero with a single machine-parsable line on stderr:
//   error:<category>: <message>

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "had/metrics.hpp"
#include "had/probe.hpp"

namespace {

using namespace had;

json load_json_file(const std::string& path) {
  json j = json::parse(read_file_bytes(path), nullptr, false);
  if (j.is_discarded()) fail("config", "not valid JSON: " + path);
  return j;
}

int env_workers() {
  if (const char* env = std::getenv("HAD_NUM_WORKERS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    seeds.push_back(std::stoull(token));
  }
  if (seeds.empty()) fail("usage", "empty seed list");
  return seeds;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string preset;
  std::string config_file;
  std::string from_config;
  std::vector<std::string> ablate;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
};

RunConfig resolve_config(const TrainArgs& args) {
  json cfg_json = config_to_json(RunConfig{});
  if (!args.config_file.empty()) cfg_json.merge_patch(load_json_file(args.config_file));
  if (!args.from_config.empty()) cfg_json.merge_patch(load_json_file(args.from_config));
  cfg_json.erase("fingerprint");
  RunConfig cfg = config_from_json(cfg_json);
  if (!args.preset.empty()) apply_preset(cfg, args.preset);
  for (const auto& name : args.ablate) apply_ablation(cfg, name);
  if (!args.sets.empty()) {
    json patched = config_to_json(cfg);
    for (const auto& kv : args.sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) fail("usage", "--set expects key=value, got: " + kv);
      std::string key = kv.substr(0, eq);
      if (!known_config_keys().count(key)) fail("config", "unknown config key: " + key);
      set_dotted_key(patched, key, kv.substr(eq + 1));
    }
    cfg = config_from_json(patched);
  }
  if (args.seed_given) cfg.seed = args.seed;
  return cfg;
}

int last_phase(const fs::path& run_dir) {
  int phase = 0;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::string name = entry.path().filename().string();
    if (name.rfind("phase_", 0) == 0) phase = std::max(phase, std::atoi(name.c_str() + 6));
  }
  if (phase == 0) fail("io", "no phase checkpoints in " + run_dir.string());
  return phase;
}

std::vector<TrainItem> test_items_for(const fs::path& dataset, uint64_t seed) {
  DatasetReader reader(dataset);
  std::vector<int> slots = class_slot_mapping(reader.manifest().num_classes, seed);
  std::vector<TrainItem> items;
  for (auto& s : reader.load_all())
    if (s.split == Split::test)
      items.push_back({s.id, std::move(s.features), slots[static_cast<size_t>(s.label)]});
  return items;
}

void cmd_eval(const std::string& run, const std::string& data_override) {
  fs::path run_dir(run);
  json cfg_json = load_json_file((run_dir / "config.json").string());
  RunConfig cfg = config_from_json(cfg_json);
  fs::path dataset = data_override.empty() ? fs::path(cfg.dataset) : fs::path(data_override);

  json summary = load_json_file((run_dir / "summary.json").string());
  double stored_fia = summary.at("fia").get<double>();
  double stored_aia = summary.at("aia").get<double>();

  // recompute AIA/FIA from the per-phase log
  RunSeries series = load_run_series(run_dir);
  RunMetrics from_log = aggregate(series.ia);

  // re-derive FIA from the final checkpoint
  FusionClassifier model = load_checkpoint(
      run_dir / ("phase_" + std::to_string(last_phase(run_dir))) / "checkpoint");
  auto items = test_items_for(dataset, cfg.seed);
  std::vector<TrainItem> seen;
  for (auto& item : items)
    if (item.slot < model.num_classes()) seen.push_back(std::move(item));
  double fia = evaluate_accuracy(model, seen);

  std::cout << "stored     aia=" << stored_aia << " fia=" << stored_fia << "\n";
  std::cout << "recomputed aia=" << from_log.aia << " fia=" << fia << "\n";
  if (std::abs(fia - stored_fia) > 1e-6)
    fail("validation",
         "recomputed fia " + std::to_string(fia) + " != stored " + std::to_string(stored_fia));
  if (std::abs(from_log.aia - stored_aia) > 1e-6)
    fail("validation", "metrics.jsonl aia disagrees with summary.json");
  std::cout << "consistent\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-incremental audio-visual recognition toolkit"};
  app.require_subcommand(1);

  // generate ---------------------------------------------------------------
  auto* generate = app.add_subcommand("generate", "generate a synthetic feature dataset");
  SyntheticSpec spec;
  std::string gen_out;
  generate->add_option("--out", gen_out, "output dataset directory")->required();
  generate->add_option("--classes", spec.num_classes, "number of classes");
  generate->add_option("--train", spec.train_per_class, "train samples per class");
  generate->add_option("--valid", spec.valid_per_class, "valid samples per class");
  generate->add_option("--test", spec.test_per_class, "test samples per class");
  generate->add_option("--snippets", spec.snippets, "snippets per video (K)");
  generate->add_option("--audio-dim", spec.audio_dim, "audio feature dimension");
  generate->add_option("--visual-dim", spec.visual_dim, "visual feature dimension");
  generate->add_option("--separation", spec.class_separation, "class anchor scale");
  generate->add_option("--smoothing", spec.temporal_smoothing, "AR(1) snippet smoothing in [0,1]");
  generate->add_option("--coupling", spec.cross_modal_coupling, "cross-modal latent scale in [0,1]");
  generate->add_option("--seed", spec.seed, "generator seed");
  generate->callback([&] {
    auto [manifest, samples] = generate_synthetic(spec);
    write_dataset(manifest, samples, gen_out);
    std::cout << "dataset " << gen_out << " records=" << manifest.records.size()
              << " classes=" << manifest.num_classes << "\n";
  });

  // ingest -----------------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "ingest precomputed per-video features");
  std::string in_audio, in_v2, in_v3, in_labels, in_out;
  ingest->add_option("--audio", in_audio, "directory of 10x128 audio .f32 files")->required();
  ingest->add_option("--visual2d", in_v2, "directory of 80x2048 2D visual .f32 files")->required();
  ingest->add_option("--visual3d", in_v3, "directory of 10x512 3D visual .f32 files")->required();
  ingest->add_option("--labels", in_labels, "CSV id,label,split")->required();
  ingest->add_option("--out", in_out, "output dataset directory")->required();
  ingest->callback([&] {
    auto [manifest, summary] = ingest_precomputed(in_audio, in_v2, in_v3, in_labels, in_out);
    std::cout << "ingested=" << summary.ingested << " skipped=" << summary.skipped.size()
              << " visual_dim=" << manifest.visual_dim << "\n";
    for (const auto& [id, reason] : summary.skipped)
      std::cout << "skip " << id << ": " << reason << "\n";
  });

  // train ------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "run the incremental training protocol");
  TrainArgs targs;
  train->add_option("--data", targs.data, "dataset directory")->required();
  train->add_option("--out", targs.out, "run output directory")->required();
  train->add_option("--preset", targs.preset,
                    "schedule preset (ave-3 ave-6 avk100-5 avk100-10 avk200-10 avk200-20 "
                    "avk400-20 avk400-40 syn20-4)");
  train->add_option("--config", targs.config_file, "base config JSON file");
  train->add_option("--from-config", targs.from_config, "persisted run config to reproduce");
  train->add_option("--ablate", targs.ablate,
                    "disable components (ham hld hcd lma hva sld dld scd vcd had-n all)");
  train->add_option("--set", targs.sets, "override a config key, e.g. --set optim.lr=1e-4");
  auto* seed_opt = train->add_option("--seed", targs.seed, "run seed");
  train->callback([&] {
    targs.seed_given = seed_opt->count() > 0;
    RunConfig cfg = resolve_config(targs);
    RunResult result = run_incremental(targs.data, cfg, targs.out);
    std::cout << "run " << targs.out << " fingerprint=" << result.fingerprint
              << " aia=" << result.metrics.aia << " fia=" << result.metrics.fia << "\n";
  });

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "re-derive metrics from a run directory");
  std::string eval_run, eval_data;
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--data", eval_data, "dataset override (defaults to the recorded path)");
  eval->callback([&] { cmd_eval(eval_run, eval_data); });

  // report -----------------------------------------------------------------
  auto* report = app.add_subcommand("report", "emit accuracy curves and tables");
  std::vector<std::string> report_runs;
  std::string report_out;
  report->add_option("--runs", report_runs, "run directories")->required();
  report->add_option("--out", report_out, "output directory")->required();
  report->callback([&] {
    std::vector<fs::path> dirs(report_runs.begin(), report_runs.end());
    for (const auto& p : emit_report(dirs, report_out)) std::cout << p.string() << "\n";
  });

  // probe-lipschitz ----------------------------------------------------------
  auto* probe = app.add_subcommand("probe-lipschitz", "perturbation probe on the fusion module");
  std::string probe_run, probe_data, probe_out;
  double probe_eps = 1e-2;
  int probe_n = 10;
  uint64_t probe_seed = 1;
  probe->add_option("--run", probe_run, "run directory with checkpoints")->required();
  probe->add_option("--data", probe_data, "dataset override");
  probe->add_option("--epsilon", probe_eps, "perturbation norm");
  probe->add_option("--n", probe_n, "number of probed samples");
  probe->add_option("--seed", probe_seed, "probe seed");
  probe->add_option("--out", probe_out, "output JSON path (default <run>/probe.json)");
  probe->callback([&] {
    fs::path run_dir(probe_run);
    RunConfig cfg = config_from_json(load_json_file((run_dir / "config.json").string()));
    fs::path dataset = probe_data.empty() ? fs::path(cfg.dataset) : fs::path(probe_data);
    FusionClassifier model = load_checkpoint(
        run_dir / ("phase_" + std::to_string(last_phase(run_dir))) / "checkpoint");
    DatasetReader reader(dataset);
    std::vector<ModalFeatures> pool;
    for (auto& s : reader.load_all())
      if (s.split == Split::train) pool.push_back(std::move(s.features));
    Rng rng(probe_seed);
    ProbeReport rep = probe_lipschitz(model, pool, probe_eps, probe_n, rng);
    fs::path out = probe_out.empty() ? run_dir / "probe.json" : fs::path(probe_out);
    write_file_bytes(out.string(), rep.to_json().dump(2) + "\n");
    std::cout << "probe " << out.string() << " mean=" << rep.mean
              << " fraction_exceeding=" << rep.fraction_exceeding << "\n";
  });

  // sweep --------------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "grid sweep over config keys");
  TrainArgs sargs;
  std::string grid_inline, grid_file, seeds_text;
  sweep_cmd->add_option("--data", sargs.data, "dataset directory")->required();
  sweep_cmd->add_option("--out", sargs.out, "sweep output directory")->required();
  sweep_cmd->add_option("--grid", grid_inline, "inline grid JSON, e.g. {\"lambda\":[0,0.05,0.2]}");
  sweep_cmd->add_option("--grid-file", grid_file, "grid JSON file");
  sweep_cmd->add_option("--seeds", seeds_text, "comma-separated seed list");
  sweep_cmd->add_option("--preset", sargs.preset, "schedule preset for the base config");
  sweep_cmd->add_option("--config", sargs.config_file, "base config JSON file");
  sweep_cmd->add_option("--set", sargs.sets, "override a base config key");
  auto* sweep_seed_opt = sweep_cmd->add_option("--seed", sargs.seed, "base seed");
  sweep_cmd->callback([&] {
    sargs.seed_given = sweep_seed_opt->count() > 0;
    RunConfig base = resolve_config(sargs);
    json grid_json;
    if (!grid_inline.empty()) {
      grid_json = json::parse(grid_inline, nullptr, false);
      if (grid_json.is_discarded()) fail("usage", "--grid is not valid JSON");
    } else if (!grid_file.empty()) {
      grid_json = load_json_file(grid_file);
    } else {
      fail("usage", "sweep needs --grid or --grid-file");
    }
    if (!grid_json.is_object()) fail("usage", "grid must be a JSON object of key -> value list");
    std::map<std::string, std::vector<json>> grid;
    for (auto it = grid_json.begin(); it != grid_json.end(); ++it) {
      if (!it.value().is_array()) fail("usage", "grid values must be arrays");
      grid[it.key()] = std::vector<json>(it.value().begin(), it.value().end());
    }
    std::vector<uint64_t> seeds =
        seeds_text.empty() ? std::vector<uint64_t>{base.seed} : parse_seed_list(seeds_text);
    SweepResult result = sweep(base, grid, seeds, sargs.data, sargs.out, env_workers());
    std::cout << "sweep " << result.csv_path.string() << " rows=" << result.rows.size() << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error:usage: " << e.what() << "\n";
    return 2;
  } catch (const had::Error& e) {
    std::cerr << "error:" << e.category() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error:internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
