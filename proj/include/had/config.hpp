#pragma once

// Run configuration: the single source of truth for a training run. The
// JSON form is persisted into every run directory; CLI flags override
// individual dotted keys before the merged result is written.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "had/common.hpp"

namespace had {

namespace fs = std::filesystem;
using nlohmann::json;

struct ScheduleConfig {
  std::string preset;  // empty when explicit fields are used
  int num_classes = 0;
  int base_classes = 0;
  int num_increments = 0;
  int classes_per_increment = 0;
  int memory_size = 0;
};

struct RunConfig {
  uint64_t seed = 1;
  std::string dataset;
  ScheduleConfig schedule;

  struct {
    int d_model = 64;
    int num_heads = 4;
    std::string head = "cosine";
    bool positional = true;
  } model;

  struct {
    double lr = 3e-5;
    int epochs = 10;
    int batch_size = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  } optim;

  double lambda = 0.05;
  double beta = 5.0;
  double gamma = 0.2;
  double eta = 25.0;

  struct {
    bool enabled = true;
    bool low_level = true;   // LMA
    bool high_level = true;  // HVA
    bool routing = true;     // off = HAD-N mode
  } ham;

  struct {
    bool enabled = true;
    bool sld = true;
    bool dld = true;
    int n_draws = 0;  // 0 = one hull draw per batch sample
  } hld;

  struct {
    bool enabled = true;
    bool scd = true;
    bool vcd = true;
  } hcd;

  void validate() const {
    if (!(lambda >= 0) || !(beta >= 0) || !(gamma >= 0) || !(eta >= 0))
      fail("config", "lambda/beta/gamma/eta must be >= 0");
    if (optim.epochs < 1 || optim.batch_size < 1) fail("config", "epochs and batch_size must be >= 1");
    if (!(optim.lr > 0)) fail("config", "learning rate must be > 0");
    if (hld.n_draws < 0) fail("config", "hld.n_draws must be >= 0");
  }
};

inline json config_to_json(const RunConfig& c) {
  return json{
      {"seed", c.seed},
      {"dataset", c.dataset},
      {"schedule",
       {{"preset", c.schedule.preset},
        {"num_classes", c.schedule.num_classes},
        {"base_classes", c.schedule.base_classes},
        {"num_increments", c.schedule.num_increments},
        {"classes_per_increment", c.schedule.classes_per_increment},
        {"memory_size", c.schedule.memory_size}}},
      {"model",
       {{"d_model", c.model.d_model},
        {"num_heads", c.model.num_heads},
        {"head", c.model.head},
        {"positional", c.model.positional}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"epochs", c.optim.epochs},
        {"batch_size", c.optim.batch_size},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps}}},
      {"lambda", c.lambda},
      {"beta", c.beta},
      {"gamma", c.gamma},
      {"eta", c.eta},
      {"ham",
       {{"enabled", c.ham.enabled},
        {"low_level", c.ham.low_level},
        {"high_level", c.ham.high_level},
        {"routing", c.ham.routing}}},
      {"hld",
       {{"enabled", c.hld.enabled}, {"sld", c.hld.sld}, {"dld", c.hld.dld}, {"n_draws", c.hld.n_draws}}},
      {"hcd", {{"enabled", c.hcd.enabled}, {"scd", c.hcd.scd}, {"vcd", c.hcd.vcd}}}};
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("schedule")) {
      const json& s = j.at("schedule");
      c.schedule.preset = s.value("preset", c.schedule.preset);
      c.schedule.num_classes = s.value("num_classes", c.schedule.num_classes);
      c.schedule.base_classes = s.value("base_classes", c.schedule.base_classes);
      c.schedule.num_increments = s.value("num_increments", c.schedule.num_increments);
      c.schedule.classes_per_increment =
          s.value("classes_per_increment", c.schedule.classes_per_increment);
      c.schedule.memory_size = s.value("memory_size", c.schedule.memory_size);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      c.model.d_model = m.value("d_model", c.model.d_model);
      c.model.num_heads = m.value("num_heads", c.model.num_heads);
      c.model.head = m.value("head", c.model.head);
      c.model.positional = m.value("positional", c.model.positional);
    }
    if (j.contains("optim")) {
      const json& o = j.at("optim");
      c.optim.lr = o.value("lr", c.optim.lr);
      c.optim.epochs = o.value("epochs", c.optim.epochs);
      c.optim.batch_size = o.value("batch_size", c.optim.batch_size);
      c.optim.beta1 = o.value("beta1", c.optim.beta1);
      c.optim.beta2 = o.value("beta2", c.optim.beta2);
      c.optim.eps = o.value("eps", c.optim.eps);
    }
    c.lambda = j.value("lambda", c.lambda);
    c.beta = j.value("beta", c.beta);
    c.gamma = j.value("gamma", c.gamma);
    c.eta = j.value("eta", c.eta);
    if (j.contains("ham")) {
      const json& h = j.at("ham");
      c.ham.enabled = h.value("enabled", c.ham.enabled);
      c.ham.low_level = h.value("low_level", c.ham.low_level);
      c.ham.high_level = h.value("high_level", c.ham.high_level);
      c.ham.routing = h.value("routing", c.ham.routing);
    }
    if (j.contains("hld")) {
      const json& h = j.at("hld");
      c.hld.enabled = h.value("enabled", c.hld.enabled);
      c.hld.sld = h.value("sld", c.hld.sld);
      c.hld.dld = h.value("dld", c.hld.dld);
      c.hld.n_draws = h.value("n_draws", c.hld.n_draws);
    }
    if (j.contains("hcd")) {
      const json& h = j.at("hcd");
      c.hcd.enabled = h.value("enabled", c.hcd.enabled);
      c.hcd.scd = h.value("scd", c.hcd.scd);
      c.hcd.vcd = h.value("vcd", c.hcd.vcd);
    }
  } catch (const json::exception& e) {
    fail("config", std::string("bad config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Dotted-key access (CLI overrides and sweep grids)
// ---------------------------------------------------------------------------

inline void flatten_json(const json& j, const std::string& prefix,
                         std::map<std::string, json>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it)
      flatten_json(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else {
    out[prefix] = j;
  }
}

inline std::map<std::string, json> flatten_config(const RunConfig& c) {
  std::map<std::string, json> flat;
  flatten_json(config_to_json(c), "", flat);
  return flat;
}

inline std::set<std::string> known_config_keys() {
  std::set<std::string> keys;
  for (const auto& [k, v] : flatten_config(RunConfig{})) keys.insert(k);
  return keys;
}

/// Set one dotted key on the JSON form. The value is parsed as JSON when
/// possible (numbers, booleans) and falls back to a string.
inline void set_dotted_key(json& root, const std::string& key, const std::string& value) {
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  json* node = &root;
  size_t start = 0;
  while (true) {
    size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Fingerprint over the canonical (key-sorted) JSON rendering, with any
/// embedded fingerprint field removed first.
inline std::string config_fingerprint(json j) {
  j.erase("fingerprint");
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

inline std::string config_fingerprint(const RunConfig& c) {
  return config_fingerprint(config_to_json(c));
}

// ---------------------------------------------------------------------------
// Presets and ablations
// ---------------------------------------------------------------------------

/// Fill schedule (and companion model/optim defaults) from a named preset.
/// The paper protocols: ave-N uses the cosine head with batch 16; avkM-N the
/// linear head with batch 256. syn20-4 is the desk-scale synthetic protocol.
inline void apply_preset(RunConfig& c, const std::string& name) {
  auto set_schedule = [&](int total, int base, int increments, int per, int memory) {
    c.schedule.preset = name;
    c.schedule.num_classes = total;
    c.schedule.base_classes = base;
    c.schedule.num_increments = increments;
    c.schedule.classes_per_increment = per;
    c.schedule.memory_size = memory;
  };
  if (name == "ave-3" || name == "ave-6") {
    set_schedule(28, 10, name == "ave-3" ? 3 : 6, name == "ave-3" ? 6 : 3, 140);
    c.model.head = "cosine";
    c.optim.batch_size = 16;
  } else if (name == "avk100-5" || name == "avk100-10") {
    set_schedule(100, 50, name == "avk100-5" ? 5 : 10, name == "avk100-5" ? 10 : 5, 1000);
    c.model.head = "linear";
    c.optim.batch_size = 256;
  } else if (name == "avk200-10" || name == "avk200-20") {
    set_schedule(200, 100, name == "avk200-10" ? 10 : 20, name == "avk200-10" ? 10 : 5, 2000);
    c.model.head = "linear";
    c.optim.batch_size = 256;
  } else if (name == "avk400-20" || name == "avk400-40") {
    set_schedule(400, 200, name == "avk400-20" ? 20 : 40, name == "avk400-20" ? 10 : 5, 4000);
    c.model.head = "linear";
    c.optim.batch_size = 256;
  } else if (name == "syn20-4") {
    set_schedule(20, 8, 3, 4, 40);
    c.model.head = "cosine";
    c.optim.batch_size = 16;
    c.optim.lr = 1e-3;
    c.optim.epochs = 10;
  } else {
    fail("config", "unknown preset '" + name +
                       "' (known: ave-3 ave-6 avk100-5 avk100-10 avk200-10 avk200-20 avk400-20 "
                       "avk400-40 syn20-4)");
  }
}

/// Named ablation switches matching the component tables: disabling a module
/// (ham/hld/hcd), one of its halves (lma/hva, sld/dld, scd/vcd), everything
/// (all), or turning routing off (had-n).
inline void apply_ablation(RunConfig& c, const std::string& name) {
  if (name == "ham") c.ham.enabled = false;
  else if (name == "hld") c.hld.enabled = false;
  else if (name == "hcd") c.hcd.enabled = false;
  else if (name == "lma") c.ham.low_level = false;
  else if (name == "hva") c.ham.high_level = false;
  else if (name == "sld") c.hld.sld = false;
  else if (name == "dld") c.hld.dld = false;
  else if (name == "scd") c.hcd.scd = false;
  else if (name == "vcd") c.hcd.vcd = false;
  else if (name == "had-n") c.ham.routing = false;
  else if (name == "all") {
    c.ham.enabled = false;
    c.hld.enabled = false;
    c.hcd.enabled = false;
  } else {
    fail("config", "unknown ablation '" + name +
                       "' (known: ham hld hcd lma hva sld dld scd vcd had-n all)");
  }
}

}  // namespace had
