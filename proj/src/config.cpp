#include "mergelab/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mergelab {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

// Raw key/value view with consumption tracking so unknown keys surface as
// path-qualified errors.
class Fields {
 public:
  void set(const std::string& key, const std::string& value, int line) {
    if (values_.count(key)) {
      throw ConfigError(key + ": duplicate key (line " + std::to_string(line) + ")");
    }
    values_[key] = value;
  }

  bool present(const std::string& key) const { return values_.count(key) > 0; }

  std::string raw(const std::string& key) {
    consumed_.insert(key);
    return values_.at(key);
  }

  std::string str(const std::string& key, const std::string& fallback) {
    if (!present(key)) return fallback;
    return raw(key);
  }

  long long integer(const std::string& key, long long fallback, long long lo, long long hi) {
    if (!present(key)) {
      check_range(key, fallback, lo, hi);
      return fallback;
    }
    const std::string v = raw(key);
    try {
      std::size_t used = 0;
      const long long parsed = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      check_range(key, parsed, lo, hi);
      return parsed;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(key + ": not an integer (got '" + v + "')");
    }
  }

  double real(const std::string& key, double fallback, double lo, double hi) {
    if (!present(key)) {
      check_real(key, fallback, lo, hi);
      return fallback;
    }
    const std::string v = raw(key);
    try {
      std::size_t used = 0;
      const double parsed = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument("trailing");
      check_real(key, parsed, lo, hi);
      return parsed;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(key + ": not a number (got '" + v + "')");
    }
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!present(key)) return fallback;
    const std::string v = raw(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": not a boolean (got '" + v + "')");
  }

  void finish() const {
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) throw ConfigError(k + ": unknown key");
    }
  }

 private:
  static void check_range(const std::string& key, long long v, long long lo, long long hi) {
    if (v < lo || v > hi) {
      throw ConfigError(key + ": out of range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "] (got " + std::to_string(v) + ")");
    }
  }
  static void check_real(const std::string& key, double v, double lo, double hi) {
    if (!std::isfinite(v) || v < lo || v > hi) {
      throw ConfigError(key + ": out of range [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "] (got " + std::to_string(v) + ")");
    }
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

const std::set<std::string> kKnownStages = {"gen",  "pretrain", "finetune", "merge", "intervene",
                                            "eval", "stitch",   "report",   "params"};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  Fields f;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                        line + "'");
    }
    f.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno);
  }

  ExperimentConfig cfg;
  if (!f.present("version")) throw ConfigError("version: required field missing");
  cfg.version = static_cast<int>(f.integer("version", 1, 1, 1));
  cfg.id = f.str("experiment.id", "exp");
  cfg.seed = static_cast<uint64_t>(f.integer("seed", 0, 0, (1LL << 62)));
  cfg.out_dir = f.str("out", "runs/" + cfg.id);

  if (f.present("stages")) {
    cfg.stages = split(f.raw("stages"), ',');
    for (const auto& s : cfg.stages) {
      if (!kKnownStages.count(s)) throw ConfigError("stages: unknown stage '" + s + "'");
    }
  }

  cfg.tasks.tasks = static_cast<int>(f.integer("tasks.count", 4, 2, 16));
  cfg.tasks.train_per_task = static_cast<int>(f.integer("tasks.train_per_task", 512, 4, 100000));
  cfg.tasks.test_per_task = static_cast<int>(f.integer("tasks.test_per_task", 256, 4, 100000));
  cfg.tasks.texture_prob = f.real("tasks.texture_prob", 0.55, 0.0, 1.0);
  cfg.tasks.confuser_prob = f.real("tasks.confuser_prob", 0.30, 0.0, 1.0);
  if (cfg.tasks.texture_prob + cfg.tasks.confuser_prob > 1.0) {
    throw ConfigError("tasks.confuser_prob: texture_prob + confuser_prob must be <= 1");
  }

  cfg.encoder = desk_config(cfg.tasks.tasks);
  cfg.encoder.num_blocks = static_cast<int>(f.integer("encoder.num_blocks", 4, 1, 64));
  cfg.encoder.dim = static_cast<int>(f.integer("encoder.dim", 32, 2, 4096));
  cfg.encoder.heads = static_cast<int>(f.integer("encoder.heads", 4, 1, 64));
  cfg.encoder.mlp_ratio = f.real("encoder.mlp_ratio", 4.0, 0.25, 16.0);
  if (cfg.encoder.dim % cfg.encoder.heads != 0) {
    throw ConfigError("encoder.heads: dim " + std::to_string(cfg.encoder.dim) +
                      " not divisible by heads " + std::to_string(cfg.encoder.heads));
  }

  cfg.pretrain_cfg.iterations = static_cast<int>(f.integer("pretrain.iterations", 250, 1, 1000000));
  cfg.pretrain_cfg.batch_size = static_cast<int>(f.integer("pretrain.batch_size", 16, 1, 4096));
  cfg.pretrain_cfg.learning_rate = f.real("pretrain.learning_rate", 1e-3, 1e-8, 10.0);
  cfg.finetune_cfg.iterations = static_cast<int>(f.integer("finetune.iterations", 700, 1, 1000000));
  cfg.finetune_cfg.batch_size = static_cast<int>(f.integer("finetune.batch_size", 16, 1, 4096));
  cfg.finetune_cfg.learning_rate = f.real("finetune.learning_rate", 1e-3, 1e-8, 10.0);

  cfg.merge.method = merge_method_from_string(f.str("merge.method", "task_arithmetic"));
  cfg.merge.lambda = f.real("merge.lambda", 0.4, -10.0, 10.0);
  cfg.merge.ties_lambda = f.real("merge.ties_lambda", 1.0, -10.0, 10.0);
  cfg.merge.ties_trim_fraction = f.real("merge.ties_trim_fraction", 0.2, 1e-9, 1.0);
  cfg.merge.adamerging_init = f.real("merge.adamerging_init", 0.3, -10.0, 10.0);
  cfg.adamerging_iterations =
      static_cast<int>(f.integer("merge.adamerging_iterations", 200, 1, 1000000));
  cfg.adamerging_lr = f.real("merge.adamerging_lr", 5e-3, 1e-8, 10.0);
  cfg.adamerging_batch = static_cast<int>(f.integer("merge.adamerging_batch", 8, 1, 4096));

  const std::string pattern = f.str("intervention.pattern", "P4");
  if (pattern == "none") {
    cfg.intervention_enabled = false;
  } else {
    cfg.intervention_enabled = true;
    try {
      cfg.intervention.pattern = pattern_from_string(pattern);
    } catch (const std::exception& e) {
      throw ConfigError("intervention.pattern: " + std::string(e.what()));
    }
  }
  cfg.intervention.rank = static_cast<int>(f.integer("intervention.rank", 1, 1, 4096));

  const std::string slice = f.str("intervention.slice", "full");
  if (slice == "full") {
    cfg.intervention.slice_lo = 0;
    cfg.intervention.slice_hi = cfg.encoder.dim;
  } else {
    const auto parts = split(slice, ':');
    bool ok = parts.size() == 2;
    if (ok) {
      try {
        cfg.intervention.slice_lo = std::stoi(parts[0]);
        cfg.intervention.slice_hi = std::stoi(parts[1]);
      } catch (const std::exception&) {
        ok = false;
      }
    }
    if (!ok) throw ConfigError("intervention.slice: expected 'lo:hi' or 'full', got '" + slice + "'");
  }

  const std::string shift = f.str("intervention.shift_per_block", "0");
  if (shift == "auto") {
    cfg.intervention.shift_per_block = cfg.intervention.slice_width();
  } else {
    try {
      cfg.intervention.shift_per_block = std::stoi(shift);
    } catch (const std::exception&) {
      throw ConfigError("intervention.shift_per_block: expected integer or 'auto', got '" + shift +
                        "'");
    }
  }

  try {
    cfg.intervention.tokens = token_selector_from_string(f.str("intervention.tokens", "cls"));
  } catch (const std::exception& e) {
    throw ConfigError("intervention.tokens: " + std::string(e.what()));
  }

  const std::string blocks = f.str("intervention.blocks", "all");
  if (cfg.intervention.pattern == Pattern::Surgery) {
    cfg.intervention.blocks.clear();
  } else if (blocks == "all") {
    cfg.intervention.blocks.clear();
    for (int b = 1; b <= cfg.encoder.num_blocks; ++b) cfg.intervention.blocks.push_back(b);
  } else if (blocks == "none") {
    cfg.intervention.blocks.clear();
  } else {
    cfg.intervention.blocks.clear();
    for (const auto& tok : split(blocks, ',')) {
      try {
        cfg.intervention.blocks.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw ConfigError("intervention.blocks: expected 'all' or block list, got '" + blocks + "'");
      }
    }
    std::sort(cfg.intervention.blocks.begin(), cfg.intervention.blocks.end());
  }
  if (cfg.intervention_enabled) {
    try {
      validate_spec(cfg.intervention, cfg.encoder.num_blocks, cfg.encoder.dim);
    } catch (const std::exception& e) {
      throw ConfigError("intervention: " + std::string(e.what()));
    }
  }

  cfg.train.iterations = static_cast<int>(f.integer("train.iterations", 500, 1, 1000000));
  cfg.train.batch_size = static_cast<int>(f.integer("train.batch_size", 16, 1, 4096));
  cfg.train.learning_rate = f.real("train.learning_rate", 1e-3, 0.0, 10.0);
  cfg.train.learn_lambdas = f.boolean("train.learn_lambdas", false);
  cfg.train.seed = cfg.seed;
  cfg.data_fraction = f.real("data.fraction", 1.0, 1e-9, 1.0);

  if (f.present("report.methods")) {
    cfg.report_methods.clear();
    for (const auto& m : split(f.raw("report.methods"), ',')) {
      try {
        cfg.report_methods.push_back(merge_method_from_string(m));
      } catch (const std::exception& e) {
        throw ConfigError("report.methods: " + std::string(e.what()));
      }
    }
  }
  cfg.report_with_interventions = f.boolean("report.with_interventions", true);

  f.finish();
  try {
    cfg.encoder.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string(e.what()));
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string default_config_text() {
  return R"(# desk-scale defaults
version = 1
experiment.id = desk
seed = 7
stages = gen,pretrain,finetune,merge,intervene,eval

tasks.count = 4
tasks.train_per_task = 512
tasks.test_per_task = 256

encoder.num_blocks = 4
encoder.dim = 32
encoder.heads = 4

merge.method = task_arithmetic
merge.lambda = 0.4

intervention.pattern = P4
intervention.rank = 1
intervention.slice = full
intervention.tokens = cls
intervention.blocks = all

train.iterations = 500
train.batch_size = 16
train.learning_rate = 1e-3

data.fraction = 1.0
)";
}

}  // namespace mergelab
