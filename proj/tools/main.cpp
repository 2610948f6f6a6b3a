#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "mergelab/config.hpp"
#include "mergelab/harness.hpp"

namespace {

std::vector<std::string> split_stages(const std::string& csv) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mergelab: multi-task model merging and intervention workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string stage_csv;
  long long seed = -1;

  const std::vector<std::string> stage_names = {"gen",  "pretrain", "finetune", "merge",
                                                "intervene", "eval", "stitch", "report", "params"};
  std::vector<CLI::App*> subs;
  for (const auto& name : stage_names) {
    subs.push_back(app.add_subcommand(name, "run the " + name + " stage"));
  }
  CLI::App* run = app.add_subcommand("run", "run the configured stage list");
  subs.push_back(run);

  for (CLI::App* sub : subs) {
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "override the output directory");
  }
  run->add_option("--stage", stage_csv, "comma-separated stage list overriding the config");

  CLI11_PARSE(app, argc, argv);

  try {
    mergelab::ExperimentConfig cfg = mergelab::load_config(config_path);
    if (seed >= 0) {
      cfg.seed = static_cast<uint64_t>(seed);
      cfg.train.seed = cfg.seed;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;

    std::vector<std::string> stages;
    if (run->parsed()) {
      stages = stage_csv.empty() ? cfg.stages : split_stages(stage_csv);
    } else {
      for (std::size_t i = 0; i < stage_names.size(); ++i) {
        if (subs[i]->parsed()) stages = {stage_names[i]};
      }
    }
    mergelab::run_experiment(cfg, stages);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
