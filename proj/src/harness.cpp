#include "mergelab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fs = std::filesystem;

namespace mergelab {

int thread_cap() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("MERGELAB_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return std::min(v, hw);
    return 1;
  }
  return hw;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const int threads = thread_cap();
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const int use = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  pool.reserve(static_cast<std::size_t>(use));
  for (int t = 0; t < use; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

EvalResult evaluate(const ParamSet& encoder_params, const EncoderConfig& cfg,
                    const std::vector<SyntheticTask>& tasks,
                    const std::vector<const ParamSet*>& head_owners,
                    const std::vector<const InterventionSet*>& interventions) {
  if (head_owners.size() != tasks.size()) {
    throw std::invalid_argument("evaluate: head owners do not match tasks");
  }
  if (!interventions.empty() && interventions.size() != tasks.size()) {
    throw std::invalid_argument("evaluate: interventions do not match tasks");
  }
  EvalResult result;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& split = tasks[t].test;
    std::vector<char> correct(split.size(), 0);
    const InterventionSet* iv = interventions.empty() ? nullptr : interventions[t];
    parallel_for(split.size(), [&](std::size_t i) {
      Prediction p = predict(split.grid(i), encoder_params, cfg, static_cast<int>(t), iv,
                             head_owners[t]);
      correct[i] = p.label == split.label(i) ? 1 : 0;
    });
    std::size_t hits = 0;
    for (char c : correct) hits += static_cast<std::size_t>(c);
    result.per_task.push_back(static_cast<double>(hits) / static_cast<double>(split.size()));
  }
  double sum = 0;
  for (double v : result.per_task) sum += v;
  result.average = sum / static_cast<double>(result.per_task.size());
  return result;
}

std::vector<double> bias_metric(const ParamSet& merged, const EncoderConfig& cfg,
                                const std::vector<const ParamSet*>& task_models,
                                const std::vector<const InterventionSet*>& interventions,
                                const std::vector<std::vector<std::vector<int>>>& batches) {
  if (task_models.size() != batches.size()) {
    throw std::invalid_argument("bias_metric: task models do not match batches");
  }
  std::vector<double> out;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    const InterventionSet* iv = interventions.empty() ? nullptr : interventions[t];
    Tensor acc;
    for (const auto& tokens : batches[t]) {
      Tensor target = encode(tokens, *task_models[t], cfg);
      Tensor rep = encode(tokens, merged, cfg, iv);
      Tensor l = mean(abs_elem(sub(rep, target)));
      acc = acc.defined() ? add(acc, l) : l;
    }
    out.push_back(acc.value() / static_cast<double>(batches[t].size()));
  }
  return out;
}

StitchProfile stitch_probe(const ParamSet& merged, const EncoderConfig& cfg,
                           const std::vector<const ParamSet*>& task_models,
                           const std::vector<SyntheticTask>& tasks,
                           const std::vector<const InterventionSet*>& interventions) {
  StitchProfile profile;
  profile.per_task.assign(tasks.size(), {});
  profile.average.assign(static_cast<std::size_t>(cfg.num_blocks) + 1, 0.0);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const InterventionSet* iv = interventions.empty() ? nullptr : interventions[t];
    const auto& split = tasks[t].test;
    for (int b = 0; b <= cfg.num_blocks; ++b) {
      std::vector<char> correct(split.size(), 0);
      parallel_for(split.size(), [&](std::size_t i) {
        Prediction p = stitch_forward(split.grid(i), merged, *task_models[t], b,
                                      static_cast<int>(t), cfg, iv);
        correct[i] = p.label == split.label(i) ? 1 : 0;
      });
      std::size_t hits = 0;
      for (char c : correct) hits += static_cast<std::size_t>(c);
      const double acc = static_cast<double>(hits) / static_cast<double>(split.size());
      profile.per_task[t].push_back(acc);
      profile.average[static_cast<std::size_t>(b)] += acc / static_cast<double>(tasks.size());
    }
  }
  return profile;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "experiment_id,stage,task,metric,value,seed\n";
  for (const auto& r : rows) {
    f << r.experiment_id << ',' << r.stage << ',' << r.task << ',' << r.metric << ','
      << format_double(r.value) << ',' << r.seed << '\n';
  }
}

void write_train_log_csv(const std::string& path, const std::vector<TrainLogRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "iteration,task,loss,accuracy\n";
  for (const auto& r : rows) {
    f << r.iteration << ',' << r.task << ',' << format_double(r.loss) << ','
      << format_double(r.accuracy) << '\n';
  }
}

// ---- checkpoint layouts ----

void save_tasks(const std::string& path, const std::vector<SyntheticTask>& tasks) {
  Checkpoint ckpt;
  ckpt.put_i32("meta", {2},
               {static_cast<int32_t>(tasks.size()), static_cast<int32_t>(tasks[0].classes)});
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::string pre = "task" + std::to_string(t + 1) + ".";
    for (const char* split_name : {"train", "test"}) {
      const Split& split = std::string(split_name) == "train" ? tasks[t].train : tasks[t].test;
      const int n = static_cast<int>(split.grids.size());
      std::vector<int32_t> grids;
      grids.reserve(static_cast<std::size_t>(n) * kGridCells);
      for (const auto& g : split.grids) {
        for (int v : g) grids.push_back(v);
      }
      std::vector<int32_t> labels(split.labels.begin(), split.labels.end());
      ckpt.put_i32(pre + split_name + ".grids", {n, kGridCells}, std::move(grids));
      ckpt.put_i32(pre + split_name + ".labels", {n}, std::move(labels));
    }
  }
  ckpt.save(path);
}

std::vector<SyntheticTask> load_tasks(const std::string& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  const auto& meta = ckpt.i32("meta");
  const int T = meta.data[0];
  std::vector<SyntheticTask> tasks;
  for (int t = 0; t < T; ++t) {
    SyntheticTask task;
    task.id = t;
    task.classes = meta.data[1];
    const std::string pre = "task" + std::to_string(t + 1) + ".";
    for (const char* split_name : {"train", "test"}) {
      Split& split = std::string(split_name) == "train" ? task.train : task.test;
      const auto& grids = ckpt.i32(pre + split_name + ".grids");
      const auto& labels = ckpt.i32(pre + split_name + ".labels");
      const int n = grids.shape[0];
      for (int i = 0; i < n; ++i) {
        TokenGrid g(kGridCells);
        for (int j = 0; j < kGridCells; ++j) g[static_cast<std::size_t>(j)] = grids.data[static_cast<std::size_t>(i) * kGridCells + j];
        split.grids.push_back(std::move(g));
        split.labels.push_back(labels.data[static_cast<std::size_t>(i)]);
      }
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

void save_interventions(const std::string& path, const std::vector<InterventionSet>& sets,
                        const Tensor& lambdas, const ParamSet* merged_final) {
  if (sets.empty()) throw std::invalid_argument("save_interventions: nothing to save");
  Checkpoint ckpt;
  const InterventionSpec& spec = sets[0].spec;
  ckpt.put_i32("spec", {6},
               {static_cast<int32_t>(spec.pattern), spec.rank, spec.slice_lo, spec.slice_hi,
                spec.shift_per_block, static_cast<int32_t>(spec.tokens)});
  if (!spec.blocks.empty()) {
    std::vector<int32_t> blocks(spec.blocks.begin(), spec.blocks.end());
    ckpt.put_i32("blocks", {static_cast<int>(blocks.size())}, std::move(blocks));
  }
  ckpt.put_i32("tasks", {1}, {static_cast<int32_t>(sets.size())});
  for (const auto& set : sets) {
    const std::string pre = "task" + std::to_string(set.task + 1) + ".";
    for (const auto& [b, m] : set.modules) {
      const std::string bp = pre + "block" + std::to_string(b) + ".";
      if (m.basis.defined()) ckpt.put_f64(bp + "basis", m.basis.shape(), m.basis.data());
      if (m.w.defined()) ckpt.put_f64(bp + "w", m.w.shape(), m.w.data());
      if (m.w1.defined()) ckpt.put_f64(bp + "w1", m.w1.shape(), m.w1.data());
      if (m.w2.defined()) ckpt.put_f64(bp + "w2", m.w2.shape(), m.w2.data());
      ckpt.put_f64(bp + "bias", m.bias.shape(), m.bias.data());
    }
    if (set.surgery.has_value()) {
      ckpt.put_f64(pre + "surgery.down", set.surgery->w_down.shape(), set.surgery->w_down.data());
      ckpt.put_f64(pre + "surgery.up", set.surgery->w_up.shape(), set.surgery->w_up.data());
    }
  }
  if (lambdas.defined()) ckpt.put_f64("lambda", lambdas.shape(), lambdas.data());
  if (merged_final != nullptr) ckpt.put_params("merged.", *merged_final);
  ckpt.save(path);
}

std::vector<InterventionSet> load_interventions(const std::string& path, InterventionSpec* spec_out,
                                                Tensor* lambdas_out, ParamSet* merged_out) {
  Checkpoint ckpt = Checkpoint::load(path);
  const auto& spec_raw = ckpt.i32("spec");
  InterventionSpec spec;
  spec.pattern = static_cast<Pattern>(spec_raw.data[0]);
  spec.rank = spec_raw.data[1];
  spec.slice_lo = spec_raw.data[2];
  spec.slice_hi = spec_raw.data[3];
  spec.shift_per_block = spec_raw.data[4];
  spec.tokens = static_cast<TokenSelector>(spec_raw.data[5]);
  if (ckpt.has("blocks")) {
    for (int32_t b : ckpt.i32("blocks").data) spec.blocks.push_back(b);
  }
  const int T = ckpt.i32("tasks").data[0];

  std::vector<InterventionSet> sets;
  for (int t = 0; t < T; ++t) {
    InterventionSet set;
    set.spec = spec;
    set.task = t;
    const std::string pre = "task" + std::to_string(t + 1) + ".";
    for (int b : spec.blocks) {
      const std::string bp = pre + "block" + std::to_string(b) + ".";
      ModuleParams m;
      auto grab = [&](const char* name, Tensor& dst) {
        if (ckpt.has(bp + name)) {
          const auto& arr = ckpt.f64(bp + name);
          dst = Tensor::from_data(arr.shape, arr.data, true);
        }
      };
      grab("basis", m.basis);
      grab("w", m.w);
      grab("w1", m.w1);
      grab("w2", m.w2);
      grab("bias", m.bias);
      set.modules.emplace_back(b, std::move(m));
    }
    if (ckpt.has(pre + "surgery.down")) {
      SurgeryParams sp;
      const auto& down = ckpt.f64(pre + "surgery.down");
      const auto& up = ckpt.f64(pre + "surgery.up");
      sp.w_down = Tensor::from_data(down.shape, down.data, true);
      sp.w_up = Tensor::from_data(up.shape, up.data, true);
      set.surgery = std::move(sp);
    }
    sets.push_back(std::move(set));
  }
  if (spec_out != nullptr) *spec_out = spec;
  if (lambdas_out != nullptr && ckpt.has("lambda")) {
    const auto& lam = ckpt.f64("lambda");
    *lambdas_out = Tensor::from_data(lam.shape, lam.data);
  }
  if (merged_out != nullptr && ckpt.has("merged.embed.token")) {
    *merged_out = ckpt.params("merged.");
  }
  return sets;
}

// ---- stage driver ----

namespace {

struct Paths {
  std::string dir;
  std::string in(const std::string& name) const { return dir + "/" + name; }
  std::string tasks() const { return in("tasks.mlb"); }
  std::string theta_pre() const { return in("theta_pre.mlb"); }
  std::string task_model(int t) const { return in("task" + std::to_string(t + 1) + ".mlb"); }
  std::string merged() const { return in("merged.mlb"); }
  std::string interventions() const { return in("interventions.mlb"); }
};

struct Loaded {
  std::vector<SyntheticTask> tasks;
  ParamSet theta_pre;
  std::vector<ParamSet> models;
  std::vector<const ParamSet*> model_ptrs;
  std::vector<TaskVector> taus;
};

void require_file(const std::string& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw std::runtime_error("stage " + stage + ": missing dependency " + path +
                             " (run the earlier stages first)");
  }
}

Loaded load_suite(const ExperimentConfig& cfg, const Paths& paths, const std::string& stage,
                  bool need_models) {
  Loaded loaded;
  require_file(paths.tasks(), stage);
  loaded.tasks = load_tasks(paths.tasks());
  require_file(paths.theta_pre(), stage);
  loaded.theta_pre = Checkpoint::load(paths.theta_pre()).params("theta.");
  if (need_models) {
    for (std::size_t t = 0; t < loaded.tasks.size(); ++t) {
      require_file(paths.task_model(static_cast<int>(t)), stage);
      loaded.models.push_back(Checkpoint::load(paths.task_model(static_cast<int>(t))).params("theta."));
    }
    for (const auto& m : loaded.models) loaded.model_ptrs.push_back(&m);
    for (const auto& m : loaded.models) loaded.taus.push_back(task_vector(m, loaded.theta_pre));
  }
  return loaded;
}

uint64_t derived_seed(const ExperimentConfig& cfg, uint64_t stream) {
  return Rng(cfg.seed).fork(stream).seed();
}

ParamSet merge_with_plan(const ExperimentConfig& cfg, const Loaded& loaded, Tensor* lambdas_out,
                         AdamergingResult* ada_out) {
  const MergePlan& plan = cfg.merge;
  switch (plan.method) {
    case MergeMethod::Average:
      return weight_average(loaded.models);
    case MergeMethod::TaskArithmetic:
      return task_arithmetic(loaded.theta_pre, loaded.taus, plan.lambda);
    case MergeMethod::Ties:
      return ties_merge(loaded.theta_pre, loaded.taus, plan.ties_lambda, plan.ties_trim_fraction);
    case MergeMethod::AdamergingTaskwise:
    case MergeMethod::AdamergingLayerwise: {
      const bool layerwise = plan.method == MergeMethod::AdamergingLayerwise;
      DistillPool pool = subset_data(loaded.tasks, cfg.data_fraction, derived_seed(cfg, 40));
      TrainConfig tc;
      tc.iterations = cfg.adamerging_iterations;
      tc.batch_size = cfg.adamerging_batch;
      tc.learning_rate = cfg.adamerging_lr;
      tc.seed = derived_seed(cfg, 41);
      AdamergingResult res =
          train_adamerging(loaded.theta_pre, loaded.taus, layerwise, cfg.encoder,
                           loaded.model_ptrs, loaded.tasks, pool, tc, plan.adamerging_init);
      ParamSet merged = adamerging_apply(loaded.theta_pre, loaded.taus, res.lambdas);
      if (lambdas_out != nullptr) *lambdas_out = res.lambdas;
      if (ada_out != nullptr) *ada_out = std::move(res);
      return merged;
    }
  }
  throw std::invalid_argument("unknown merge method");
}

std::vector<InterventionSet> init_all_interventions(const ExperimentConfig& cfg, int tasks) {
  std::vector<InterventionSet> sets;
  for (int t = 0; t < tasks; ++t) {
    Rng rng(derived_seed(cfg, 60 + static_cast<uint64_t>(t)));
    sets.push_back(init_interventions(cfg.intervention, t, cfg.encoder.num_blocks,
                                      cfg.encoder.dim, rng));
  }
  return sets;
}

// Injects entropy-trained adamerging coefficients (or plan values) into a
// learnable merge so joint optimization starts from the deployed merge.
LearnableMerge learnable_merge_for(const ExperimentConfig& cfg, const Loaded& loaded,
                                   const Tensor& stored_lambdas) {
  LearnableMerge merge = make_learnable_merge(cfg.merge, loaded.theta_pre, loaded.taus,
                                              loaded.theta_pre, cfg.train.learn_lambdas);
  if (stored_lambdas.defined() && merge.lambdas.defined() &&
      stored_lambdas.numel() == merge.lambdas.numel()) {
    merge.lambdas.raw_data() = stored_lambdas.data();
  }
  return merge;
}

std::vector<std::vector<std::vector<int>>> pool_batches(const std::vector<SyntheticTask>& tasks,
                                                        const DistillPool& pool,
                                                        std::size_t limit) {
  std::vector<std::vector<std::vector<int>>> batches(tasks.size());
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::size_t n = std::min(limit, pool.indices[t].size());
    for (std::size_t i = 0; i < n; ++i) {
      batches[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(pool.indices[t][i])));
    }
  }
  return batches;
}

void stage_gen(const ExperimentConfig& cfg, const Paths& paths) {
  auto tasks = gen_tasks(cfg.tasks, cfg.seed);
  save_tasks(paths.tasks(), tasks);
}

void stage_pretrain(const ExperimentConfig& cfg, const Paths& paths) {
  require_file(paths.tasks(), "pretrain");
  auto tasks = load_tasks(paths.tasks());
  PretrainResult res = pretrain(cfg.encoder, tasks, cfg.pretrain_cfg, derived_seed(cfg, 1));
  Checkpoint ckpt;
  ckpt.put_params("theta.", res.theta);
  ckpt.put_f64("pretext_accuracy", {1}, {res.final_pretext_accuracy});
  ckpt.save(paths.theta_pre());
}

void stage_finetune(const ExperimentConfig& cfg, const Paths& paths) {
  require_file(paths.tasks(), "finetune");
  require_file(paths.theta_pre(), "finetune");
  auto tasks = load_tasks(paths.tasks());
  ParamSet theta_pre = Checkpoint::load(paths.theta_pre()).params("theta.");
  std::vector<FinetuneResult> results(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t t) {
    results[t] = finetune(theta_pre, tasks[t], static_cast<int>(t), cfg.encoder, cfg.finetune_cfg,
                          derived_seed(cfg, 10 + t));
  });
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    Checkpoint ckpt;
    ckpt.put_params("theta.", results[t].theta);
    ckpt.save(paths.task_model(static_cast<int>(t)));
  }
}

void stage_merge(const ExperimentConfig& cfg, const Paths& paths) {
  Loaded loaded = load_suite(cfg, paths, "merge", true);
  Tensor lambdas;
  AdamergingResult ada;
  ParamSet merged = merge_with_plan(cfg, loaded, &lambdas, &ada);

  Checkpoint ckpt;
  ckpt.put_params("theta.", merged);
  if (lambdas.defined()) ckpt.put_f64("lambda", lambdas.shape(), lambdas.data());
  ckpt.save(paths.merged());

  std::vector<MetricRow> rows;
  const std::string method = merge_method_to_string(cfg.merge.method);
  rows.push_back({cfg.id, "merge", -1, "method_" + method, 1.0, cfg.seed});
  // degenerate input flag: all task models bit-identical
  bool degenerate = true;
  for (std::size_t t = 1; t < loaded.models.size() && degenerate; ++t) {
    for (std::size_t i = 0; i < loaded.models[0].size() && degenerate; ++i) {
      if (loaded.models[t].entries()[i].tensor.data() !=
          loaded.models[0].entries()[i].tensor.data()) {
        degenerate = false;
      }
    }
  }
  rows.push_back({cfg.id, "merge", -1, "degenerate_identical_models", degenerate ? 1.0 : 0.0,
                  cfg.seed});
  if (lambdas.defined()) {
    rows.push_back({cfg.id, "merge", -1, "entropy_initial", ada.initial_entropy, cfg.seed});
    rows.push_back({cfg.id, "merge", -1, "entropy_final", ada.final_entropy, cfg.seed});
    if (!ada.log.empty()) {
      write_train_log_csv(paths.in("adamerging_log.csv"), ada.log);
    }
  }
  write_metrics_csv(paths.in("merge_info.csv"), rows);
}

void stage_intervene(const ExperimentConfig& cfg, const Paths& paths) {
  if (!cfg.intervention_enabled) {
    throw std::runtime_error("stage intervene: intervention.pattern = none in config");
  }
  Loaded loaded = load_suite(cfg, paths, "intervene", true);
  require_file(paths.merged(), "intervene");
  Checkpoint merged_ckpt = Checkpoint::load(paths.merged());
  Tensor stored_lambdas;
  if (merged_ckpt.has("lambda")) {
    const auto& lam = merged_ckpt.f64("lambda");
    stored_lambdas = Tensor::from_data(lam.shape, lam.data);
  }

  auto sets = init_all_interventions(cfg, static_cast<int>(loaded.tasks.size()));
  DistillPool pool = subset_data(loaded.tasks, cfg.data_fraction, derived_seed(cfg, 40));
  LearnableMerge merge = learnable_merge_for(cfg, loaded, stored_lambdas);

  TrainConfig tc = cfg.train;
  tc.seed = derived_seed(cfg, 50);
  InterventionTrainResult res = train_interventions(merge, cfg.encoder, sets, loaded.model_ptrs,
                                                    loaded.tasks, pool, tc);

  ParamSet merged_final;
  const ParamSet* merged_ptr = nullptr;
  if (tc.learn_lambdas && merge.lambdas.defined()) {
    merged_final = merge.materialize();
    merged_ptr = &merged_final;
  }
  save_interventions(paths.interventions(), sets, res.lambdas, merged_ptr);
  write_train_log_csv(paths.in("train_log.csv"), res.log);

  std::vector<MetricRow> rows;
  rows.push_back({cfg.id, "intervene", -1, "distill_loss_initial", res.initial_loss, cfg.seed});
  rows.push_back({cfg.id, "intervene", -1, "distill_loss_final", res.final_loss, cfg.seed});
  rows.push_back({cfg.id, "intervene", -1, "extra_params",
                  static_cast<double>(count_extra_params(cfg.intervention,
                                                          static_cast<int>(loaded.tasks.size()),
                                                          cfg.encoder.num_blocks, cfg.encoder.dim)),
                  cfg.seed});
  write_metrics_csv(paths.in("intervene_info.csv"), rows);
}

void stage_eval(const ExperimentConfig& cfg, const Paths& paths) {
  Loaded loaded = load_suite(cfg, paths, "eval", true);
  std::vector<MetricRow> rows;
  const auto T = loaded.tasks.size();

  EvalResult pre = evaluate(loaded.theta_pre, cfg.encoder, loaded.tasks, loaded.model_ptrs);
  for (std::size_t t = 0; t < T; ++t) {
    rows.push_back({cfg.id, "eval", static_cast<int>(t), "accuracy_pretrained", pre.per_task[t],
                    cfg.seed});
  }
  rows.push_back({cfg.id, "eval", -1, "accuracy_pretrained_avg", pre.average, cfg.seed});

  double individual_sum = 0;
  for (std::size_t t = 0; t < T; ++t) {
    EvalResult own = evaluate(loaded.models[t], cfg.encoder, {loaded.tasks[t]},
                              {loaded.model_ptrs[t]});
    // single-task evaluate: head index 0 refers to that task's head
    rows.push_back({cfg.id, "eval", static_cast<int>(t), "accuracy_individual", own.per_task[0],
                    cfg.seed});
    individual_sum += own.per_task[0];
  }
  rows.push_back({cfg.id, "eval", -1, "accuracy_individual_avg",
                  individual_sum / static_cast<double>(T), cfg.seed});

  DistillPool pool = subset_data(loaded.tasks, cfg.data_fraction, derived_seed(cfg, 40));
  auto bias_batches = pool_batches(loaded.tasks, pool, 64);

  if (fs::exists(paths.merged())) {
    ParamSet merged = Checkpoint::load(paths.merged()).params("theta.");
    EvalResult base = evaluate(merged, cfg.encoder, loaded.tasks, loaded.model_ptrs);
    for (std::size_t t = 0; t < T; ++t) {
      rows.push_back({cfg.id, "eval", static_cast<int>(t), "accuracy_merged", base.per_task[t],
                      cfg.seed});
    }
    rows.push_back({cfg.id, "eval", -1, "accuracy_merged_avg", base.average, cfg.seed});

    auto bias_pre = bias_metric(merged, cfg.encoder, loaded.model_ptrs, {}, bias_batches);
    for (std::size_t t = 0; t < T; ++t) {
      rows.push_back({cfg.id, "eval", static_cast<int>(t), "bias_pre", bias_pre[t], cfg.seed});
    }

    if (fs::exists(paths.interventions())) {
      InterventionSpec spec;
      Tensor lambdas;
      ParamSet merged_final;
      auto sets = load_interventions(paths.interventions(), &spec, &lambdas, &merged_final);
      const ParamSet& deploy = merged_final.size() > 0 ? merged_final : merged;
      std::vector<const InterventionSet*> iv_ptrs;
      for (const auto& s : sets) iv_ptrs.push_back(&s);
      EvalResult with_iv = evaluate(deploy, cfg.encoder, loaded.tasks, loaded.model_ptrs, iv_ptrs);
      for (std::size_t t = 0; t < T; ++t) {
        rows.push_back({cfg.id, "eval", static_cast<int>(t), "accuracy_intervened",
                        with_iv.per_task[t], cfg.seed});
      }
      rows.push_back({cfg.id, "eval", -1, "accuracy_intervened_avg", with_iv.average, cfg.seed});

      auto bias_post = bias_metric(deploy, cfg.encoder, loaded.model_ptrs, iv_ptrs, bias_batches);
      for (std::size_t t = 0; t < T; ++t) {
        rows.push_back({cfg.id, "eval", static_cast<int>(t), "bias_post", bias_post[t], cfg.seed});
      }
      rows.push_back({cfg.id, "eval", -1, "extra_params",
                      static_cast<double>(count_extra_params(spec, static_cast<int>(T),
                                                              cfg.encoder.num_blocks,
                                                              cfg.encoder.dim)),
                      cfg.seed});
    }
  }
  write_metrics_csv(paths.in("metrics.csv"), rows);
}

void stage_stitch(const ExperimentConfig& cfg, const Paths& paths) {
  Loaded loaded = load_suite(cfg, paths, "stitch", true);
  require_file(paths.merged(), "stitch");
  ParamSet merged = Checkpoint::load(paths.merged()).params("theta.");

  std::ofstream f(paths.in("stitch.csv"), std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write stitch.csv");
  f << "experiment_id,variant,split,task,accuracy\n";
  auto emit = [&](const char* variant, const StitchProfile& profile) {
    for (std::size_t t = 0; t < profile.per_task.size(); ++t) {
      for (std::size_t b = 0; b < profile.per_task[t].size(); ++b) {
        f << cfg.id << ',' << variant << ',' << b << ',' << t << ','
          << format_double(profile.per_task[t][b]) << '\n';
      }
    }
    for (std::size_t b = 0; b < profile.average.size(); ++b) {
      f << cfg.id << ',' << variant << ',' << b << ",-1," << format_double(profile.average[b])
        << '\n';
    }
  };
  emit("base", stitch_probe(merged, cfg.encoder, loaded.model_ptrs, loaded.tasks));
  if (fs::exists(paths.interventions())) {
    ParamSet merged_final;
    auto sets = load_interventions(paths.interventions(), nullptr, nullptr, &merged_final);
    std::vector<const InterventionSet*> iv_ptrs;
    for (const auto& s : sets) iv_ptrs.push_back(&s);
    const ParamSet& deploy = merged_final.size() > 0 ? merged_final : merged;
    emit("intervened", stitch_probe(deploy, cfg.encoder, loaded.model_ptrs, loaded.tasks, iv_ptrs));
  }
}

void stage_params(const ExperimentConfig& cfg, const Paths& paths) {
  std::vector<MetricRow> rows;
  if (cfg.intervention_enabled) {
    rows.push_back({cfg.id, "params", -1, "extra_params_config",
                    static_cast<double>(count_extra_params(
                        cfg.intervention, cfg.tasks.tasks, cfg.encoder.num_blocks, cfg.encoder.dim)),
                    cfg.seed});
  }
  // reference accounting on the ViT-B/32-shaped config
  const EncoderConfig ref = paper_vitb32(8);
  InterventionSpec full = full_width_spec(Pattern::P4, 1, ref.dim, ref.num_blocks);
  rows.push_back({cfg.id, "params", -1, "extra_params_vitb32_full",
                  static_cast<double>(count_extra_params(full, 8, ref.num_blocks, ref.dim)),
                  cfg.seed});
  InterventionSpec one = full;
  one.blocks = {ref.num_blocks};
  rows.push_back({cfg.id, "params", -1, "extra_params_vitb32_1block",
                  static_cast<double>(count_extra_params(one, 8, ref.num_blocks, ref.dim)),
                  cfg.seed});
  write_metrics_csv(paths.in("params.csv"), rows);
  for (const auto& r : rows) {
    std::printf("%s = %lld\n", r.metric.c_str(), static_cast<long long>(r.value));
  }
}

void stage_report(const ExperimentConfig& cfg, const Paths& paths) {
  Loaded loaded = load_suite(cfg, paths, "report", true);
  const auto T = loaded.tasks.size();

  struct ReportRow {
    std::string method;
    long long extra_params = 0;
    std::vector<double> per_task;
    double average = 0.0;
  };
  std::vector<ReportRow> table;

  auto add_row = [&](const std::string& name, long long extra, const EvalResult& ev) {
    table.push_back(ReportRow{name, extra, ev.per_task, ev.average});
  };

  add_row("pretrained", 0, evaluate(loaded.theta_pre, cfg.encoder, loaded.tasks, loaded.model_ptrs));

  ReportRow individual{"individual", 0, {}, 0.0};
  for (std::size_t t = 0; t < T; ++t) {
    EvalResult own = evaluate(loaded.models[t], cfg.encoder, {loaded.tasks[t]},
                              {loaded.model_ptrs[t]});
    individual.per_task.push_back(own.per_task[0]);
    individual.average += own.per_task[0] / static_cast<double>(T);
  }
  table.push_back(individual);

  DistillPool pool = subset_data(loaded.tasks, cfg.data_fraction, derived_seed(cfg, 40));
  for (std::size_t mi = 0; mi < cfg.report_methods.size(); ++mi) {
    ExperimentConfig sub = cfg;
    sub.merge.method = cfg.report_methods[mi];
    Tensor lambdas;
    ParamSet merged = merge_with_plan(sub, loaded, &lambdas, nullptr);
    const std::string name = merge_method_to_string(sub.merge.method);
    add_row(name, 0, evaluate(merged, cfg.encoder, loaded.tasks, loaded.model_ptrs));

    if (cfg.report_with_interventions && cfg.intervention_enabled) {
      auto sets = init_all_interventions(sub, static_cast<int>(T));
      LearnableMerge merge = learnable_merge_for(sub, loaded, lambdas);
      TrainConfig tc = sub.train;
      tc.seed = derived_seed(cfg, 200 + mi);
      train_interventions(merge, cfg.encoder, sets, loaded.model_ptrs, loaded.tasks, pool, tc);
      std::vector<const InterventionSet*> iv_ptrs;
      for (const auto& s : sets) iv_ptrs.push_back(&s);
      ParamSet deploy = merge.materialize();
      add_row(name + "+intervention",
              count_extra_params(sub.intervention, static_cast<int>(T), cfg.encoder.num_blocks,
                                 cfg.encoder.dim),
              evaluate(deploy, cfg.encoder, loaded.tasks, loaded.model_ptrs, iv_ptrs));
    }
  }

  std::ofstream csv(paths.in("summary.csv"), std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write summary.csv");
  csv << "method,extra_params";
  for (std::size_t t = 0; t < T; ++t) csv << ",task" << t + 1;
  csv << ",avg\n";
  for (const auto& row : table) {
    csv << row.method << ',' << row.extra_params;
    for (double v : row.per_task) csv << ',' << format_double(v);
    csv << ',' << format_double(row.average) << '\n';
  }
  csv.close();

  std::ofstream txt(paths.in("summary.txt"), std::ios::trunc);
  txt << "experiment " << cfg.id << " (seed " << cfg.seed << ")\n";
  for (const auto& row : table) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-36s %9lld ", row.method.c_str(), row.extra_params);
    txt << buf;
    for (double v : row.per_task) {
      std::snprintf(buf, sizeof(buf), "%6.2f ", 100.0 * v);
      txt << buf;
    }
    std::snprintf(buf, sizeof(buf), "| %6.2f\n", 100.0 * row.average);
    txt << buf;
  }
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg) { run_experiment(cfg, cfg.stages); }

void run_experiment(const ExperimentConfig& cfg, const std::vector<std::string>& stages) {
  Paths paths{cfg.out_dir};
  fs::create_directories(cfg.out_dir);
  for (const auto& stage : stages) {
    if (stage == "gen") {
      stage_gen(cfg, paths);
    } else if (stage == "pretrain") {
      stage_pretrain(cfg, paths);
    } else if (stage == "finetune") {
      stage_finetune(cfg, paths);
    } else if (stage == "merge") {
      stage_merge(cfg, paths);
    } else if (stage == "intervene") {
      stage_intervene(cfg, paths);
    } else if (stage == "eval") {
      stage_eval(cfg, paths);
    } else if (stage == "stitch") {
      stage_stitch(cfg, paths);
    } else if (stage == "report") {
      stage_report(cfg, paths);
    } else if (stage == "params") {
      stage_params(cfg, paths);
    } else {
      throw std::invalid_argument("unknown stage: " + stage);
    }
  }
}

}  // namespace mergelab
