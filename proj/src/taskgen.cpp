#include "mergelab/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "mergelab/optim.hpp"

namespace mergelab {

namespace {

uint64_t grid_hash(const TokenGrid& g) {
  uint64_t h = 1469598103934665603ULL;
  for (int v : g) {
    h ^= static_cast<uint64_t>(v) + 1;
    h *= 1099511628211ULL;
  }
  return h;
}

TokenGrid sample_grid(int task, int cls, int tasks, const TaskgenOptions& opt, Rng& rng) {
  TokenGrid grid(kGridCells, 0);
  const bool vertical = (cls / 2) != 0;
  const bool reversed = (cls % 2) != 0;
  int p, q;
  if (vertical) {
    const int row = rng.uniform_int(kGridSide - 1);
    const int col = rng.uniform_int(kGridSide);
    p = row * kGridSide + col;
    q = p + kGridSide;
  } else {
    const int row = rng.uniform_int(kGridSide);
    const int col = rng.uniform_int(kGridSide - 1);
    p = row * kGridSide + col;
    q = p + 1;
  }
  int ta = motif_token_a(task), tb = motif_token_b(task);
  if (reversed) std::swap(ta, tb);
  grid[static_cast<std::size_t>(p)] = ta;
  grid[static_cast<std::size_t>(q)] = tb;

  for (int c = 0; c < kGridCells; ++c) {
    if (c == p || c == q) continue;
    const double u = rng.uniform();
    if (u < opt.texture_prob) {
      grid[static_cast<std::size_t>(c)] = 1 + rng.uniform_int(kNumTextures);
    } else if (u < opt.texture_prob + opt.confuser_prob && tasks > 1) {
      int other = rng.uniform_int(tasks - 1);
      if (other >= task) ++other;
      grid[static_cast<std::size_t>(c)] =
          rng.uniform_int(2) == 0 ? motif_token_a(other) : motif_token_b(other);
    }
  }
  return grid;
}

Split make_split(int task, int count, int tasks, const TaskgenOptions& opt, Rng& rng,
                 const std::unordered_set<uint64_t>* exclude,
                 std::unordered_set<uint64_t>* record) {
  Split split;
  split.grids.reserve(static_cast<std::size_t>(count));
  split.labels.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int cls = i % 4;
    TokenGrid grid;
    for (;;) {
      grid = sample_grid(task, cls, tasks, opt, rng);
      const uint64_t h = grid_hash(grid);
      if (exclude != nullptr && exclude->count(h)) continue;
      if (record != nullptr) record->insert(h);
      break;
    }
    split.grids.push_back(std::move(grid));
    split.labels.push_back(cls);
  }
  return split;
}

}  // namespace

int motif_token_a(int task) { return 1 + kNumTextures + 2 * task; }
int motif_token_b(int task) { return 1 + kNumTextures + 2 * task + 1; }
int vocab_size(int tasks) { return 1 + kNumTextures + 2 * tasks; }

std::vector<SyntheticTask> gen_tasks(const TaskgenOptions& opt, uint64_t seed) {
  if (opt.tasks < 2) throw std::invalid_argument("gen_tasks: need at least 2 tasks");
  if (opt.train_per_task < 4 || opt.test_per_task < 4) {
    throw std::invalid_argument("gen_tasks: splits need at least one sample per class");
  }
  Rng root(seed);
  std::vector<SyntheticTask> tasks;
  tasks.reserve(static_cast<std::size_t>(opt.tasks));
  for (int t = 0; t < opt.tasks; ++t) {
    Rng rng = root.fork(static_cast<uint64_t>(t));
    SyntheticTask task;
    task.id = t;
    task.classes = 4;
    std::unordered_set<uint64_t> seen;
    task.train = make_split(t, opt.train_per_task, opt.tasks, opt, rng, nullptr, &seen);
    task.test = make_split(t, opt.test_per_task, opt.tasks, opt, rng, &seen, nullptr);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

std::vector<SyntheticTask> gen_tasks(int tasks, uint64_t seed) {
  TaskgenOptions opt;
  opt.tasks = tasks;
  return gen_tasks(opt, seed);
}

int detect_label(const TokenGrid& grid, int task) {
  const int ta = motif_token_a(task), tb = motif_token_b(task);
  int pa = -1, pb = -1;
  for (int c = 0; c < kGridCells; ++c) {
    if (grid[static_cast<std::size_t>(c)] == ta) {
      if (pa >= 0) return -1;
      pa = c;
    } else if (grid[static_cast<std::size_t>(c)] == tb) {
      if (pb >= 0) return -1;
      pb = c;
    }
  }
  if (pa < 0 || pb < 0) return -1;
  const int lo = std::min(pa, pb), hi = std::max(pa, pb);
  const bool same_row = lo / kGridSide == hi / kGridSide;
  if (hi - lo == 1 && same_row) {
    return pa < pb ? 0 : 1;  // horizontal, forward when motif A is left
  }
  if (hi - lo == kGridSide) {
    return pa < pb ? 2 : 3;  // vertical, forward when motif A is on top
  }
  return -1;
}

std::vector<double> motif_presence(const TokenGrid& grid, int tasks) {
  std::vector<double> present(static_cast<std::size_t>(tasks), 0.0);
  for (int v : grid) {
    for (int t = 0; t < tasks; ++t) {
      if (v == motif_token_a(t) || v == motif_token_b(t)) present[static_cast<std::size_t>(t)] = 1.0;
    }
  }
  return present;
}

EncoderConfig desk_config(int tasks, int classes) {
  EncoderConfig cfg;
  cfg.num_blocks = 4;
  cfg.dim = 32;
  cfg.heads = 4;
  cfg.mlp_ratio = 4.0;
  cfg.seq_len = kGridCells + 1;
  cfg.vocab = vocab_size(tasks);
  cfg.num_classes.assign(static_cast<std::size_t>(tasks), classes);
  cfg.pretext_dim = tasks;
  return cfg;
}

namespace {

double pretext_accuracy(const ParamSet& theta, const EncoderConfig& cfg,
                        const std::vector<const TokenGrid*>& pool,
                        const std::vector<std::vector<double>>& targets, std::size_t limit) {
  const std::size_t n = std::min(limit, pool.size());
  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor rep = encode(*pool[i], theta, cfg);
    Tensor logits = add_row_bias(matmul(rep, theta.at("pretext.w")), theta.at("pretext.b"));
    for (std::size_t j = 0; j < targets[i].size(); ++j) {
      const bool pred = logits.data()[j] > 0.0;
      correct += (pred == (targets[i][j] > 0.5)) ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

PretrainResult pretrain(const EncoderConfig& cfg, const std::vector<SyntheticTask>& tasks,
                        const BackboneTrainConfig& tc, uint64_t seed) {
  if (cfg.pretext_dim != static_cast<int>(tasks.size())) {
    throw std::invalid_argument("pretrain: pretext_dim must equal the number of tasks");
  }
  Rng rng(seed);
  ParamSet theta = init_params(cfg, rng);
  theta.set_requires_grad(true);

  std::vector<const TokenGrid*> pool;
  std::vector<std::vector<double>> targets;
  for (const auto& task : tasks) {
    for (std::size_t i = 0; i < task.train.size(); ++i) {
      pool.push_back(&task.train.grid(i));
      targets.push_back(motif_presence(*pool.back(), static_cast<int>(tasks.size())));
    }
  }

  Adam opt(theta.tensors(), AdamConfig{tc.learning_rate});
  PretrainResult result;
  for (int iter = 0; iter < tc.iterations; ++iter) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      Tensor acc;
      for (int b = 0; b < tc.batch_size; ++b) {
        const std::size_t i = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())));
        Tensor rep = encode(*pool[i], theta, cfg);
        Tensor logits = add_row_bias(matmul(rep, theta.at("pretext.w")), theta.at("pretext.b"));
        Tensor l = bce_with_logits(reshape(logits, {cfg.pretext_dim}), targets[i]);
        acc = acc.defined() ? add(acc, l) : l;
      }
      loss = scale(acc, 1.0 / tc.batch_size);
      if (!std::isfinite(loss.value())) throw std::runtime_error("pretrain diverged at iteration " + std::to_string(iter));
      backward(loss, tape);
    }
    opt.step();
    TrainPoint pt{iter, loss.value(), -1.0};
    if (tc.probe_every > 0 && (iter % tc.probe_every == 0 || iter == tc.iterations - 1)) {
      pt.probe_accuracy = pretext_accuracy(theta, cfg, pool, targets,
                                           static_cast<std::size_t>(tc.probe_size));
    }
    result.log.push_back(pt);
  }
  result.final_pretext_accuracy =
      pretext_accuracy(theta, cfg, pool, targets, static_cast<std::size_t>(tc.probe_size));
  theta.set_requires_grad(false);
  result.theta = std::move(theta);
  return result;
}

FinetuneResult finetune(const ParamSet& init, const SyntheticTask& task, int task_index,
                        const EncoderConfig& cfg, const BackboneTrainConfig& tc, uint64_t seed) {
  Rng rng(seed);
  ParamSet theta = init.clone();
  theta.set_requires_grad(true);

  const std::size_t probe_n = std::min<std::size_t>(static_cast<std::size_t>(tc.probe_size),
                                                    task.train.size());
  Adam opt(theta.tensors(), AdamConfig{tc.learning_rate});
  FinetuneResult result;
  for (int iter = 0; iter < tc.iterations; ++iter) {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      Tensor acc;
      for (int b = 0; b < tc.batch_size; ++b) {
        const std::size_t i =
            static_cast<std::size_t>(rng.uniform_int(static_cast<int>(task.train.size())));
        Tensor rep = encode(task.train.grid(i), theta, cfg);
        Tensor l = cross_entropy(head_logits(rep, theta, task_index), task.train.label(i));
        acc = acc.defined() ? add(acc, l) : l;
      }
      loss = scale(acc, 1.0 / tc.batch_size);
      if (!std::isfinite(loss.value())) throw std::runtime_error("finetune diverged at iteration " + std::to_string(iter));
      backward(loss, tape);
    }
    opt.step();
    TrainPoint pt{iter, loss.value(), -1.0};
    if (tc.probe_every > 0 && (iter % tc.probe_every == 0 || iter == tc.iterations - 1)) {
      std::size_t correct = 0;
      for (std::size_t i = 0; i < probe_n; ++i) {
        Prediction p = predict(task.train.grid(i), theta, cfg, task_index);
        correct += p.label == task.train.label(i) ? 1 : 0;
      }
      pt.probe_accuracy = static_cast<double>(correct) / static_cast<double>(probe_n);
      if (result.iterations_to_probe_target < 0 && pt.probe_accuracy >= tc.probe_target) {
        result.iterations_to_probe_target = iter;
      }
    }
    result.log.push_back(pt);
  }
  theta.set_requires_grad(false);
  result.theta = std::move(theta);
  return result;
}

}  // namespace mergelab
