#include "mergelab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "mergelab/optim.hpp"

namespace mergelab {

DistillPool subset_data(const std::vector<SyntheticTask>& tasks, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("subset_data: fraction must be in (0,1]");
  }
  DistillPool pool;
  pool.fraction = fraction;
  Rng root(seed);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const std::size_t n = tasks[t].test.size();
    if (n == 0) throw std::invalid_argument("subset_data: task " + std::to_string(t) + " has no test data");
    auto m = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
    m = std::max<std::size_t>(1, std::min(n, m));
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng = root.fork(t);
    for (std::size_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    pool.indices.push_back(std::move(idx));
  }
  return pool;
}

namespace {

std::vector<TaskVector> clone_taus(const std::vector<TaskVector>& task_vectors) {
  std::vector<TaskVector> out;
  out.reserve(task_vectors.size());
  for (const auto& tv : task_vectors) {
    out.push_back(TaskVector{tv.values.clone(), tv.residual.clone()});
  }
  return out;
}

int zero_index(int, const std::string&) { return 0; }

}  // namespace

LearnableMerge make_learnable_merge(const MergePlan& plan, const ParamSet& theta_pre,
                                    const std::vector<TaskVector>& task_vectors,
                                    const ParamSet& schema, bool learnable) {
  (void)schema;
  LearnableMerge out;
  switch (plan.method) {
    case MergeMethod::Average: {
      // no coefficients to learn: mean of theta_t == theta_pre + mean(tau)
      ParamSet merged = task_arithmetic(theta_pre, task_vectors,
                                        1.0 / static_cast<double>(task_vectors.size()));
      out.materialize = [merged = std::move(merged)] { return merged.clone(); };
      break;
    }
    case MergeMethod::TaskArithmetic: {
      out.lambdas = Tensor::scalar(plan.lambda, learnable);
      out.materialize = [base = theta_pre.clone(), taus = clone_taus(task_vectors),
                         lam = out.lambdas] {
        std::vector<const TaskVector*> parts;
        for (const auto& t : taus) parts.push_back(&t);
        return coefficient_merge(base, parts, lam, zero_index);
      };
      break;
    }
    case MergeMethod::Ties: {
      out.lambdas = Tensor::scalar(plan.ties_lambda, learnable);
      TaskVector dir = ties_direction(task_vectors, plan.ties_trim_fraction);
      out.materialize = [base = theta_pre.clone(), dir = std::move(dir), lam = out.lambdas] {
        return coefficient_merge(base, {&dir}, lam, zero_index);
      };
      break;
    }
    case MergeMethod::AdamergingTaskwise:
    case MergeMethod::AdamergingLayerwise: {
      const int tasks = static_cast<int>(task_vectors.size());
      const int groups = static_cast<int>(layer_groups(theta_pre).size());
      out.lambdas = plan.method == MergeMethod::AdamergingTaskwise
                        ? Tensor::full({tasks}, plan.adamerging_init, learnable)
                        : Tensor::full({tasks, groups}, plan.adamerging_init, learnable);
      out.materialize = [base = theta_pre.clone(), taus = clone_taus(task_vectors),
                         lam = out.lambdas] { return adamerging_apply(base, taus, lam); };
      break;
    }
  }
  if (out.lambdas.defined()) out.lambdas.set_requires_grad(learnable);
  return out;
}

namespace {

Tensor sample_loss(const ParamSet& merged, const EncoderConfig& cfg,
                   const InterventionSet* iv, const ParamSet& task_model,
                   const std::vector<int>& tokens) {
  Tensor target = encode(tokens, task_model, cfg);  // frozen, records nothing
  Tensor rep = encode(tokens, merged, cfg, iv);
  return mean(abs_elem(sub(rep, target)));
}

std::vector<Tensor> distill_loss_per_task(const ParamSet& merged, const EncoderConfig& cfg,
                                          const std::vector<const InterventionSet*>& interventions,
                                          const std::vector<const ParamSet*>& task_models,
                                          const std::vector<std::vector<std::vector<int>>>& batches) {
  if (task_models.size() != batches.size() || interventions.size() != batches.size()) {
    throw std::invalid_argument("distill_loss: tasks, interventions and batches disagree");
  }
  std::vector<Tensor> per_task;
  for (std::size_t t = 0; t < batches.size(); ++t) {
    if (batches[t].empty()) throw std::invalid_argument("distill_loss: empty batch for task " + std::to_string(t));
    Tensor acc;
    for (const auto& tokens : batches[t]) {
      Tensor l = sample_loss(merged, cfg, interventions[t], *task_models[t], tokens);
      acc = acc.defined() ? add(acc, l) : l;
    }
    per_task.push_back(scale(acc, 1.0 / static_cast<double>(batches[t].size())));
  }
  return per_task;
}

Tensor mean_of(const std::vector<Tensor>& parts) {
  Tensor acc;
  for (const auto& p : parts) acc = acc.defined() ? add(acc, p) : p;
  return scale(acc, 1.0 / static_cast<double>(parts.size()));
}

double pool_accuracy(const ParamSet& merged, const EncoderConfig& cfg, const InterventionSet* iv,
                     const ParamSet& head_owner, const SyntheticTask& task, int task_index,
                     const std::vector<int>& pool_indices) {
  const std::size_t n = std::min<std::size_t>(pool_indices.size(), 64);
  if (n == 0) return -1.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(pool_indices[i]);
    Prediction p = predict(task.test.grid(idx), merged, cfg, task_index, iv, &head_owner);
    correct += p.label == task.test.label(idx) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace

Tensor distill_loss(const ParamSet& merged, const EncoderConfig& cfg,
                    const std::vector<const InterventionSet*>& interventions,
                    const std::vector<const ParamSet*>& task_models,
                    const std::vector<std::vector<std::vector<int>>>& batches) {
  return mean_of(distill_loss_per_task(merged, cfg, interventions, task_models, batches));
}

InterventionTrainResult train_interventions(const LearnableMerge& merge, const EncoderConfig& cfg,
                                            std::vector<InterventionSet>& interventions,
                                            const std::vector<const ParamSet*>& task_models,
                                            const std::vector<SyntheticTask>& tasks,
                                            const DistillPool& pool, const TrainConfig& tc) {
  const std::size_t T = tasks.size();
  if (interventions.size() != T || task_models.size() != T || pool.indices.size() != T) {
    throw std::invalid_argument("train_interventions: task count mismatch");
  }
  if (tc.iterations < 1) throw std::invalid_argument("train.iterations: must be >= 1");
  if (tc.learning_rate < 0) throw std::invalid_argument("train.learning_rate: must be >= 0");

  const bool learn_lambdas = tc.learn_lambdas && merge.lambdas.defined();
  std::vector<Tensor> trainable;
  for (auto& iv : interventions) {
    for (const auto& t : iv.trainable()) trainable.push_back(t);
  }
  if (learn_lambdas) trainable.push_back(merge.lambdas);

  ParamSet merged_fixed;
  if (!learn_lambdas) merged_fixed = merge.materialize();

  Adam opt(trainable, AdamConfig{tc.learning_rate, tc.beta1, tc.beta2, tc.eps});
  Rng rng(tc.seed);
  InterventionTrainResult result;

  std::vector<const InterventionSet*> iv_ptrs;
  for (const auto& iv : interventions) iv_ptrs.push_back(&iv);

  for (int iter = 0; iter < tc.iterations; ++iter) {
    // batch per task: whole pool when it fits, otherwise sample with replacement
    std::vector<std::vector<std::vector<int>>> batches(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& idx = pool.indices[t];
      if (static_cast<int>(idx.size()) <= tc.batch_size) {
        for (int i : idx) batches[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(i)));
      } else {
        for (int b = 0; b < tc.batch_size; ++b) {
          const int i = idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(idx.size())))];
          batches[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(i)));
        }
      }
    }

    Tape tape;
    double loss_value;
    std::vector<double> task_losses(T);
    {
      TapeScope scope(tape);
      ParamSet merged_live = learn_lambdas ? merge.materialize() : ParamSet();
      const ParamSet& merged = learn_lambdas ? merged_live : merged_fixed;
      auto parts = distill_loss_per_task(merged, cfg, iv_ptrs, task_models, batches);
      for (std::size_t t = 0; t < T; ++t) task_losses[t] = parts[t].value();
      Tensor loss = mean_of(parts);
      loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train_interventions: non-finite loss at iteration " +
                                 std::to_string(iter));
      }
      backward(loss, tape);
    }
    if (iter == 0) result.initial_loss = loss_value;
    result.final_loss = loss_value;

    opt.step();
    for (auto& iv : interventions) {
      for (auto& [b, m] : iv.modules) {
        if (m.basis.defined()) reorthonormalize(m.basis);
      }
    }

    for (std::size_t t = 0; t < T; ++t) {
      result.log.push_back(TrainLogRow{iter, static_cast<int>(t), task_losses[t], -1.0});
    }
    result.log.push_back(TrainLogRow{iter, -1, loss_value, -1.0});
  }

  // accuracy on the distill pool after training, one row per task
  {
    const ParamSet merged = merge.materialize();
    for (std::size_t t = 0; t < T; ++t) {
      const double acc = pool_accuracy(merged, cfg, iv_ptrs[t], *task_models[t], tasks[t],
                                       static_cast<int>(t), pool.indices[t]);
      result.log.push_back(TrainLogRow{tc.iterations, static_cast<int>(t),
                                       result.final_loss, acc});
    }
  }

  if (learn_lambdas) result.lambdas = merge.lambdas;
  return result;
}

AdamergingResult train_adamerging(const ParamSet& theta_pre,
                                  const std::vector<TaskVector>& task_vectors, bool layerwise,
                                  const EncoderConfig& cfg,
                                  const std::vector<const ParamSet*>& head_owners,
                                  const std::vector<SyntheticTask>& tasks,
                                  const DistillPool& pool, const TrainConfig& tc,
                                  double init_coeff) {
  const std::size_t T = tasks.size();
  if (task_vectors.size() != T || head_owners.size() != T || pool.indices.size() != T) {
    throw std::invalid_argument("train_adamerging: task count mismatch");
  }
  const int groups = static_cast<int>(layer_groups(theta_pre).size());
  Tensor lambdas = layerwise
                       ? Tensor::full({static_cast<int>(T), groups}, init_coeff, true)
                       : Tensor::full({static_cast<int>(T)}, init_coeff, true);

  // fixed probe batches for before/after entropy comparison
  std::vector<std::vector<std::vector<int>>> probe(T);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t n = std::min<std::size_t>(pool.indices[t].size(), 32);
    for (std::size_t i = 0; i < n; ++i) {
      probe[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(pool.indices[t][i])));
    }
  }
  auto probe_entropy = [&] {
    ParamSet merged = adamerging_apply(theta_pre, task_vectors, lambdas);
    return entropy_objective(merged, cfg, head_owners, probe).value();
  };

  AdamergingResult result;
  result.initial_entropy = probe_entropy();

  Adam opt({lambdas}, AdamConfig{tc.learning_rate, tc.beta1, tc.beta2, tc.eps});
  Rng rng(tc.seed);
  for (int iter = 0; iter < tc.iterations; ++iter) {
    std::vector<std::vector<std::vector<int>>> batches(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto& idx = pool.indices[t];
      if (static_cast<int>(idx.size()) <= tc.batch_size) {
        for (int i : idx) batches[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(i)));
      } else {
        for (int b = 0; b < tc.batch_size; ++b) {
          const int i = idx[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(idx.size())))];
          batches[t].push_back(tasks[t].test.grid(static_cast<std::size_t>(i)));
        }
      }
    }
    Tape tape;
    double loss_value;
    {
      TapeScope scope(tape);
      ParamSet merged = adamerging_apply(theta_pre, task_vectors, lambdas);
      Tensor loss = entropy_objective(merged, cfg, head_owners, batches);
      loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw std::runtime_error("train_adamerging: non-finite entropy at iteration " +
                                 std::to_string(iter));
      }
      backward(loss, tape);
    }
    opt.step();
    result.log.push_back(TrainLogRow{iter, -1, loss_value, -1.0});
  }
  result.final_entropy = probe_entropy();
  result.lambdas = lambdas;
  return result;
}

}  // namespace mergelab
