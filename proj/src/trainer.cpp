#include "treegrpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

namespace treegrpo {

RolloutBatch build_batch(const PolicyParams& snapshot,
                         const FeatureEncoder& encoder, const Vocab& vocab,
                         const QATask& task, std::span<const Tree> trees,
                         const AdvantageMap& a_tree) {
  RolloutBatch batch;
  for (std::size_t t = 0; t < trees.size(); ++t) {
    for (NodeId leaf : trees[t].leaves()) {
      const Trajectory traj = trees[t].path_to_root(leaf);
      TrajectoryTokens item;
      item.prompt_id = traj.prompt_id;
      item.advantage = a_tree.at(LeafKey{t, leaf});
      for (std::size_t s = 0; s < traj.steps.size(); ++s) {
        StepContext ctx = make_step_context(
            vocab, task.question,
            std::span<const AgentStep>(traj.steps.data(), s));
        const std::vector<int>& ids = traj.steps[s].gen_token_ids;
        const auto [total, per_token] = logprob(snapshot, encoder, ctx, ids);
        (void)total;
        item.old_logprob.insert(item.old_logprob.end(), per_token.begin(),
                                per_token.end());
        item.ref_logprob.insert(item.ref_logprob.end(), per_token.begin(),
                                per_token.end());
        item.step_contexts.push_back(std::move(ctx));
        item.step_tokens.push_back(ids);
      }
      batch.items.push_back(std::move(item));
    }
  }
  return batch;
}

namespace {

void check_batch(const RolloutBatch& batch) {
  if (batch.items.empty()) throw MaskEmpty();
  for (const TrajectoryTokens& item : batch.items) {
    if (item.token_count() == 0) throw MaskEmpty();
  }
}

std::vector<double> flat_logprob(const PolicyParams& params,
                                 const FeatureEncoder& encoder,
                                 const TrajectoryTokens& item) {
  std::vector<double> out;
  out.reserve(item.token_count());
  for (std::size_t s = 0; s < item.step_tokens.size(); ++s) {
    const auto [total, per_token] =
        logprob(params, encoder, item.step_contexts[s], item.step_tokens[s]);
    (void)total;
    out.insert(out.end(), per_token.begin(), per_token.end());
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> importance_ratios(const PolicyParams& params,
                                                   const FeatureEncoder& encoder,
                                                   const RolloutBatch& batch) {
  check_batch(batch);
  std::vector<std::vector<double>> out;
  out.reserve(batch.items.size());
  for (const TrajectoryTokens& item : batch.items) {
    const std::vector<double> lp = flat_logprob(params, encoder, item);
    std::vector<double> ratios(lp.size());
    for (std::size_t k = 0; k < lp.size(); ++k) {
      ratios[k] = std::exp(lp[k] - item.old_logprob[k]);
    }
    out.push_back(std::move(ratios));
  }
  return out;
}

std::vector<std::vector<double>> kl_k3(const PolicyParams& params,
                                       const FeatureEncoder& encoder,
                                       const RolloutBatch& batch) {
  check_batch(batch);
  std::vector<std::vector<double>> out;
  out.reserve(batch.items.size());
  for (const TrajectoryTokens& item : batch.items) {
    const std::vector<double> lp = flat_logprob(params, encoder, item);
    std::vector<double> k3(lp.size());
    for (std::size_t k = 0; k < lp.size(); ++k) {
      const double log_u = item.ref_logprob[k] - lp[k];
      k3[k] = std::exp(log_u) - log_u - 1.0;
    }
    out.push_back(std::move(k3));
  }
  return out;
}

LossResult tree_grpo_loss(const PolicyParams& params,
                          const FeatureEncoder& encoder,
                          const RolloutBatch& batch, const TrainConfig& cfg) {
  check_batch(batch);
  const int vocab = params.vocab_size();
  LossResult res;
  res.gradient.assign(params.theta.size(), 0.0);

  const double group_inv = 1.0 / static_cast<double>(batch.items.size());
  for (const TrajectoryTokens& item : batch.items) {
    const double traj_inv =
        group_inv / static_cast<double>(item.token_count());
    const double adv = item.advantage;
    std::size_t flat = 0;
    for (std::size_t s = 0; s < item.step_tokens.size(); ++s) {
      StepContext ctx = item.step_contexts[s];
      for (int token : item.step_tokens[s]) {
        const ContextFeatures features = encoder.encode(ctx);
        const auto logits = step_logits(params, features);
        const auto logp = log_softmax(logits);
        const double lp = logp[static_cast<std::size_t>(token)];

        const double ratio = std::exp(lp - item.old_logprob[flat]);
        const double clipped =
            std::clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        const double unclipped_term = ratio * adv;
        const double clipped_term = clipped * adv;
        // min() picks the term; gradient follows the active branch and the
        // clipped branch is flat in theta whenever the clamp is binding.
        double surrogate_weight;
        double surrogate;
        if (unclipped_term <= clipped_term) {
          surrogate = unclipped_term;
          surrogate_weight = adv * ratio;
        } else {
          surrogate = clipped_term;
          surrogate_weight = 0.0;
        }

        const double log_u = item.ref_logprob[flat] - lp;
        const double u = std::exp(log_u);
        const double k3 = u - log_u - 1.0;

        res.objective += traj_inv * (surrogate - cfg.kl_beta * k3);
        res.mean_kl += traj_inv * k3;

        const double weight =
            traj_inv * (surrogate_weight - cfg.kl_beta * (1.0 - u));
        if (weight != 0.0) {
          for (int f = 0; f < params.feature_dim; ++f) {
            const double phi = features.phi[static_cast<std::size_t>(f)];
            if (phi == 0.0) continue;
            double* row =
                res.gradient.data() + static_cast<std::size_t>(f) * vocab;
            const double w = weight * phi;
            for (int v = 0; v < vocab; ++v) {
              row[v] -= w * std::exp(logp[static_cast<std::size_t>(v)]);
            }
            row[token] += w;
          }
        }
        ctx.partial.push_back(token);
        ++flat;
      }
    }
  }
  return res;
}

void score_leaves(Tree& tree, const QATask& task, double lambda_f) {
  for (NodeId leaf : tree.leaves()) {
    const Trajectory traj = tree.path_to_root(leaf);
    double score = 0.0;
    if (!traj.steps.empty() &&
        traj.steps.back().action.kind == ActionKind::Answer) {
      score = em_score(traj.steps.back().action.text, task.gold);
    }
    tree.set_leaf_reward(leaf, shaped_reward(score, traj.format_ok, lambda_f));
  }
}

namespace {

double warmup_scale(const TrainConfig& cfg, int step) {
  if (cfg.warmup_ratio <= 0.0) return 1.0;
  const double horizon = cfg.warmup_ratio * cfg.total_steps;
  if (horizon <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(step + 1) / horizon);
}

}  // namespace

TrainResult train_loop(PolicyParams init, const World& world,
                       const Vocab& vocab, const FeatureEncoder& encoder,
                       const TreeSearchConfig& tree_cfg, const TrainConfig& cfg,
                       std::uint64_t seed, const TrainHooks* hooks) {
  if (!cfg.valid()) throw std::invalid_argument("train_loop: invalid config");
  if (!tree_cfg.valid()) {
    throw std::invalid_argument("train_loop: invalid tree-search config");
  }
  if (world.tasks.empty()) {
    throw std::invalid_argument("train_loop: world has no tasks");
  }

  TrainResult result;
  result.params = std::move(init);

  for (int step = 0; step < cfg.total_steps; ++step) {
    // Reference and rollout snapshots both refresh to the current policy.
    const PolicyParams snapshot = result.params;
    const PolicyView view{&snapshot, &encoder, &vocab};
    const std::uint64_t step_seed = stream_key(
        {seed, kTrainPhase,
         static_cast<std::uint64_t>(cfg.vary_rollout_seed_per_step ? step : 0)});

    std::vector<PromptGroup> groups;
    RolloutBatch batch;
    double reward_sum = 0.0;
    double action_sum = 0.0;
    std::size_t leaf_count = 0;
    BudgetLedger used;
    for (int j = 0; j < cfg.batch_prompts; ++j) {
      const std::size_t task_index =
          (static_cast<std::size_t>(step) * cfg.batch_prompts + j) %
          world.tasks.size();
      const QATask& task = world.tasks[task_index];
      PromptGroup group;
      group.task = &task;
      group.trees = tree_search(view, world, task, tree_cfg,
                                mix_u64(step_seed, static_cast<std::uint64_t>(j)));
      for (Tree& tree : group.trees) score_leaves(tree, task, cfg.lambda_f);
      group.advantages = advantage_records(group.trees, kDefaultEpsStd);

      AdvantageMap a_tree;
      for (const AdvantageRecord& rec : group.advantages) {
        a_tree[rec.leaf] = rec.a_tree;
        reward_sum += rec.reward;
        action_sum += static_cast<double>(
            group.trees[rec.leaf.tree_index].path_to_root(rec.leaf.node).steps.size());
        ++leaf_count;
      }
      const BudgetLedger prompt_budget = budget_of(group.trees);
      used.tokens += prompt_budget.tokens;
      used.tool_calls += prompt_budget.tool_calls;

      RolloutBatch prompt_batch =
          build_batch(snapshot, encoder, vocab, task, group.trees, a_tree);
      for (TrajectoryTokens& item : prompt_batch.items) {
        batch.items.push_back(std::move(item));
      }
      groups.push_back(std::move(group));
    }

    double loss_sum = 0.0;
    double kl_sum = 0.0;
    int updates = 0;
    const double lr = cfg.lr * warmup_scale(cfg, step);
    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
      for (std::size_t begin = 0; begin < batch.items.size();
           begin += static_cast<std::size_t>(cfg.mini_batch)) {
        const std::size_t end =
            std::min(begin + static_cast<std::size_t>(cfg.mini_batch),
                     batch.items.size());
        RolloutBatch chunk;
        chunk.items.assign(batch.items.begin() + static_cast<std::ptrdiff_t>(begin),
                           batch.items.begin() + static_cast<std::ptrdiff_t>(end));
        const LossResult res =
            tree_grpo_loss(result.params, encoder, chunk, cfg);
        for (std::size_t i = 0; i < result.params.theta.size(); ++i) {
          result.params.theta[i] += lr * res.gradient[i];
        }
        loss_sum += res.objective;
        kl_sum += res.mean_kl;
        ++updates;
      }
    }

    StepMetrics metrics;
    metrics.step = step;
    metrics.mean_reward = leaf_count ? reward_sum / leaf_count : 0.0;
    metrics.mean_actions = leaf_count ? action_sum / leaf_count : 0.0;
    metrics.tokens = used.tokens;
    metrics.tool_calls = used.tool_calls;
    metrics.loss = updates ? loss_sum / updates : 0.0;
    metrics.kl = updates ? kl_sum / updates : 0.0;
    result.metrics.push_back(metrics);

    if (hooks && hooks->on_step) {
      StepSnapshot snap;
      snap.step = step;
      snap.groups = &groups;
      snap.params = &result.params;
      hooks->on_step(snap);
    }
  }
  return result;
}

void write_metrics_csv(std::ostream& out, std::span<const StepMetrics> metrics) {
  out << "step,mean_reward,mean_actions,tokens,tool_calls,loss,kl\n";
  char buf[256];
  for (const StepMetrics& m : metrics) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%zu,%zu,%.17g,%.17g",
                  m.step, m.mean_reward, m.mean_actions, m.tokens, m.tool_calls,
                  m.loss, m.kl);
    out << buf << '\n';
  }
}

}  // namespace treegrpo
