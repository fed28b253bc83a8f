#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "treegrpo/advantage.hpp"
#include "treegrpo/agent.hpp"
#include "treegrpo/env.hpp"
#include "treegrpo/policy.hpp"
#include "treegrpo/rollout.hpp"

namespace treegrpo {

struct TrainConfig {
  double clip_eps = 0.2;
  double kl_beta = 0.001;
  double lr = 0.05;
  double lambda_f = 0.2;
  int batch_prompts = 8;
  int mini_batch = 24;     // trajectories per update
  int inner_epochs = 1;
  int total_steps = 200;
  double warmup_ratio = 0.0;
  // When false the rollout streams of every outer step reuse the step-0
  // key, so an lr = 0 run emits bitwise-identical metrics at each step.
  bool vary_rollout_seed_per_step = true;

  bool valid() const {
    return clip_eps > 0.0 && clip_eps < 1.0 && kl_beta >= 0.0 && lr >= 0.0 &&
           batch_prompts >= 1 && mini_batch >= 1 && inner_epochs >= 1 &&
           total_steps >= 1 && warmup_ratio >= 0.0;
  }
};

struct MaskEmpty : std::invalid_argument {
  MaskEmpty() : std::invalid_argument("batch has no generated tokens") {}
};

// One root-to-leaf trajectory prepared for the loss. Only policy-generated
// tokens are stored, so observation tokens are excluded from the loss by
// construction; |H| below is the generated-token count.
struct TrajectoryTokens {
  std::string prompt_id;
  std::vector<StepContext> step_contexts;     // context at each step start
  std::vector<std::vector<int>> step_tokens;  // generated ids per step
  std::vector<double> old_logprob;  // rollout-time policy, flattened per token
  std::vector<double> ref_logprob;  // reference policy, flattened per token
  double advantage = 0.0;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : step_tokens) n += s.size();
    return n;
  }
};

struct RolloutBatch {
  std::vector<TrajectoryTokens> items;
};

// Flattens every scored leaf of the prompt's trees into batch items with
// advantages attached. `snapshot` is evaluated for both the rollout-time
// and the reference log-probabilities (they coincide when the reference is
// refreshed at the start of the step).
RolloutBatch build_batch(const PolicyParams& snapshot,
                         const FeatureEncoder& encoder, const Vocab& vocab,
                         const QATask& task, std::span<const Tree> trees,
                         const AdvantageMap& a_tree);

// exp(logprob_theta - logprob_old) per generated token, per item.
std::vector<std::vector<double>> importance_ratios(const PolicyParams& params,
                                                   const FeatureEncoder& encoder,
                                                   const RolloutBatch& batch);

// Nonnegative per-token estimate u - ln u - 1 with u = exp(ref - theta).
std::vector<std::vector<double>> kl_k3(const PolicyParams& params,
                                       const FeatureEncoder& encoder,
                                       const RolloutBatch& batch);

struct LossResult {
  double objective = 0.0;          // surrogate minus the KL penalty
  std::vector<double> gradient;    // exact, flattened like theta
  double mean_kl = 0.0;            // averaged like the surrogate term
};

// Clipped token-level surrogate with group mean 1/G over the batch items,
// per-trajectory 1/|H| normalization, and the K3 penalty applied per token
// inside the same averages. The gradient is exact: clipped-and-outside
// tokens contribute zero, ties fall to the unclipped branch.
LossResult tree_grpo_loss(const PolicyParams& params,
                          const FeatureEncoder& encoder,
                          const RolloutBatch& batch, const TrainConfig& cfg);

// Scores every leaf of the tree: EM of the final answer against the task
// gold, shaped by the format penalty.
void score_leaves(Tree& tree, const QATask& task, double lambda_f);

struct StepMetrics {
  int step = 0;
  double mean_reward = 0.0;
  double mean_actions = 0.0;
  std::size_t tokens = 0;
  std::size_t tool_calls = 0;
  double loss = 0.0;
  double kl = 0.0;
};

struct PromptGroup {
  const QATask* task = nullptr;
  std::vector<Tree> trees;
  std::vector<AdvantageRecord> advantages;
};

struct StepSnapshot {
  int step = 0;
  const std::vector<PromptGroup>* groups = nullptr;
  const PolicyParams* params = nullptr;  // after the step's updates
};

struct TrainHooks {
  std::function<void(const StepSnapshot&)> on_step;
};

struct TrainResult {
  std::vector<StepMetrics> metrics;
  PolicyParams params;
};

// Outer loop: refresh the reference, run tree search over the step's
// prompts, score leaves, estimate advantages, then ascend the objective
// over deterministic contiguous mini-batches for `inner_epochs` passes.
// Rollout streams are keyed {step_seed, ...} per the rollout module, with
// step_seed = stream_key({seed, kTrainPhase, step}). Fully reproducible.
TrainResult train_loop(PolicyParams init, const World& world,
                       const Vocab& vocab, const FeatureEncoder& encoder,
                       const TreeSearchConfig& tree_cfg, const TrainConfig& cfg,
                       std::uint64_t seed, const TrainHooks* hooks = nullptr);

inline constexpr std::uint64_t kTrainPhase = 0x7261696E;

// Comma-separated metrics: step,mean_reward,mean_actions,tokens,tool_calls,
// loss,kl.
void write_metrics_csv(std::ostream& out, std::span<const StepMetrics> metrics);

}  // namespace treegrpo
