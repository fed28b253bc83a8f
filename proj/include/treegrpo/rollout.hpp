#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "treegrpo/agent.hpp"
#include "treegrpo/env.hpp"
#include "treegrpo/policy.hpp"
#include "treegrpo/rng.hpp"

namespace treegrpo {

struct BudgetCap {
  int max_tool_calls = 3;
  std::size_t max_response_tokens = 48;  // generated tokens per trajectory
};

enum class NodeGranularity { Step, Token };

struct TreeSearchConfig {
  int trees_per_prompt = 2;          // independent chains initialized per prompt
  int expansions_per_iteration = 2;  // nodes sampled per tree per iteration
  int expansion_iterations = 1;      // sequential expansion rounds
  BudgetCap caps;
  NodeGranularity granularity = NodeGranularity::Step;
  std::size_t max_step_tokens = 10;
  int top_k = 1;  // search results wrapped into an observation

  bool valid() const {
    return trees_per_prompt >= 1 && expansions_per_iteration >= 0 &&
           expansion_iterations >= 0 &&
           (expansion_iterations == 0 || expansions_per_iteration >= 1);
  }
};

// Read-only bundle of the pieces a rollout needs from the policy module.
struct PolicyView {
  const PolicyParams* params = nullptr;
  const FeatureEncoder* encoder = nullptr;
  const Vocab* vocab = nullptr;
};

struct NoExpandableNodes : std::runtime_error {
  NoExpandableNodes()
      : std::runtime_error("tree has no expandable (internal) nodes") {}
};

// One expansion target. Empty node = the virtual root: the regenerated
// trajectory starts from the bare prompt and becomes a fresh chain.
struct ExpansionSite {
  std::optional<NodeId> node;
};

// Token-level target: resume generation after token `offset` of `node`
// (offset == last index of an internal node degenerates to the step-level
// site). Sites only ever name policy-generated tokens, so branches cannot
// open inside an observation span.
struct TokenSite {
  std::optional<NodeId> node;
  std::size_t offset = 0;
};

// Completes a trajectory from a (possibly empty) non-terminal prefix.
// On Search the environment is queried and the result becomes the step's
// observation; the episode ends on Answer or when a cap is hit. Prefix
// steps are copied, not regenerated, so their cost is not paid again.
// A Search sampled after the tool budget is exhausted is recorded as a
// Malformed step and the trajectory is truncated there.
Trajectory rollout_chain(const PolicyView& policy, const World& world,
                         const QATask& task, const Trajectory& prefix,
                         const TreeSearchConfig& cfg, RngStream& rng);

// Token-granularity variant: `partial` holds the already-kept tokens of the
// step being resumed.
Trajectory rollout_chain_resume(const PolicyView& policy, const World& world,
                                const QATask& task, const Trajectory& prefix,
                                std::vector<int> partial,
                                const TreeSearchConfig& cfg, RngStream& rng);

// Candidate sites of one tree: the virtual root plus every internal node.
// Leaves are excluded: answer leaves must not be extended and truncated
// leaves have no continuation context.
std::vector<ExpansionSite> expansion_sites(const Tree& tree);

// Uniform with replacement over the tree's sites. A tree whose only nodes
// are leaves (no internal node) raises NoExpandableNodes so the caller can
// skip that tree's expansion.
std::vector<ExpansionSite> sample_expansion_nodes(const Tree& tree, int count,
                                                  RngStream& rng);

std::vector<TokenSite> token_sites(const Tree& tree);
std::vector<TokenSite> sample_token_sites(const Tree& tree, int count,
                                          RngStream& rng);

// 1 on policy-generated tokens, 0 on observation tokens, over the rendered
// stream of the trajectory (per step: generated ids then the observation).
std::vector<bool> token_mask(const Trajectory& traj, const Vocab& vocab);

// Expected tree-search cost for per-trajectory budget `b`:
// trees * b + iterations * expansions * b / 2.
double expected_budget(double trees, double expansions, double iterations,
                       double b);

// Generation cost summed over the distinct nodes of all trees.
BudgetLedger budget_of(std::span<const Tree> trees);

struct TreeSearchStats {
  int no_expandable_events = 0;  // tree-iterations skipped entirely
  int expansions_done = 0;       // successful branch insertions
};

// Initialize-then-expand search. Determinism contract: every random choice
// draws from a stream keyed as
//   chain/expansion rollout: {seed, hash(prompt_id), iteration, tree, 1+slot}
//   site sampling:           {seed, hash(prompt_id), iteration, tree, 0}
// with iteration 0 reserved for the initial chains, so results do not
// depend on execution interleaving and (N=0, L=0) trees replay the exact
// chains that M independent rollout_chain calls would produce.
std::vector<Tree> tree_search(const PolicyView& policy, const World& world,
                              const QATask& task, const TreeSearchConfig& cfg,
                              std::uint64_t seed,
                              TreeSearchStats* stats = nullptr);

// One line-delimited record per prompt:
//   {prompt_id, tokens, tool_calls, leaves, M, N, L}
void write_ledger_record(std::ostream& out, std::span<const Tree> trees,
                         const TreeSearchConfig& cfg);

}  // namespace treegrpo
