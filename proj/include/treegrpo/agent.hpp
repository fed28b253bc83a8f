#pragma once

#include <cstddef>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace treegrpo {

enum class ActionKind { Search, Answer, Malformed };

const char* action_kind_name(ActionKind kind);

// Parsed agent action. `text` holds the search query, the answer text, or
// the raw step text for malformed output.
struct Action {
  ActionKind kind = ActionKind::Malformed;
  std::string text;
};

// One thought-action-observation step. `gen_token_ids` are the tokens the
// policy emitted for the step (end-of-step token included when sampled);
// the observation is environment output and is never part of them.
struct AgentStep {
  std::string thought;
  Action action;
  std::optional<std::string> observation;  // present iff action is Search
  std::vector<int> gen_token_ids;

  std::size_t gen_token_count() const { return gen_token_ids.size(); }
  int tool_calls() const { return action.kind == ActionKind::Search ? 1 : 0; }
};

// A (possibly partial) episode for one prompt. `format_ok` latches to false
// on any malformed step or on budget truncation; a trajectory that ends with
// a parsed Answer and no malformed steps keeps format_ok = true.
struct Trajectory {
  std::string prompt_id;
  std::vector<AgentStep> steps;
  bool terminal = false;
  bool format_ok = true;
  std::optional<double> reward;  // assigned by scoring, only once terminal

  // Terminal without a final Answer means the budget cap ended the episode.
  bool truncated() const {
    return terminal &&
           (steps.empty() || steps.back().action.kind != ActionKind::Answer);
  }

  std::size_t gen_tokens() const;
  int tool_calls() const;
};

struct AppendToTerminal : std::logic_error {
  AppendToTerminal() : std::logic_error("append_step: trajectory is terminal") {}
};

struct ExpandAtAnswerNode : std::logic_error {
  ExpandAtAnswerNode()
      : std::logic_error("insert_branch: target node holds an Answer action") {}
};

struct UnknownNode : std::out_of_range {
  explicit UnknownNode(std::size_t id)
      : std::out_of_range("unknown node id " + std::to_string(id)) {}
};

// Appends one step, enforcing the step and trajectory invariants.
// Answer terminates the trajectory; Malformed latches format_ok = false.
Trajectory append_step(Trajectory traj, AgentStep step);

// Marks a budget-truncated trajectory terminal with format_ok = false.
Trajectory mark_truncated(Trajectory traj);

using NodeId = std::size_t;

// Generation cost of a set of distinct nodes: tokens the policy emitted
// (observations excluded) and tool calls. Shared prefixes are counted once
// because each node is counted once.
struct BudgetLedger {
  std::size_t tokens = 0;
  std::size_t tool_calls = 0;
};

struct TreeNode {
  AgentStep step;
  std::optional<NodeId> parent;  // nullopt for roots
  std::vector<NodeId> children;
};

// Arena of step nodes for one prompt. Several roots may coexist (inserting
// at the virtual root starts a fresh chain), so the tree is a forest hung
// off the shared prompt context. Node ids are arena indices and are never
// reused. Reads are safe from many threads; writers are externally
// serialized per tree.
class Tree {
 public:
  explicit Tree(std::string prompt_id) : prompt_id_(std::move(prompt_id)) {}

  // Inserts the steps of a terminal suffix as a child chain under `at`
  // (nullopt = virtual root). Returns the id of the new leaf. Existing
  // nodes are not modified; the ledger grows only by the suffix costs.
  NodeId insert_branch(std::optional<NodeId> at, const Trajectory& suffix);

  // Reconstructs the root-to-node prefix inclusive. Terminal flags, format
  // and reward (when the node is a scored leaf) are recomputed from the
  // steps along the path.
  Trajectory path_to_root(NodeId node) const;

  // Leaf ids of the subtree rooted at `node`, ascending.
  std::vector<NodeId> leaves_under(NodeId node) const;

  // All leaf ids of the forest, ascending.
  std::vector<NodeId> leaves() const;

  bool is_leaf(NodeId id) const { return node(id).children.empty(); }
  const TreeNode& node(NodeId id) const;
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<NodeId>& root_ids() const { return root_ids_; }
  const std::string& prompt_id() const { return prompt_id_; }
  const BudgetLedger& ledger() const { return ledger_; }

  const std::map<NodeId, double>& leaf_rewards() const { return leaf_rewards_; }
  void set_leaf_reward(NodeId leaf, double reward);

 private:
  std::string prompt_id_;
  std::vector<TreeNode> nodes_;
  std::vector<NodeId> root_ids_;
  std::map<NodeId, double> leaf_rewards_;
  BudgetLedger ledger_;
};

// Line-delimited trace, one record per node:
//   {prompt_id, node_id, parent_id, action_kind, gen_token_count,
//    tool_calls, reward (leaves only)}
// Node ids of consecutive trees are offset by the preceding arena sizes so
// ids are unique within the prompt.
void write_trace(std::ostream& out, std::span<const Tree> trees);

}  // namespace treegrpo
