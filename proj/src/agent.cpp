#include "treegrpo/agent.hpp"

#include <algorithm>
#include <ostream>

#include "json.hpp"

namespace treegrpo {

const char* action_kind_name(ActionKind kind) {
  switch (kind) {
    case ActionKind::Search: return "search";
    case ActionKind::Answer: return "answer";
    case ActionKind::Malformed: return "malformed";
  }
  return "malformed";
}

std::size_t Trajectory::gen_tokens() const {
  std::size_t n = 0;
  for (const AgentStep& s : steps) n += s.gen_token_count();
  return n;
}

int Trajectory::tool_calls() const {
  int n = 0;
  for (const AgentStep& s : steps) n += s.tool_calls();
  return n;
}

namespace {

void validate_step(const AgentStep& step) {
  const bool is_search = step.action.kind == ActionKind::Search;
  if (step.observation.has_value() != is_search) {
    throw std::invalid_argument(
        "agent step: observation must be present iff the action is Search");
  }
  if ((is_search || step.action.kind == ActionKind::Answer) &&
      step.action.text.empty()) {
    throw std::invalid_argument(
        "agent step: Search query and Answer text must be non-empty");
  }
}

}  // namespace

Trajectory append_step(Trajectory traj, AgentStep step) {
  if (traj.terminal) throw AppendToTerminal();
  validate_step(step);
  const ActionKind kind = step.action.kind;
  traj.steps.push_back(std::move(step));
  if (kind == ActionKind::Answer) traj.terminal = true;
  if (kind == ActionKind::Malformed) traj.format_ok = false;
  return traj;
}

Trajectory mark_truncated(Trajectory traj) {
  traj.terminal = true;
  traj.format_ok = false;
  return traj;
}

const TreeNode& Tree::node(NodeId id) const {
  if (id >= nodes_.size()) throw UnknownNode(id);
  return nodes_[id];
}

NodeId Tree::insert_branch(std::optional<NodeId> at, const Trajectory& suffix) {
  if (!suffix.terminal) {
    throw std::invalid_argument("insert_branch: suffix must be terminal");
  }
  if (suffix.steps.empty()) {
    throw std::invalid_argument("insert_branch: suffix has no steps");
  }
  if (at.has_value()) {
    const TreeNode& target = node(*at);
    if (target.step.action.kind == ActionKind::Answer) {
      throw ExpandAtAnswerNode();
    }
    if (target.children.empty()) {
      // Non-answer leaves are budget-truncated; there is no valid
      // continuation context past truncation.
      throw std::invalid_argument(
          "insert_branch: target is a budget-truncated leaf");
    }
  }

  std::optional<NodeId> parent = at;
  NodeId last = 0;
  for (const AgentStep& step : suffix.steps) {
    validate_step(step);
    const NodeId id = nodes_.size();
    nodes_.push_back(TreeNode{step, parent, {}});
    if (parent.has_value()) {
      nodes_[*parent].children.push_back(id);
    } else {
      root_ids_.push_back(id);
    }
    ledger_.tokens += step.gen_token_count();
    ledger_.tool_calls += static_cast<std::size_t>(step.tool_calls());
    parent = id;
    last = id;
  }
  return last;
}

Trajectory Tree::path_to_root(NodeId target) const {
  const TreeNode* cur = &node(target);
  std::vector<const AgentStep*> rev;
  rev.push_back(&cur->step);
  while (cur->parent.has_value()) {
    cur = &nodes_[*cur->parent];
    rev.push_back(&cur->step);
  }

  Trajectory traj;
  traj.prompt_id = prompt_id_;
  traj.steps.reserve(rev.size());
  for (auto it = rev.rbegin(); it != rev.rend(); ++it) {
    traj.steps.push_back(**it);
    if ((*it)->action.kind == ActionKind::Malformed) traj.format_ok = false;
  }

  if (nodes_[target].children.empty()) {
    // Leaves are terminal by construction (suffixes are terminal).
    traj.terminal = true;
    if (traj.steps.back().action.kind != ActionKind::Answer) {
      traj.format_ok = false;
    }
    auto it = leaf_rewards_.find(target);
    if (it != leaf_rewards_.end()) traj.reward = it->second;
  }
  return traj;
}

std::vector<NodeId> Tree::leaves_under(NodeId target) const {
  node(target);  // existence check
  std::vector<NodeId> out;
  std::vector<NodeId> stack{target};
  while (!stack.empty()) {
    const NodeId id = stack.back();
    stack.pop_back();
    const TreeNode& n = nodes_[id];
    if (n.children.empty()) {
      out.push_back(id);
    } else {
      for (auto it = n.children.rbegin(); it != n.children.rend(); ++it) {
        stack.push_back(*it);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<NodeId> Tree::leaves() const {
  std::vector<NodeId> out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].children.empty()) out.push_back(id);
  }
  return out;
}

void Tree::set_leaf_reward(NodeId leaf, double reward) {
  if (!is_leaf(leaf)) {
    throw std::invalid_argument("set_leaf_reward: node is not a leaf");
  }
  leaf_rewards_[leaf] = reward;
}

void write_trace(std::ostream& out, std::span<const Tree> trees) {
  std::size_t base = 0;
  for (const Tree& tree : trees) {
    for (NodeId id = 0; id < tree.node_count(); ++id) {
      const TreeNode& n = tree.node(id);
      nlohmann::json rec;
      rec["prompt_id"] = tree.prompt_id();
      rec["node_id"] = base + id;
      if (n.parent.has_value()) {
        rec["parent_id"] = base + *n.parent;
      } else {
        rec["parent_id"] = nullptr;
      }
      rec["action_kind"] = action_kind_name(n.step.action.kind);
      rec["gen_token_count"] = n.step.gen_token_count();
      rec["tool_calls"] = n.step.tool_calls();
      if (n.children.empty()) {
        auto it = tree.leaf_rewards().find(id);
        if (it != tree.leaf_rewards().end()) {
          rec["reward"] = it->second;
        } else {
          rec["reward"] = nullptr;
        }
      }
      out << rec.dump() << '\n';
    }
    base += tree.node_count();
  }
}

}  // namespace treegrpo
