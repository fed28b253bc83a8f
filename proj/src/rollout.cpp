#include "treegrpo/rollout.hpp"

#include <algorithm>
#include <ostream>

#include "json.hpp"

namespace treegrpo {

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const std::string& p : parts) {
    if (!out.empty()) out += ' ';
    out += p;
  }
  return out;
}

}  // namespace

Trajectory rollout_chain(const PolicyView& policy, const World& world,
                         const QATask& task, const Trajectory& prefix,
                         const TreeSearchConfig& cfg, RngStream& rng) {
  return rollout_chain_resume(policy, world, task, prefix, {}, cfg, rng);
}

Trajectory rollout_chain_resume(const PolicyView& policy, const World& world,
                                const QATask& task, const Trajectory& prefix,
                                std::vector<int> partial,
                                const TreeSearchConfig& cfg, RngStream& rng) {
  if (prefix.terminal) throw AppendToTerminal();
  Trajectory traj = prefix;
  if (traj.prompt_id.empty()) traj.prompt_id = task.prompt_id;
  int tools = traj.tool_calls();

  for (;;) {
    const std::size_t spent = traj.gen_tokens();
    if (spent + partial.size() >= cfg.caps.max_response_tokens) {
      return mark_truncated(std::move(traj));
    }
    const std::size_t step_cap =
        std::min(cfg.max_step_tokens, cfg.caps.max_response_tokens - spent);

    StepContext ctx =
        make_step_context(*policy.vocab, task.question, traj.steps);
    ctx.partial = std::move(partial);
    partial.clear();

    AgentStep step = sample_step(*policy.params, *policy.encoder, *policy.vocab,
                                 std::move(ctx), rng, step_cap);
    switch (step.action.kind) {
      case ActionKind::Search: {
        if (tools >= cfg.caps.max_tool_calls) {
          // The tool budget is spent; the search cannot execute. Record the
          // step as malformed output and end the episode.
          step.action = Action{ActionKind::Malformed,
                               policy.vocab->render(step.gen_token_ids)};
          step.observation.reset();
          traj = append_step(std::move(traj), std::move(step));
          return mark_truncated(std::move(traj));
        }
        step.observation =
            join(search(world, step.action.text, cfg.top_k));
        traj = append_step(std::move(traj), std::move(step));
        ++tools;
        break;
      }
      case ActionKind::Answer:
        return append_step(std::move(traj), std::move(step));
      case ActionKind::Malformed:
        traj = append_step(std::move(traj), std::move(step));
        break;
    }
  }
}

std::vector<ExpansionSite> expansion_sites(const Tree& tree) {
  std::vector<ExpansionSite> sites;
  sites.push_back(ExpansionSite{std::nullopt});
  for (NodeId id = 0; id < tree.node_count(); ++id) {
    if (!tree.is_leaf(id)) sites.push_back(ExpansionSite{id});
  }
  return sites;
}

std::vector<ExpansionSite> sample_expansion_nodes(const Tree& tree, int count,
                                                  RngStream& rng) {
  if (count < 1) {
    throw std::invalid_argument("sample_expansion_nodes: count must be >= 1");
  }
  const std::vector<ExpansionSite> sites = expansion_sites(tree);
  if (sites.size() <= 1) throw NoExpandableNodes();  // only the virtual root
  std::vector<ExpansionSite> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(sites[rng.below(sites.size())]);
  }
  return out;
}

std::vector<TokenSite> token_sites(const Tree& tree) {
  std::vector<TokenSite> sites;
  sites.push_back(TokenSite{std::nullopt, 0});
  for (NodeId id = 0; id < tree.node_count(); ++id) {
    const std::size_t count = tree.node(id).step.gen_token_count();
    if (count == 0) continue;
    for (std::size_t j = 0; j + 1 < count; ++j) {
      sites.push_back(TokenSite{id, j});
    }
    if (!tree.is_leaf(id)) sites.push_back(TokenSite{id, count - 1});
  }
  return sites;
}

std::vector<TokenSite> sample_token_sites(const Tree& tree, int count,
                                          RngStream& rng) {
  if (count < 1) {
    throw std::invalid_argument("sample_token_sites: count must be >= 1");
  }
  const std::vector<TokenSite> sites = token_sites(tree);
  if (sites.size() <= 1) throw NoExpandableNodes();
  std::vector<TokenSite> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    out.push_back(sites[rng.below(sites.size())]);
  }
  return out;
}

std::vector<bool> token_mask(const Trajectory& traj, const Vocab& vocab) {
  std::vector<bool> mask;
  for (const AgentStep& step : traj.steps) {
    mask.insert(mask.end(), step.gen_token_count(), true);
    if (step.observation.has_value()) {
      mask.insert(mask.end(), vocab.encode(*step.observation).size(), false);
    }
  }
  return mask;
}

double expected_budget(double trees, double expansions, double iterations,
                       double b) {
  return trees * b + iterations * expansions * b / 2.0;
}

BudgetLedger budget_of(std::span<const Tree> trees) {
  BudgetLedger total;
  for (const Tree& tree : trees) {
    for (NodeId id = 0; id < tree.node_count(); ++id) {
      const AgentStep& step = tree.node(id).step;
      total.tokens += step.gen_token_count();
      total.tool_calls += static_cast<std::size_t>(step.tool_calls());
    }
  }
  return total;
}

namespace {

Trajectory suffix_of(const Trajectory& full, std::size_t prefix_len) {
  Trajectory suffix;
  suffix.prompt_id = full.prompt_id;
  suffix.steps.assign(full.steps.begin() + static_cast<std::ptrdiff_t>(prefix_len),
                      full.steps.end());
  suffix.terminal = full.terminal;
  for (const AgentStep& s : suffix.steps) {
    if (s.action.kind == ActionKind::Malformed) suffix.format_ok = false;
  }
  return suffix;
}

// Drops the last step so the result can serve as a generation prefix for a
// resumed step.
Trajectory drop_last(Trajectory traj) {
  traj.steps.pop_back();
  traj.terminal = false;
  traj.format_ok = true;
  for (const AgentStep& s : traj.steps) {
    if (s.action.kind == ActionKind::Malformed) traj.format_ok = false;
  }
  return traj;
}

void expand_step_site(const PolicyView& policy, const World& world,
                      const QATask& task, const TreeSearchConfig& cfg,
                      Tree& tree, const ExpansionSite& site, RngStream& rng) {
  Trajectory prefix = site.node.has_value() ? tree.path_to_root(*site.node)
                                            : Trajectory{};
  const std::size_t prefix_len = prefix.steps.size();
  const Trajectory full =
      rollout_chain(policy, world, task, prefix, cfg, rng);
  tree.insert_branch(site.node, suffix_of(full, prefix_len));
}

void expand_token_site(const PolicyView& policy, const World& world,
                       const QATask& task, const TreeSearchConfig& cfg,
                       Tree& tree, const TokenSite& site, RngStream& rng) {
  if (!site.node.has_value()) {
    expand_step_site(policy, world, task, cfg, tree,
                     ExpansionSite{std::nullopt}, rng);
    return;
  }
  const TreeNode& n = tree.node(*site.node);
  const std::size_t count = n.step.gen_token_count();
  if (site.offset + 1 == count) {
    expand_step_site(policy, world, task, cfg, tree, ExpansionSite{*site.node},
                     rng);
    return;
  }
  // Resume inside the node's step: keep tokens [0, offset], regenerate the
  // rest, and hang the new branch off the node's parent.
  Trajectory prefix = drop_last(tree.path_to_root(*site.node));
  const std::size_t prefix_len = prefix.steps.size();
  std::vector<int> partial(n.step.gen_token_ids.begin(),
                           n.step.gen_token_ids.begin() +
                               static_cast<std::ptrdiff_t>(site.offset + 1));
  const Trajectory full = rollout_chain_resume(policy, world, task, prefix,
                                               std::move(partial), cfg, rng);
  tree.insert_branch(n.parent, suffix_of(full, prefix_len));
}

}  // namespace

std::vector<Tree> tree_search(const PolicyView& policy, const World& world,
                              const QATask& task, const TreeSearchConfig& cfg,
                              std::uint64_t seed, TreeSearchStats* stats) {
  if (!cfg.valid()) {
    throw std::invalid_argument("tree_search: invalid config");
  }
  const std::uint64_t pid = hash_string(task.prompt_id);

  std::vector<Tree> trees;
  trees.reserve(static_cast<std::size_t>(cfg.trees_per_prompt));
  for (int i = 0; i < cfg.trees_per_prompt; ++i) {
    RngStream rng(stream_key({seed, pid, 0, static_cast<std::uint64_t>(i), 1}));
    Tree tree(task.prompt_id);
    tree.insert_branch(std::nullopt,
                       rollout_chain(policy, world, task,
                                     Trajectory{}, cfg, rng));
    trees.push_back(std::move(tree));
  }

  for (int iter = 1; iter <= cfg.expansion_iterations; ++iter) {
    for (int i = 0; i < cfg.trees_per_prompt; ++i) {
      Tree& tree = trees[static_cast<std::size_t>(i)];
      RngStream sample_rng(stream_key({seed, pid, static_cast<std::uint64_t>(iter),
                                       static_cast<std::uint64_t>(i), 0}));
      if (cfg.granularity == NodeGranularity::Step) {
        std::vector<ExpansionSite> sites;
        try {
          sites = sample_expansion_nodes(tree, cfg.expansions_per_iteration,
                                         sample_rng);
        } catch (const NoExpandableNodes&) {
          if (stats) ++stats->no_expandable_events;
          continue;
        }
        for (int j = 0; j < cfg.expansions_per_iteration; ++j) {
          RngStream rng(stream_key({seed, pid, static_cast<std::uint64_t>(iter),
                                    static_cast<std::uint64_t>(i),
                                    static_cast<std::uint64_t>(1 + j)}));
          expand_step_site(policy, world, task, cfg, tree,
                           sites[static_cast<std::size_t>(j)], rng);
          if (stats) ++stats->expansions_done;
        }
      } else {
        std::vector<TokenSite> sites;
        try {
          sites = sample_token_sites(tree, cfg.expansions_per_iteration,
                                     sample_rng);
        } catch (const NoExpandableNodes&) {
          if (stats) ++stats->no_expandable_events;
          continue;
        }
        for (int j = 0; j < cfg.expansions_per_iteration; ++j) {
          RngStream rng(stream_key({seed, pid, static_cast<std::uint64_t>(iter),
                                    static_cast<std::uint64_t>(i),
                                    static_cast<std::uint64_t>(1 + j)}));
          expand_token_site(policy, world, task, cfg, tree,
                            sites[static_cast<std::size_t>(j)], rng);
          if (stats) ++stats->expansions_done;
        }
      }
    }
  }
  return trees;
}

void write_ledger_record(std::ostream& out, std::span<const Tree> trees,
                         const TreeSearchConfig& cfg) {
  if (trees.empty()) return;
  const BudgetLedger total = budget_of(trees);
  std::size_t leaves = 0;
  for (const Tree& tree : trees) leaves += tree.leaves().size();
  nlohmann::json rec;
  rec["prompt_id"] = trees.front().prompt_id();
  rec["tokens"] = total.tokens;
  rec["tool_calls"] = total.tool_calls;
  rec["leaves"] = leaves;
  rec["M"] = cfg.trees_per_prompt;
  rec["N"] = cfg.expansions_per_iteration;
  rec["L"] = cfg.expansion_iterations;
  out << rec.dump() << '\n';
}

}  // namespace treegrpo
