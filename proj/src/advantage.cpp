#include "treegrpo/advantage.hpp"

#include <cmath>
#include <ostream>

#include "json.hpp"

namespace treegrpo {

std::vector<double> group_relative(std::span<const double> rewards,
                                   double eps_std) {
  if (rewards.empty()) throw EmptyGroup();
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (std_dev < eps_std) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = (rewards[i] - mean) / std_dev;
  }
  return out;
}

namespace {

double leaf_reward_or_throw(const Tree& tree, NodeId leaf) {
  auto it = tree.leaf_rewards().find(leaf);
  if (it == tree.leaf_rewards().end()) throw UnscoredLeaf(leaf);
  return it->second;
}

}  // namespace

AdvantageMap intra_tree(std::span<const Tree> trees, double eps_std) {
  AdvantageMap out;
  for (std::size_t t = 0; t < trees.size(); ++t) {
    const std::vector<NodeId> leaves = trees[t].leaves();
    std::vector<double> rewards;
    rewards.reserve(leaves.size());
    for (NodeId leaf : leaves) {
      rewards.push_back(leaf_reward_or_throw(trees[t], leaf));
    }
    const std::vector<double> adv = group_relative(rewards, eps_std);
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      out[LeafKey{t, leaves[i]}] = adv[i];
    }
  }
  return out;
}

AdvantageMap inter_tree(std::span<const Tree> trees, double eps_std) {
  std::vector<LeafKey> keys;
  std::vector<double> rewards;
  for (std::size_t t = 0; t < trees.size(); ++t) {
    for (NodeId leaf : trees[t].leaves()) {
      keys.push_back(LeafKey{t, leaf});
      rewards.push_back(leaf_reward_or_throw(trees[t], leaf));
    }
  }
  const std::vector<double> adv = group_relative(rewards, eps_std);
  AdvantageMap out;
  for (std::size_t i = 0; i < keys.size(); ++i) out[keys[i]] = adv[i];
  return out;
}

AdvantageMap combined(const AdvantageMap& intra, const AdvantageMap& inter) {
  if (intra.size() != inter.size()) throw KeyMismatch();
  AdvantageMap out;
  for (const auto& [key, a] : intra) {
    auto it = inter.find(key);
    if (it == inter.end()) throw KeyMismatch();
    out[key] = a + it->second;
  }
  return out;
}

std::vector<AdvantageRecord> advantage_records(std::span<const Tree> trees,
                                               double eps_std) {
  const AdvantageMap intra = intra_tree(trees, eps_std);
  const AdvantageMap inter = inter_tree(trees, eps_std);
  const AdvantageMap total = combined(intra, inter);
  std::vector<AdvantageRecord> out;
  out.reserve(total.size());
  for (const auto& [key, a_tree] : total) {
    AdvantageRecord rec;
    rec.leaf = key;
    rec.reward = trees[key.tree_index].leaf_rewards().at(key.node);
    rec.a_intra = intra.at(key);
    rec.a_inter = inter.at(key);
    rec.a_tree = a_tree;
    out.push_back(rec);
  }
  return out;
}

void write_advantages(std::ostream& out, std::span<const Tree> trees,
                      std::span<const AdvantageRecord> records) {
  std::vector<std::size_t> base(trees.size() + 1, 0);
  for (std::size_t t = 0; t < trees.size(); ++t) {
    base[t + 1] = base[t] + trees[t].node_count();
  }
  for (const AdvantageRecord& rec : records) {
    nlohmann::json line;
    line["prompt_id"] = trees[rec.leaf.tree_index].prompt_id();
    line["leaf_id"] = base[rec.leaf.tree_index] + rec.leaf.node;
    line["reward"] = rec.reward;
    line["a_intra"] = rec.a_intra;
    line["a_inter"] = rec.a_inter;
    line["a_tree"] = rec.a_tree;
    out << line.dump() << '\n';
  }
}

}  // namespace treegrpo
