#pragma once

#include <compare>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "treegrpo/agent.hpp"

namespace treegrpo {

struct EmptyGroup : std::invalid_argument {
  EmptyGroup() : std::invalid_argument("group_relative: empty reward group") {}
};

struct UnscoredLeaf : std::logic_error {
  explicit UnscoredLeaf(NodeId leaf)
      : std::logic_error("leaf " + std::to_string(leaf) + " has no reward") {}
};

struct KeyMismatch : std::invalid_argument {
  KeyMismatch() : std::invalid_argument("combined: advantage key sets differ") {}
};

inline constexpr double kDefaultEpsStd = 1e-8;

// (r_i - mean) / population std; all zeros when std < eps_std.
std::vector<double> group_relative(std::span<const double> rewards,
                                   double eps_std);

// Leaves of different trees share arena indices, so map keys carry the tree.
struct LeafKey {
  std::size_t tree_index = 0;
  NodeId node = 0;
  auto operator<=>(const LeafKey&) const = default;
};

using AdvantageMap = std::map<LeafKey, double>;

// Group-relative advantages per tree, over that tree's leaves only.
AdvantageMap intra_tree(std::span<const Tree> trees, double eps_std);

// Group-relative advantages over the union of all leaves of the prompt's
// trees.
AdvantageMap inter_tree(std::span<const Tree> trees, double eps_std);

// Elementwise sum; the key sets must coincide.
AdvantageMap combined(const AdvantageMap& intra, const AdvantageMap& inter);

struct AdvantageRecord {
  LeafKey leaf;
  double reward = 0;
  double a_intra = 0;
  double a_inter = 0;
  double a_tree = 0;  // a_intra + a_inter exactly
};

std::vector<AdvantageRecord> advantage_records(std::span<const Tree> trees,
                                               double eps_std);

// Line-delimited dump, one record per leaf:
//   {prompt_id, leaf_id, reward, a_intra, a_inter, a_tree}
// leaf_id uses the same per-prompt node-id offsets as the trace export.
void write_advantages(std::ostream& out, std::span<const Tree> trees,
                      std::span<const AdvantageRecord> records);

}  // namespace treegrpo
