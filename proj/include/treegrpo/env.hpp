#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treegrpo/agent.hpp"

namespace treegrpo {

struct QATask {
  std::string prompt_id;
  std::string question;  // "start relation_0 ... relation_{hops-1}"
  std::string gold;      // a single entity symbol
  int hops = 1;
};

struct Fact {
  std::string subject;
  std::string relation;
  std::string object;

  std::string render() const { return subject + " " + relation + " " + object; }
};

// Deterministic synthetic multi-hop world. Entities are partitioned into
// hop_depth+1 layers and each relation maps one layer onto the next, so a
// question's relation sequence walks layer 0 to the last layer and the gold
// answer never collides with the question symbols.
struct World {
  std::uint64_t seed = 0;
  int hop_depth = 1;
  std::vector<std::string> entities;
  std::vector<std::string> relations;
  std::vector<Fact> facts;
  std::vector<QATask> tasks;
};

struct InvalidSize : std::invalid_argument {
  explicit InvalidSize(const std::string& what) : std::invalid_argument(what) {}
};

// Same inputs produce byte-identical worlds. Requires
// n_entities >= hop_depth + 1 and n_relations >= hop_depth >= 1, so every
// layer has at least one entity and one outgoing relation.
World gen_world(std::uint64_t seed, int n_entities, int n_relations,
                int hop_depth, int n_tasks);

// Rendered facts ranked by exact-symbol-match count against the whitespace
// tokens of `query`, lexicographic tie-break, zero-match facts dropped.
std::vector<std::string> search(const World& world, const std::string& query,
                                int k);

// Tag-based action parsing: exactly one well-formed <search>..</search> or
// <answer>..</answer> pair with non-empty content; anything else (stray,
// repeated or unclosed tags, empty content) is Malformed.
Action parse_action(const std::string& raw);

// Content of a single well-formed <think>..</think> pair, else "".
std::string extract_thought(const std::string& raw);

// Exact match after case-folding and trimming: 1 or 0.
double em_score(const std::string& answer, const std::string& gold);

// Appendix-style piecewise training reward: score minus the format penalty
// when the trajectory violated the tag format.
double shaped_reward(double score, bool format_ok, double lambda_f);

// Diffable text format with [entities], [facts], [tasks] sections.
std::string export_world(const World& world);
World import_world(const std::string& text);

}  // namespace treegrpo
