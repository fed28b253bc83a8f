#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "treegrpo/rollout.hpp"
#include "treegrpo/trainer.hpp"

namespace treegrpo {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct WorldParams {
  std::uint64_t seed = 1;
  int n_entities = 12;
  int n_relations = 4;
  int hop_depth = 2;
  int n_tasks = 24;
};

enum class Variant { Tree, Chain, TokenTree };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

// Everything a run needs: world parameters, tree-search and training
// configs, the variant, the seed list and the output directory. The chain
// variant forces zero expansions (plain grouped chains).
struct ExperimentSpec {
  WorldParams world;
  int feature_dim = 64;
  TreeSearchConfig rollout;
  TrainConfig train;
  Variant variant = Variant::Tree;
  std::vector<std::uint64_t> seeds = {1};
  std::string output_dir = "out";

  // Applies variant constraints and validates; throws ConfigError with the
  // offending field name.
  void finalize();
};

// Flat key-value sections named after the modules:
//   [env-sim] [policy] [rollout] [trainer] [experiment]
// Unknown sections or keys are hard errors.
ExperimentSpec parse_config(const std::string& text);
ExperimentSpec load_config(const std::string& path);

}  // namespace treegrpo
