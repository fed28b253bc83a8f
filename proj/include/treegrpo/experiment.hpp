#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "treegrpo/config.hpp"
#include "treegrpo/policy.hpp"
#include "treegrpo/rollout.hpp"

namespace treegrpo {

struct RunOptions {
  std::string out_root;  // resolved output root (already combined with env)
  int jobs = 0;          // 0 = one thread per seed, capped by hardware
};

// Runs every seed of the spec: world generation, training, and artifact
// export (metrics.csv, checkpoint.txt, world.txt, trace/advantages/ledger
// dumps of the final step), plus summary.json and manifest.json at the run
// root. Returns a process exit status.
int run_experiment(const ExperimentSpec& spec, const RunOptions& options);

struct VerifyOptions {
  std::string out_root;
  int budget_seeds = 2000;
  int equivalence_cases = 100;
  int gradient_cases = 100;
  // Test fixture: negates the K3 estimates before the nonnegativity check.
  bool inject_k3_sign_flip = false;
};

// Verification suites: the preference-equivalence checks, the tree-search
// budget law, and finite-difference validation of both gradients. Writes
// verify_report.jsonl and prints one line per check. Nonzero on failure.
int run_verify(const ExperimentSpec& spec, const VerifyOptions& options);

// Fixed world used by the verification suites.
World probe_world();

// Hand-weighted policy that emits well-formed single-entity searches at a
// steady rate and essentially never answers, so chains run to their caps.
// Used to probe the budget law with a healthy tool-call rate. The feature
// dimension is chosen so the probe's hand-set buckets do not collide with
// any bucket the question or observation slots can activate.
struct SearchProbe {
  Vocab vocab;
  FeatureEncoder encoder;
  PolicyParams params;

  PolicyView view() const { return {&params, &encoder, &vocab}; }
};

SearchProbe make_search_probe(const World& world);

// Smallest feature dimension >= min_dim for which every slot's bucket range
// covers the vocabulary, so each (slot, token) pair owns its own feature.
// Hand-weighted policies steer through specific buckets and would misfire
// under hash collisions.
int clean_feature_dim(const Vocab& vocab, int min_dim);

struct BudgetLawStats {
  double chain_cost_tokens = 0.0;      // empirical per-chain mean
  double chain_cost_tool_calls = 0.0;
  double measured_tokens = 0.0;        // per tree-search run means
  double measured_tool_calls = 0.0;
  double predicted_tokens = 0.0;
  double predicted_tool_calls = 0.0;
  double token_ratio = 0.0;            // measured / predicted
  double tool_call_ratio = 0.0;
  int seeds = 0;
};

// Monte Carlo of the expected-budget formula: measured mean ledger cost of
// seeded tree searches against trees*b + iterations*expansions*b/2 with b
// the empirical mean chain cost of the initial chains.
BudgetLawStats measure_budget_law(const TreeSearchConfig& cfg, int n_seeds,
                                  std::uint64_t base_seed);

}  // namespace treegrpo
