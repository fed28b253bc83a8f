#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "treegrpo/policy.hpp"
#include "treegrpo/rng.hpp"

namespace treegrpo {

// Binary preference setting: one shared prefix context with exactly two
// continuation categories, rewards fixed at {1, 0}. Probabilities are
// normalized within the pair.
struct BinaryNode {
  StepContext context;
  std::vector<int> win;
  std::vector<int> loss;
};

// p_win = sigmoid(logprob(win) - logprob(loss)), p_loss = 1 - p_win.
std::pair<double, double> binary_probs(const PolicyParams& params,
                                       const FeatureEncoder& encoder,
                                       const BinaryNode& node);

// sigmoid(-z) * (grad logprob(win) - grad logprob(loss)) with z = beta *
// (logprob(win) - logprob(loss)); beta scales z only. At beta = 1 this is
// p_loss * (g_win - g_loss), the Bradley-Terry pair gradient.
std::vector<double> dpo_gradient(const PolicyParams& params,
                                 const FeatureEncoder& encoder,
                                 const BinaryNode& node, double beta);

// p_win * p_loss * (g_win - g_loss): the group-relative gradient of the
// binary node in closed form.
std::vector<double> intra_gradient_closed_form(const PolicyParams& params,
                                               const FeatureEncoder& encoder,
                                               const BinaryNode& node);

// Monte Carlo estimate of the same gradient: sample a continuation from
// the pair distribution and weight its score gradient by the closed-form
// advantage (p_loss for a win, -p_win for a loss).
std::vector<double> intra_gradient_sampled(const PolicyParams& params,
                                           const FeatureEncoder& encoder,
                                           const BinaryNode& node,
                                           int n_samples, RngStream& rng);

struct EquivalenceCase {
  std::string case_id;
  double p_win = 0.0;
  double cosine = 0.0;
  double weight_ratio = 0.0;  // |intra| / |dpo|, expected to equal p_win
  bool pass = false;
};

// Evaluates one node at beta = 1: cosine of the two gradients and the
// scalar weight ratio against p_win.
EquivalenceCase check_equivalence(const PolicyParams& params,
                                  const FeatureEncoder& encoder,
                                  const BinaryNode& node, std::string case_id,
                                  double cosine_tol, double ratio_tol);

// Line-delimited records {case_id, p_win, cosine, weight_ratio, pass}.
void write_equivalence_report(std::ostream& out,
                              std::span<const EquivalenceCase> cases);

}  // namespace treegrpo
