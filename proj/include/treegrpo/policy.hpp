#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "treegrpo/agent.hpp"
#include "treegrpo/env.hpp"
#include "treegrpo/rng.hpp"

namespace treegrpo {

struct UnknownToken : std::invalid_argument {
  explicit UnknownToken(const std::string& tok)
      : std::invalid_argument("unknown token: " + tok) {}
};

struct DimensionMismatch : std::invalid_argument {
  explicit DimensionMismatch(const std::string& what)
      : std::invalid_argument(what) {}
};

// Closed token vocabulary. Tags and the end-of-step marker are atomic
// entries; there is no sub-token parsing.
class Vocab {
 public:
  explicit Vocab(std::vector<std::string> tokens);

  // Tag tokens, <eos>, then the world's entities and relations (in fact
  // order). Enforces the full agent vocabulary (size >= 8).
  static Vocab for_world(const World& world);

  int id(std::string_view token) const;               // throws UnknownToken
  std::optional<int> try_id(std::string_view) const;
  const std::string& token(int id) const;
  int eos_id() const { return eos_id_; }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::string& text) const;  // whitespace split
  std::string render(std::span<const int> ids) const;      // eos dropped

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int eos_id_ = -1;
};

inline constexpr const char* kEndOfStepToken = "<eos>";

// Flat feature-by-token weight matrix, row-major theta[f * V + v]. The sole
// differentiable state of the policy.
struct PolicyParams {
  std::vector<double> theta;
  int feature_dim = 0;

  int vocab_size() const {
    return feature_dim == 0 ? 0 : static_cast<int>(theta.size()) / feature_dim;
  }
};

PolicyParams zero_params(int feature_dim, const Vocab& vocab);

// Generation context for one step: the question, the most recent
// observation, and the tokens already emitted within the step.
struct StepContext {
  std::vector<int> question;
  std::vector<int> observation;
  std::vector<int> partial;
};

struct ContextFeatures {
  std::vector<double> phi;
};

// Deterministic hashed token-count features. Bucket 0 is a constant bias;
// every (slot, token) pair hashes into [1, F). Slots carry the question,
// the last observation, the partial step, and the observation's object
// symbols that do not appear in the question (facts render as
// "subject relation object", so objects sit at indices 2, 5, 8, ...).
class FeatureEncoder {
 public:
  enum Slot : int {
    kQuestion = 1,
    kObservation = 2,
    kPartial = 3,
    kObservationObject = 4,
  };

  FeatureEncoder(int feature_dim, const Vocab& vocab);

  ContextFeatures encode(const StepContext& ctx) const;

  int feature_dim() const { return feature_dim_; }
  std::size_t vocab_size() const { return vocab_size_; }

  // Deterministic bucket for a (slot, token) pair; used to hand-construct
  // probe policies.
  int bucket(int slot, int token_id) const;

 private:
  int feature_dim_;
  std::size_t vocab_size_;
};

// logits[v] = sum_f theta[f, v] * phi[f]; softmax(logits) is the next-token
// distribution.
std::vector<double> step_logits(const PolicyParams& params,
                                const ContextFeatures& features);

std::vector<double> log_softmax(std::span<const double> logits);

// Exact sequence log-probability, features updated autoregressively.
// Returns the total and the per-token terms.
std::pair<double, std::vector<double>> logprob(const PolicyParams& params,
                                               const FeatureEncoder& encoder,
                                               StepContext ctx,
                                               std::span<const int> token_ids);

// Analytic score gradient sum_t phi_t (x) (onehot(token_t) - softmax_t),
// flattened like theta.
std::vector<double> grad_logprob(const PolicyParams& params,
                                 const FeatureEncoder& encoder, StepContext ctx,
                                 std::span<const int> token_ids);

// Samples tokens until end-of-step or the cap, renders them, and parses the
// action. Tokens already present in ctx.partial are kept as the step's
// prefix (token-level expansion resumes a half-finished step this way).
// The observation of a Search step is filled in by the rollout loop.
AgentStep sample_step(const PolicyParams& params, const FeatureEncoder& encoder,
                      const Vocab& vocab, StepContext ctx, RngStream& rng,
                      std::size_t max_step_tokens);

// Canonical context for the step after `prior_steps`: the question plus the
// most recent observation seen so far. Single source of truth shared by the
// rollout loop and the loss so recomputed log-probabilities match sampling.
StepContext make_step_context(const Vocab& vocab, const std::string& question,
                              std::span<const AgentStep> prior_steps);

// Training starting point analogous to a base model that has seen the tag
// grammar: steps open with <search> or <answer>, fill in world symbols,
// close the tag and stop, with all content choices left uniform. Which
// symbols to emit, when to answer, and what to copy remain unlearned.
PolicyParams format_primed_params(const FeatureEncoder& encoder,
                                  const Vocab& vocab, const World& world);

// Plain-text checkpoint: F, V, vocab list, then row-major values at 17
// significant digits (round-trip exact for doubles).
void save_params(std::ostream& out, const PolicyParams& params,
                 const Vocab& vocab);
std::pair<PolicyParams, Vocab> load_params(std::istream& in);

}  // namespace treegrpo
