#include "treegrpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace treegrpo {

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2) {
    throw std::invalid_argument("vocab: need at least 2 tokens");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocab: duplicate token " + tokens_[i]);
    }
  }
  if (auto it = index_.find(kEndOfStepToken); it != index_.end()) {
    eos_id_ = it->second;
  }
}

Vocab Vocab::for_world(const World& world) {
  std::vector<std::string> tokens = {"<think>",  "</think>", "<search>",
                                     "</search>", "<answer>", "</answer>",
                                     kEndOfStepToken};
  tokens.insert(tokens.end(), world.entities.begin(), world.entities.end());
  tokens.insert(tokens.end(), world.relations.begin(), world.relations.end());
  Vocab vocab(std::move(tokens));
  if (vocab.size() < 8) {
    throw std::invalid_argument("vocab: agent vocabulary must have >= 8 tokens");
  }
  return vocab;
}

int Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw UnknownToken(std::string(token));
  return it->second;
}

std::optional<int> Vocab::try_id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= static_cast<int>(tokens_.size())) {
    throw UnknownToken("#" + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocab::render(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == eos_id_) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

PolicyParams zero_params(int feature_dim, const Vocab& vocab) {
  PolicyParams params;
  params.feature_dim = feature_dim;
  params.theta.assign(static_cast<std::size_t>(feature_dim) * vocab.size(),
                      0.0);
  return params;
}

FeatureEncoder::FeatureEncoder(int feature_dim, const Vocab& vocab)
    : feature_dim_(feature_dim), vocab_size_(vocab.size()) {
  if (feature_dim_ < 2) {
    throw std::invalid_argument("feature encoder: feature_dim must be >= 2");
  }
}

int FeatureEncoder::bucket(int slot, int token_id) const {
  const std::uint64_t h =
      mix_u64(0x8F1BBCDCULL + static_cast<std::uint64_t>(slot),
              static_cast<std::uint64_t>(token_id));
  const int usable = feature_dim_ - 1;
  const int range = usable / 4;
  if (range == 0) {
    // Degenerate dimensions share one hashed region across slots.
    return 1 + static_cast<int>(h % static_cast<std::uint64_t>(usable));
  }
  // Each slot owns a contiguous range, so tokens of different slots can
  // never collide; within a slot the map is exact once the range covers
  // the vocabulary and hashed otherwise.
  const int offset = 1 + (slot - 1) * range;
  if (vocab_size_ <= static_cast<std::size_t>(range)) {
    return offset + token_id;
  }
  return offset + static_cast<int>(h % static_cast<std::uint64_t>(range));
}

ContextFeatures FeatureEncoder::encode(const StepContext& ctx) const {
  ContextFeatures f;
  f.phi.assign(static_cast<std::size_t>(feature_dim_), 0.0);
  f.phi[0] = 1.0;
  for (int t : ctx.question) f.phi[bucket(kQuestion, t)] += 1.0;
  for (int t : ctx.observation) f.phi[bucket(kObservation, t)] += 1.0;
  for (int t : ctx.partial) f.phi[bucket(kPartial, t)] += 1.0;
  for (std::size_t i = 2; i < ctx.observation.size(); i += 3) {
    const int obj = ctx.observation[i];
    if (std::find(ctx.question.begin(), ctx.question.end(), obj) ==
        ctx.question.end()) {
      f.phi[bucket(kObservationObject, obj)] += 1.0;
    }
  }
  return f;
}

std::vector<double> step_logits(const PolicyParams& params,
                                const ContextFeatures& features) {
  if (params.feature_dim != static_cast<int>(features.phi.size())) {
    throw DimensionMismatch("step_logits: feature dimension mismatch");
  }
  const int vocab = params.vocab_size();
  std::vector<double> logits(static_cast<std::size_t>(vocab), 0.0);
  for (int f = 0; f < params.feature_dim; ++f) {
    const double phi = features.phi[static_cast<std::size_t>(f)];
    if (phi == 0.0) continue;
    const double* row = params.theta.data() + static_cast<std::size_t>(f) * vocab;
    for (int v = 0; v < vocab; ++v) logits[static_cast<std::size_t>(v)] += phi * row[v];
  }
  return logits;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

namespace {

void check_tokens(const PolicyParams& params, std::span<const int> token_ids) {
  const int vocab = params.vocab_size();
  for (int id : token_ids) {
    if (id < 0 || id >= vocab) throw UnknownToken("#" + std::to_string(id));
  }
}

}  // namespace

std::pair<double, std::vector<double>> logprob(const PolicyParams& params,
                                               const FeatureEncoder& encoder,
                                               StepContext ctx,
                                               std::span<const int> token_ids) {
  check_tokens(params, token_ids);
  std::vector<double> per_token;
  per_token.reserve(token_ids.size());
  double total = 0.0;
  for (int id : token_ids) {
    const auto logits = step_logits(params, encoder.encode(ctx));
    const auto logp = log_softmax(logits);
    total += logp[static_cast<std::size_t>(id)];
    per_token.push_back(logp[static_cast<std::size_t>(id)]);
    ctx.partial.push_back(id);
  }
  return {total, std::move(per_token)};
}

std::vector<double> grad_logprob(const PolicyParams& params,
                                 const FeatureEncoder& encoder, StepContext ctx,
                                 std::span<const int> token_ids) {
  check_tokens(params, token_ids);
  const int vocab = params.vocab_size();
  std::vector<double> grad(params.theta.size(), 0.0);
  for (int id : token_ids) {
    const ContextFeatures features = encoder.encode(ctx);
    const auto logits = step_logits(params, features);
    const auto logp = log_softmax(logits);
    for (int f = 0; f < params.feature_dim; ++f) {
      const double phi = features.phi[static_cast<std::size_t>(f)];
      if (phi == 0.0) continue;
      double* row = grad.data() + static_cast<std::size_t>(f) * vocab;
      for (int v = 0; v < vocab; ++v) {
        const double p = std::exp(logp[static_cast<std::size_t>(v)]);
        row[v] += phi * ((v == id ? 1.0 : 0.0) - p);
      }
    }
    ctx.partial.push_back(id);
  }
  return grad;
}

AgentStep sample_step(const PolicyParams& params, const FeatureEncoder& encoder,
                      const Vocab& vocab, StepContext ctx, RngStream& rng,
                      std::size_t max_step_tokens) {
  if (max_step_tokens < 1) {
    throw std::invalid_argument("sample_step: max_step_tokens must be >= 1");
  }
  AgentStep step;
  step.gen_token_ids = ctx.partial;  // resumed tokens, empty in the common case
  while (step.gen_token_ids.size() < max_step_tokens) {
    const auto logits = step_logits(params, encoder.encode(ctx));
    const auto logp = log_softmax(logits);
    const double draw = rng.next_double();
    double acc = 0.0;
    int picked = static_cast<int>(logp.size()) - 1;
    for (std::size_t v = 0; v < logp.size(); ++v) {
      acc += std::exp(logp[v]);
      if (draw < acc) {
        picked = static_cast<int>(v);
        break;
      }
    }
    step.gen_token_ids.push_back(picked);
    ctx.partial.push_back(picked);
    if (picked == vocab.eos_id()) break;
  }
  const std::string text = vocab.render(step.gen_token_ids);
  step.thought = extract_thought(text);
  step.action = parse_action(text);
  return step;
}

StepContext make_step_context(const Vocab& vocab, const std::string& question,
                              std::span<const AgentStep> prior_steps) {
  StepContext ctx;
  ctx.question = vocab.encode(question);
  for (auto it = prior_steps.rbegin(); it != prior_steps.rend(); ++it) {
    if (it->observation.has_value()) {
      ctx.observation = vocab.encode(*it->observation);
      break;
    }
  }
  return ctx;
}

PolicyParams format_primed_params(const FeatureEncoder& encoder,
                                  const Vocab& vocab, const World& world) {
  // What a tag-aware base model brings to the table before any training:
  // copy salient context symbols, do not repeat yourself, keep answers to a
  // single symbol, close tags, search when uninformed and answer once an
  // observation has arrived. Which symbols to trust, when to stop
  // searching and what to put in the answer stay unlearned.
  constexpr double kOpenSearch = 6.0;
  constexpr double kOpenAnswer = 3.9;
  constexpr double kAnswerWhenInformed = 0.72;  // per observation token
  constexpr double kCopyQuestion = 4.0;
  constexpr double kCopyObservationObject = 7.0;
  constexpr double kAvoidSeen = -2.5;  // reformulate, don't re-query
  constexpr double kNoRepeat = -6.0;
  constexpr double kContent = 2.0;
  constexpr double kCloseSearchBase = 9.0;
  constexpr double kCloseSearchPerToken = 1.2;
  constexpr double kCloseAnswerBase = 3.5;
  constexpr double kCloseAnswerPerToken = 10.0;
  constexpr double kEndAfterClose = 16.0;

  if ((encoder.feature_dim() - 1) / 4 < static_cast<int>(vocab.size())) {
    // The priming steers through specific buckets; under within-slot
    // hashing the weights land on shared buckets and misfire.
    throw DimensionMismatch(
        "format_primed_params: feature_dim must give every slot-token pair "
        "its own bucket (>= 1 + 4 * vocab size)");
  }
  PolicyParams params = zero_params(encoder.feature_dim(), vocab);
  const int v_size = params.vocab_size();
  auto add = [&](int feature, const std::string& token, double w) {
    params.theta[static_cast<std::size_t>(feature) * v_size + vocab.id(token)] +=
        w;
  };
  auto for_all_content = [&](auto&& fn) {
    for (const std::string& e : world.entities) fn(e);
    for (const std::string& r : world.relations) fn(r);
  };

  for_all_content([&](const std::string& t) {
    add(encoder.bucket(FeatureEncoder::kQuestion, vocab.id(t)), t,
        kCopyQuestion);
    add(encoder.bucket(FeatureEncoder::kObservation, vocab.id(t)), "<answer>",
        kAnswerWhenInformed);
    add(encoder.bucket(FeatureEncoder::kObservation, vocab.id(t)), t,
        kAvoidSeen);
    const int p = encoder.bucket(FeatureEncoder::kPartial, vocab.id(t));
    add(p, t, kNoRepeat);
    add(p, "</answer>", kCloseAnswerPerToken);
    add(p, "</search>", kCloseSearchPerToken);
  });
  for (const std::string& e : world.entities) {
    add(encoder.bucket(FeatureEncoder::kObservationObject, vocab.id(e)), e,
        kCopyObservationObject);
  }

  add(0, "<search>", kOpenSearch);
  add(0, "<answer>", kOpenAnswer);
  add(0, "<think>", -4.0);
  add(0, "</think>", -4.0);
  add(0, "</search>", -7.0);
  add(0, "</answer>", -7.0);
  add(0, kEndOfStepToken, -2.0);

  const int p_search =
      encoder.bucket(FeatureEncoder::kPartial, vocab.id("<search>"));
  const int p_answer =
      encoder.bucket(FeatureEncoder::kPartial, vocab.id("<answer>"));
  const int p_close_s =
      encoder.bucket(FeatureEncoder::kPartial, vocab.id("</search>"));
  const int p_close_a =
      encoder.bucket(FeatureEncoder::kPartial, vocab.id("</answer>"));

  // Inside an open tag: content or the matching closing tag; openers do not
  // nest and a step never ends on an unclosed tag.
  auto in_tag = [&](int row, const char* close, const char* cross_close,
                    double close_base) {
    for_all_content([&](const std::string& t) { add(row, t, kContent); });
    add(row, close, close_base);
    add(row, "<search>", -8.0);
    add(row, "<answer>", -8.0);
    add(row, cross_close, -40.0);
    add(row, kEndOfStepToken, -6.0);
  };
  in_tag(p_search, "</search>", "</answer>", kCloseSearchBase);
  in_tag(p_answer, "</answer>", "</search>", kCloseAnswerBase);
  // Answers are entity-typed; relations do not belong between answer tags.
  for (const std::string& r : world.relations) add(p_answer, r, -4.0);

  // After a closing tag the step ends; content and a second closing tag
  // stop competing (the in-tag eos penalty is still active and must be
  // overcome).
  add(p_close_s, kEndOfStepToken, kEndAfterClose);
  add(p_close_s, "</search>", -8.0);
  add(p_close_a, kEndOfStepToken, kEndAfterClose);
  add(p_close_a, "</answer>", -8.0);
  for_all_content([&](const std::string& t) {
    add(p_close_s, t, -3.0);
    add(p_close_a, t, -3.0);
  });
  return params;
}

void save_params(std::ostream& out, const PolicyParams& params,
                 const Vocab& vocab) {
  out << params.feature_dim << ' ' << vocab.size() << '\n';
  for (const std::string& tok : vocab.tokens()) out << tok << '\n';
  char buf[64];
  const int vocab_size = params.vocab_size();
  for (int f = 0; f < params.feature_dim; ++f) {
    for (int v = 0; v < vocab_size; ++v) {
      std::snprintf(buf, sizeof buf, "%.17g",
                    params.theta[static_cast<std::size_t>(f) * vocab_size + v]);
      out << buf << (v + 1 == vocab_size ? '\n' : ' ');
    }
  }
}

std::pair<PolicyParams, Vocab> load_params(std::istream& in) {
  int feature_dim = 0;
  std::size_t vocab_size = 0;
  if (!(in >> feature_dim >> vocab_size)) {
    throw std::invalid_argument("checkpoint: bad header");
  }
  std::vector<std::string> tokens(vocab_size);
  for (std::string& tok : tokens) {
    if (!(in >> tok)) throw std::invalid_argument("checkpoint: bad vocab list");
  }
  PolicyParams params;
  params.feature_dim = feature_dim;
  params.theta.resize(static_cast<std::size_t>(feature_dim) * vocab_size);
  for (double& x : params.theta) {
    if (!(in >> x)) throw std::invalid_argument("checkpoint: bad values");
  }
  return {std::move(params), Vocab(std::move(tokens))};
}

}  // namespace treegrpo
