#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support/builders.hpp"
#include "treegrpo/experiment.hpp"
#include "treegrpo/rollout.hpp"

using namespace treegrpo;
using namespace treegrpo::testing;

namespace {

struct Fixture {
  World world = probe_world();
  SearchProbe probe = make_search_probe(world);
  const Vocab& vocab = probe.vocab;
  const FeatureEncoder& encoder = probe.encoder;
  PolicyParams uniform = zero_params(probe.encoder.feature_dim(), probe.vocab);

  PolicyView probe_view() const { return probe.view(); }
  PolicyView uniform_view() const { return {&uniform, &encoder, &vocab}; }

  // Forces "<answer> e0 </answer> <eos>" with overwhelming probability,
  // with its own collision-free encoder.
  struct BiasedPolicy {
    FeatureEncoder encoder;
    PolicyParams params;
  };
  BiasedPolicy answer_biased() const {
    FeatureEncoder enc(clean_feature_dim(vocab, 64), vocab);
    PolicyParams params = zero_params(enc.feature_dim(), vocab);
    const int v = params.vocab_size();
    auto boost = [&](int feature, const std::string& token, double w) {
      params.theta[static_cast<std::size_t>(feature) * v + vocab.id(token)] = w;
    };
    boost(0, "<answer>", 20.0);
    boost(enc.bucket(FeatureEncoder::kPartial, vocab.id("<answer>")), "e0",
          32.0);
    boost(enc.bucket(FeatureEncoder::kPartial, vocab.id("e0")), "</answer>",
          44.0);
    boost(enc.bucket(FeatureEncoder::kPartial, vocab.id("</answer>")),
          kEndOfStepToken, 56.0);
    return BiasedPolicy{std::move(enc), std::move(params)};
  }

  TreeSearchConfig config(int m, int n, int l) const {
    TreeSearchConfig cfg;
    cfg.trees_per_prompt = m;
    cfg.expansions_per_iteration = n;
    cfg.expansion_iterations = l;
    cfg.caps.max_tool_calls = 8;
    cfg.caps.max_response_tokens = 80;
    cfg.max_step_tokens = 10;
    cfg.top_k = 1;
    return cfg;
  }
};

}  // namespace

TEST_CASE("rollout_chain basics") {
  Fixture fx;
  const QATask& task = fx.world.tasks[0];
  const TreeSearchConfig cfg = fx.config(1, 0, 0);

  SUBCASE("answer-biased policy yields a one-step terminal trajectory") {
    const Fixture::BiasedPolicy biased = fx.answer_biased();
    const PolicyView view{&biased.params, &biased.encoder, &fx.vocab};
    RngStream rng(1);
    const Trajectory traj = rollout_chain(view, fx.world, task, {}, cfg, rng);
    CHECK(traj.steps.size() == 1);
    CHECK(traj.terminal);
    CHECK(traj.tool_calls() == 0);
    CHECK(traj.steps[0].action.kind == ActionKind::Answer);
  }

  SUBCASE("prefix steps are preserved verbatim") {
    Trajectory prefix;
    prefix.prompt_id = task.prompt_id;
    prefix = append_step(std::move(prefix),
                         search_step("e0 r0", "e0 r0 e5", {42, 43, 44}));
    RngStream rng(2);
    const Trajectory traj =
        rollout_chain(fx.probe_view(), fx.world, task, prefix, cfg, rng);
    REQUIRE(traj.steps.size() >= 1);
    CHECK(traj.steps[0].gen_token_ids == std::vector<int>{42, 43, 44});
    CHECK(traj.steps[0].action.text == "e0 r0");
    CHECK(traj.terminal);
  }

  SUBCASE("terminal prefixes are rejected") {
    Trajectory done;
    done = append_step(std::move(done), answer_step("a"));
    RngStream rng(3);
    CHECK_THROWS_AS(rollout_chain(fx.probe_view(), fx.world, task, done, cfg, rng),
                    AppendToTerminal);
  }
}

TEST_CASE("tool-call cap holds over seeded rollouts") {
  Fixture fx;
  TreeSearchConfig cfg = fx.config(1, 0, 0);
  cfg.caps.max_tool_calls = 3;
  cfg.caps.max_response_tokens = 200;  // tokens never bind here
  for (int seed = 0; seed < 1000; ++seed) {
    RngStream rng(stream_key({8, static_cast<std::uint64_t>(seed)}));
    const Trajectory traj = rollout_chain(
        fx.probe_view(), fx.world, fx.world.tasks[seed % fx.world.tasks.size()],
        {}, cfg, rng);
    CHECK(traj.tool_calls() <= 3);
    CHECK(traj.terminal);
  }
}

TEST_CASE("tree_search leaf counts match the rollout-count law") {
  Fixture fx;
  const QATask& task = fx.world.tasks[1];

  SUBCASE("two trees, two expansions, one iteration") {
    const auto trees = tree_search(fx.probe_view(), fx.world, task,
                                   fx.config(2, 2, 1), 501);
    REQUIRE(trees.size() == 2);
    std::size_t leaves = 0;
    for (const Tree& tree : trees) {
      CHECK(tree.leaves().size() == 3);  // evenly distributed
      leaves += tree.leaves().size();
    }
    CHECK(leaves == 6);
  }
  SUBCASE("chains only") {
    const auto trees = tree_search(fx.probe_view(), fx.world, task,
                                   fx.config(4, 0, 0), 502);
    REQUIRE(trees.size() == 4);
    for (const Tree& tree : trees) {
      CHECK(tree.leaves().size() == 1);
      CHECK(tree.root_ids().size() == 1);
      // A chain shares no prefix: ledger equals the full path cost.
      CHECK(tree.ledger().tokens ==
            tree.path_to_root(tree.leaves().front()).gen_tokens());
    }
  }
  SUBCASE("single tree") {
    const auto trees = tree_search(fx.probe_view(), fx.world, task,
                                   fx.config(1, 2, 1), 503);
    REQUIRE(trees.size() == 1);
    CHECK(trees[0].leaves().size() == 3);
  }
}

TEST_CASE("random configurations obey the leaf-count accounting") {
  Fixture fx;
  RngStream rng(607);
  for (int c = 0; c < 15; ++c) {
    const int m = 1 + static_cast<int>(rng.below(4));
    const int l = static_cast<int>(rng.below(3));
    const int n = l == 0 ? static_cast<int>(rng.below(4))
                         : 1 + static_cast<int>(rng.below(3));
    const QATask& task = fx.world.tasks[rng.below(fx.world.tasks.size())];
    TreeSearchStats stats;
    const auto trees = tree_search(fx.probe_view(), fx.world, task,
                                   fx.config(m, n, l), rng.next_u64(), &stats);
    std::size_t leaves = 0;
    for (const Tree& tree : trees) leaves += tree.leaves().size();
    if (stats.no_expandable_events == 0) {
      CHECK(leaves == static_cast<std::size_t>(m * (l * n + 1)));
    } else {
      CHECK(leaves == static_cast<std::size_t>(m + stats.expansions_done));
    }
    // The arena ledgers agree with the recomputed cost.
    BudgetLedger sum;
    for (const Tree& tree : trees) {
      sum.tokens += tree.ledger().tokens;
      sum.tool_calls += tree.ledger().tool_calls;
    }
    const BudgetLedger recomputed = budget_of(trees);
    CHECK(sum.tokens == recomputed.tokens);
    CHECK(sum.tool_calls == recomputed.tool_calls);
  }
}

TEST_CASE("trees without internal nodes skip their expansions") {
  Fixture fx;
  const Fixture::BiasedPolicy biased = fx.answer_biased();
  const PolicyView view{&biased.params, &biased.encoder, &fx.vocab};
  TreeSearchStats stats;
  // Immediate answers give single-node trees: nothing to expand.
  const auto trees = tree_search(view, fx.world, fx.world.tasks[0],
                                 fx.config(1, 2, 1), 777, &stats);
  REQUIRE(trees.size() == 1);
  CHECK(trees[0].node_count() == 1);
  CHECK(stats.no_expandable_events == 1);
  CHECK(stats.expansions_done == 0);
  CHECK(trees[0].leaves().size() == 1);  // M + successful expansions
}

TEST_CASE("expansion-site sampling") {
  Tree tree("p");
  tree.insert_branch(std::nullopt, make_chain("p", 2));  // depth-3 chain

  SUBCASE("uniform over the root context and both internal nodes") {
    RngStream rng(11);
    std::map<std::size_t, int> counts;  // 0 = virtual root, 1 + node id
    const int draws = 10000;
    const auto sites = sample_expansion_nodes(tree, draws, rng);
    for (const ExpansionSite& site : sites) {
      counts[site.node.has_value() ? 1 + *site.node : 0]++;
    }
    REQUIRE(counts.size() == 3);
    const double expect = draws / 3.0;
    const double sigma = std::sqrt(draws * (1.0 / 3.0) * (2.0 / 3.0));
    for (const auto& [key, count] : counts) {
      CHECK(std::abs(count - expect) <= 3.0 * sigma);
    }
  }
  SUBCASE("deterministic under a fixed seed") {
    RngStream a(12);
    RngStream b(12);
    const auto sa = sample_expansion_nodes(tree, 32, a);
    const auto sb = sample_expansion_nodes(tree, 32, b);
    for (std::size_t i = 0; i < sa.size(); ++i) {
      CHECK(sa[i].node == sb[i].node);
    }
  }
  SUBCASE("answer-only trees have nothing to expand") {
    Tree lone("p");
    Trajectory only;
    only = append_step(std::move(only), answer_step("a"));
    lone.insert_branch(std::nullopt, only);
    RngStream rng(13);
    CHECK_THROWS_AS(sample_expansion_nodes(lone, 2, rng), NoExpandableNodes);
  }
}

TEST_CASE("token_mask") {
  Fixture fx;
  SUBCASE("no observations means all ones") {
    Trajectory traj;
    traj = append_step(std::move(traj), malformed_step("x", {1, 2, 3}));
    traj = append_step(std::move(traj), answer_step("a", {4, 5}));
    const auto mask = token_mask(traj, fx.vocab);
    CHECK(mask.size() == 5);
    CHECK(std::count(mask.begin(), mask.end(), true) == 5);
  }
  SUBCASE("observation tokens are masked out") {
    Trajectory traj;
    traj = append_step(std::move(traj),
                       search_step("q", "e0 r0 e5 r1 e9", {1, 2, 3, 4}));
    const auto mask = token_mask(traj, fx.vocab);
    CHECK(mask.size() == 9);
    CHECK(std::count(mask.begin(), mask.end(), true) == 4);
    for (std::size_t i = 4; i < 9; ++i) CHECK_FALSE(mask[i]);
  }
}

TEST_CASE("expected_budget formula") {
  CHECK(expected_budget(1, 2, 1, 1.0) == 2.0);
  CHECK(expected_budget(2, 0, 0, 3.5) == 7.0);
  CHECK(expected_budget(2, 2, 1, 1.0) == 3.0);
}

TEST_CASE("budget_of sums distinct nodes once") {
  SUBCASE("three-step chain") {
    std::vector<Tree> trees;
    trees.emplace_back("p");
    Trajectory chain;
    chain = append_step(std::move(chain),
                        search_step("a", "obs", std::vector<int>(10, 1)));
    chain = append_step(std::move(chain),
                        search_step("b", "obs", std::vector<int>(10, 2)));
    chain = append_step(std::move(chain),
                        answer_step("c", std::vector<int>(10, 3)));
    trees[0].insert_branch(std::nullopt, chain);
    const BudgetLedger ledger = budget_of(trees);
    CHECK(ledger.tokens == 30);
    CHECK(ledger.tool_calls == 2);
  }
  SUBCASE("a shared prefix costs less than two full chains") {
    Fixture fx;
    const QATask& task = fx.world.tasks[2];
    const auto trees = tree_search(fx.probe_view(), fx.world, task,
                                   fx.config(1, 1, 1), 881);
    REQUIRE(trees[0].leaves().size() == 2);
    std::size_t paths = 0;
    bool shares_prefix = false;
    for (NodeId leaf : trees[0].leaves()) {
      const Trajectory traj = trees[0].path_to_root(leaf);
      paths += traj.gen_tokens();
      shares_prefix |= trees[0].node(leaf).parent.has_value();
    }
    const BudgetLedger ledger = budget_of(trees);
    if (shares_prefix && trees[0].root_ids().size() == 1) {
      CHECK(ledger.tokens < paths);
    } else {
      CHECK(ledger.tokens <= paths);
    }
  }
}

TEST_CASE("budget law Monte Carlo (reduced)") {
  TreeSearchConfig cfg;
  cfg.trees_per_prompt = 2;
  cfg.expansions_per_iteration = 2;
  cfg.expansion_iterations = 1;
  cfg.caps.max_tool_calls = 6;
  cfg.caps.max_response_tokens = 60;
  cfg.max_step_tokens = 10;
  cfg.top_k = 1;
  const BudgetLawStats stats = measure_budget_law(cfg, 300, 12345);
  CHECK(stats.token_ratio > 0.9);
  CHECK(stats.token_ratio < 1.1);
  CHECK(stats.tool_call_ratio > 0.9);
  CHECK(stats.tool_call_ratio < 1.1);
}

TEST_CASE("zero-expansion tree search replays independent chains") {
  Fixture fx;
  const QATask& task = fx.world.tasks[3];
  const TreeSearchConfig cfg = fx.config(3, 0, 0);
  const std::uint64_t seed = 9001;
  const auto trees = tree_search(fx.probe_view(), fx.world, task, cfg, seed);

  const std::uint64_t pid = hash_string(task.prompt_id);
  for (int i = 0; i < 3; ++i) {
    RngStream rng(stream_key({seed, pid, 0, static_cast<std::uint64_t>(i), 1}));
    const Trajectory chain =
        rollout_chain(fx.probe_view(), fx.world, task, {}, cfg, rng);
    const Tree& tree = trees[static_cast<std::size_t>(i)];
    const Trajectory replay = tree.path_to_root(tree.leaves().front());
    REQUIRE(replay.steps.size() == chain.steps.size());
    for (std::size_t s = 0; s < chain.steps.size(); ++s) {
      CHECK(replay.steps[s].gen_token_ids == chain.steps[s].gen_token_ids);
      CHECK(replay.steps[s].action.text == chain.steps[s].action.text);
    }
  }
}

namespace {

struct Stream {
  std::vector<int> tokens;
  std::vector<bool> mask;
};

Stream rendered_stream(const Tree& tree, NodeId leaf, const Vocab& vocab) {
  Stream out;
  const Trajectory traj = tree.path_to_root(leaf);
  for (const AgentStep& step : traj.steps) {
    out.tokens.insert(out.tokens.end(), step.gen_token_ids.begin(),
                      step.gen_token_ids.end());
    out.mask.insert(out.mask.end(), step.gen_token_count(), true);
    if (step.observation.has_value()) {
      const auto obs = vocab.encode(*step.observation);
      out.tokens.insert(out.tokens.end(), obs.begin(), obs.end());
      out.mask.insert(out.mask.end(), obs.size(), false);
    }
  }
  return out;
}

// Structural scan: the first position where two sibling branches diverge
// must be a policy-generated token in both streams.
bool branch_points_generated(const Tree& tree, const Vocab& vocab) {
  for (NodeId id = 0; id < tree.node_count(); ++id) {
    const auto& children = tree.node(id).children;
    for (std::size_t a = 0; a + 1 < children.size(); ++a) {
      for (std::size_t b = a + 1; b < children.size(); ++b) {
        for (NodeId u : tree.leaves_under(children[a])) {
          for (NodeId v : tree.leaves_under(children[b])) {
            const Stream su = rendered_stream(tree, u, vocab);
            const Stream sv = rendered_stream(tree, v, vocab);
            std::size_t d = 0;
            while (d < su.tokens.size() && d < sv.tokens.size() &&
                   su.tokens[d] == sv.tokens[d]) {
              ++d;
            }
            if (d == su.tokens.size() && d == sv.tokens.size()) continue;
            if (d == su.tokens.size() || d == sv.tokens.size()) return false;
            if (!su.mask[d] || !sv.mask[d]) return false;
          }
        }
      }
    }
  }
  return true;
}

}  // namespace

TEST_CASE("token-granularity trees never branch inside observations") {
  Fixture fx;
  int branched = 0;
  for (int seed = 0; seed < 60; ++seed) {
    TreeSearchConfig cfg = fx.config(2, 2, 1);
    cfg.granularity = NodeGranularity::Token;
    const QATask& task = fx.world.tasks[seed % fx.world.tasks.size()];
    const auto trees = tree_search(fx.probe_view(), fx.world, task, cfg,
                                   stream_key({31, static_cast<std::uint64_t>(seed)}));
    for (const Tree& tree : trees) {
      CHECK(branch_points_generated(tree, fx.vocab));
      for (NodeId id = 0; id < tree.node_count(); ++id) {
        if (tree.node(id).children.size() > 1) ++branched;
      }
    }
  }
  CHECK(branched > 0);  // the scan saw real branch points
}

TEST_CASE("ledger record format") {
  Fixture fx;
  const TreeSearchConfig cfg = fx.config(2, 2, 1);
  const auto trees = tree_search(fx.probe_view(), fx.world, fx.world.tasks[0],
                                 cfg, 4141);
  std::ostringstream out;
  write_ledger_record(out, trees, cfg);
  const auto rec = nlohmann::json::parse(out.str());
  for (const char* key :
       {"prompt_id", "tokens", "tool_calls", "leaves", "M", "N", "L"}) {
    CHECK(rec.contains(key));
  }
  CHECK(rec["M"] == 2);
  CHECK(rec["N"] == 2);
  CHECK(rec["L"] == 1);
  CHECK(rec["leaves"] == 6);
  CHECK(rec["tokens"] == budget_of(trees).tokens);
}

TEST_CASE("format-primed starting policy explores the tag grammar") {
  Fixture fx;
  const FeatureEncoder encoder(clean_feature_dim(fx.vocab, 64), fx.vocab);
  const PolicyParams primed =
      format_primed_params(encoder, fx.vocab, fx.world);
  const PolicyView view{&primed, &encoder, &fx.vocab};
  const TreeSearchConfig cfg = fx.config(1, 0, 0);

  int searches = 0;
  int answers = 0;
  int total_steps = 0;
  int answered_episodes = 0;
  for (int seed = 0; seed < 300; ++seed) {
    RngStream rng(stream_key({21ull, static_cast<std::uint64_t>(seed)}));
    const Trajectory traj = rollout_chain(
        view, fx.world, fx.world.tasks[seed % fx.world.tasks.size()], {}, cfg,
        rng);
    for (const AgentStep& step : traj.steps) {
      ++total_steps;
      searches += step.action.kind == ActionKind::Search;
      answers += step.action.kind == ActionKind::Answer;
    }
    answered_episodes += !traj.truncated();
  }
  // Healthy starting mix: plenty of well-formed searches, episodes that
  // mostly end in an answer, no collapse into any single action.
  CHECK(searches > total_steps / 4);
  CHECK(answers > 0);
  CHECK(answered_episodes > 200);
}

TEST_CASE("rollout_chain_resume keeps the partial step tokens") {
  Fixture fx;
  const QATask& task = fx.world.tasks[0];
  const TreeSearchConfig cfg = fx.config(1, 0, 0);
  const std::vector<int> partial = {fx.vocab.id("<search>"),
                                    fx.vocab.id("e0")};
  RngStream rng(17);
  const Trajectory traj = rollout_chain_resume(fx.probe_view(), fx.world, task,
                                               {}, partial, cfg, rng);
  REQUIRE(!traj.steps.empty());
  const std::vector<int>& first = traj.steps[0].gen_token_ids;
  REQUIRE(first.size() >= partial.size());
  CHECK(std::equal(partial.begin(), partial.end(), first.begin()));
  CHECK(traj.terminal);
}

TEST_CASE("token sites resume half-finished steps") {
  Fixture fx;
  Tree tree("p");
  tree.insert_branch(std::nullopt, make_chain("p", 2));
  RngStream rng(71);
  const auto sites = sample_token_sites(tree, 64, rng);
  bool mid_step = false;
  for (const TokenSite& site : sites) {
    if (site.node.has_value()) {
      const std::size_t count = tree.node(*site.node).step.gen_token_count();
      CHECK(site.offset < count);
      if (tree.is_leaf(*site.node)) {
        // Leaves may only be re-entered mid-step, never extended whole.
        CHECK(site.offset + 1 < count);
      }
      if (site.offset + 1 < count) mid_step = true;
    }
  }
  CHECK(mid_step);
}
