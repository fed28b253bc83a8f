#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "treegrpo/env.hpp"
#include "treegrpo/rng.hpp"

using namespace treegrpo;

TEST_CASE("gen_world is deterministic and size-checked") {
  const World a = gen_world(7, 20, 3, 2, 10);
  const World b = gen_world(7, 20, 3, 2, 10);
  CHECK(export_world(a) == export_world(b));
  CHECK(a.entities.size() == 20);
  CHECK(a.tasks.size() == 10);

  CHECK_THROWS_AS(gen_world(7, 1, 3, 2, 10), InvalidSize);
  CHECK_THROWS_AS(gen_world(7, 20, 1, 2, 10), InvalidSize);
  CHECK_THROWS_AS(gen_world(7, 20, 3, 2, 0), InvalidSize);
  CHECK_THROWS_AS(gen_world(7, 20, 3, 0, 10), InvalidSize);
}

namespace {

// Brute-force reachability: all entities reachable from `start` in at most
// `hops` fact applications.
std::set<std::string> reachable(const World& world, const std::string& start,
                                int hops) {
  std::set<std::string> frontier{start};
  std::set<std::string> seen{start};
  for (int h = 0; h < hops; ++h) {
    std::set<std::string> next;
    for (const Fact& f : world.facts) {
      if (frontier.count(f.subject)) next.insert(f.object);
    }
    seen.insert(next.begin(), next.end());
    frontier = std::move(next);
  }
  return seen;
}

}  // namespace

TEST_CASE("every task is solvable by chaining facts from the question") {
  for (std::uint64_t seed : {1ull, 7ull, 99ull}) {
    const World world = gen_world(seed, 15, 4, 2, 12);
    for (const QATask& task : world.tasks) {
      const std::string start = task.question.substr(0, task.question.find(' '));
      const auto goals = reachable(world, start, task.hops);
      CHECK(goals.count(task.gold) == 1);
    }
  }
}

TEST_CASE("every task is solvable through the search tool itself") {
  // `hops` searches of "current relation" plus one answer reach reward 1:
  // each hop's top result is the chain fact.
  const World world = gen_world(5, 18, 4, 2, 16);
  for (const QATask& task : world.tasks) {
    std::istringstream q(task.question);
    std::string current;
    q >> current;
    std::string rel;
    int searches = 0;
    while (q >> rel) {
      const auto hits = search(world, current + " " + rel, 1);
      REQUIRE(hits.size() == 1);
      std::istringstream fact(hits[0]);
      std::string s, r, o;
      fact >> s >> r >> o;
      CHECK(s == current);
      CHECK(r == rel);
      current = o;
      ++searches;
    }
    CHECK(searches == task.hops);
    CHECK(em_score(current, task.gold) == 1.0);
  }
}

namespace {

// Independent ranking: score every fact, stable-order by (count desc, text).
std::vector<std::string> brute_force_search(const World& world,
                                            const std::string& query, int k) {
  std::set<std::string> terms;
  {
    std::string tok;
    for (char c : query + " ") {
      if (c == ' ') {
        if (!tok.empty()) terms.insert(tok);
        tok.clear();
      } else {
        tok += c;
      }
    }
  }
  std::vector<std::pair<int, std::string>> scored;
  for (const Fact& f : world.facts) {
    int count = 0;
    for (const std::string& t : terms) {
      if (t == f.subject || t == f.relation) ++count;
    }
    if (count > 0) scored.emplace_back(-count, f.render());
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (int i = 0; i < k && i < static_cast<int>(scored.size()); ++i) {
    out.push_back(scored[static_cast<std::size_t>(i)].second);
  }
  return out;
}

}  // namespace

TEST_CASE("search ranking") {
  SUBCASE("subject with exactly two facts") {
    World world;
    world.entities = {"a", "b", "c", "d"};
    world.facts = {Fact{"a", "r0", "b"}, Fact{"a", "r1", "c"},
                   Fact{"d", "r0", "c"}};
    const auto hits = search(world, "a", 3);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0] == "a r0 b");
    CHECK(hits[1] == "a r1 c");
  }
  SUBCASE("no known symbol") {
    const World world = gen_world(3, 10, 2, 1, 4);
    CHECK(search(world, "nothing matches here", 3).empty());
  }
  SUBCASE("determinism and brute-force agreement") {
    const World world = gen_world(11, 14, 3, 2, 6);
    RngStream rng(5);
    for (int i = 0; i < 40; ++i) {
      std::string query;
      for (std::size_t j = 0, n = 1 + rng.below(3); j < n; ++j) {
        if (!query.empty()) query += ' ';
        if (rng.below(2) == 0) {
          query += world.entities[rng.below(world.entities.size())];
        } else {
          query += world.relations[rng.below(world.relations.size())];
        }
      }
      const int k = 1 + static_cast<int>(rng.below(4));
      const auto a = search(world, query, k);
      CHECK(a == search(world, query, k));
      CHECK(a == brute_force_search(world, query, k));
    }
  }
}

TEST_CASE("parse_action") {
  const Action a =
      parse_action("<think> need the capital </think> <search> capital of X </search>");
  CHECK(a.kind == ActionKind::Search);
  CHECK(a.text == "capital of X");

  const Action b = parse_action("<answer> Beijing </answer>");
  CHECK(b.kind == ActionKind::Answer);
  CHECK(b.text == "Beijing");

  CHECK(parse_action("<search> a ").kind == ActionKind::Malformed);
  CHECK(parse_action("no tags at all").kind == ActionKind::Malformed);
  CHECK(parse_action("<search> a </search> <search> b </search>").kind ==
        ActionKind::Malformed);
  CHECK(parse_action("<search> a </search> <answer> b </answer>").kind ==
        ActionKind::Malformed);
  CHECK(parse_action("<answer> </answer>").kind == ActionKind::Malformed);
  CHECK(parse_action("</search> backwards <search>").kind ==
        ActionKind::Malformed);

  // Malformed keeps the raw text.
  const Action m = parse_action("<search> oops");
  CHECK(m.text == "<search> oops");
}

TEST_CASE("parse_action round-trips rendered actions") {
  const World world = gen_world(21, 10, 2, 1, 4);
  RngStream rng(9);
  for (int i = 0; i < 50; ++i) {
    std::string content = world.entities[rng.below(world.entities.size())];
    if (rng.below(2) == 0) {
      content += " " + world.relations[rng.below(world.relations.size())];
    }
    if (rng.below(2) == 0) {
      const Action a = parse_action("<search> " + content + " </search>");
      CHECK(a.kind == ActionKind::Search);
      CHECK(a.text == content);
    } else {
      const Action a = parse_action("<answer> " + content + " </answer>");
      CHECK(a.kind == ActionKind::Answer);
      CHECK(a.text == content);
    }
  }
}

TEST_CASE("extract_thought") {
  CHECK(extract_thought("<think> some plan </think> <search> q </search>") ==
        "some plan");
  CHECK(extract_thought("no think tags") == "");
  CHECK(extract_thought("<think> unclosed") == "");
}

TEST_CASE("em_score normalization") {
  CHECK(em_score("Beijing", "beijing") == 1.0);
  CHECK(em_score("Paris", "Beijing") == 0.0);
  CHECK(em_score("  beijing ", "Beijing") == 1.0);
  CHECK(em_score("beijing city", "beijing") == 0.0);
}

TEST_CASE("shaped_reward piecewise values") {
  CHECK(shaped_reward(1.0, true, 0.2) == 1.0);
  CHECK(shaped_reward(0.0, false, 0.2) == -0.2);
  CHECK(shaped_reward(1.0, false, 0.2) == 0.8);
  CHECK(shaped_reward(0.0, true, 0.2) == 0.0);
}

TEST_CASE("world export/import round-trip") {
  const World world = gen_world(31, 12, 4, 2, 8);
  const std::string text = export_world(world);
  const World back = import_world(text);
  CHECK(export_world(back) == text);
  CHECK(back.seed == world.seed);
  CHECK(back.hop_depth == world.hop_depth);
  CHECK(back.entities == world.entities);
  CHECK(back.relations == world.relations);
  CHECK(back.tasks.size() == world.tasks.size());
  for (std::size_t i = 0; i < world.tasks.size(); ++i) {
    CHECK(back.tasks[i].question == world.tasks[i].question);
    CHECK(back.tasks[i].gold == world.tasks[i].gold);
  }
}
