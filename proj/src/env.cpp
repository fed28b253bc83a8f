#include "treegrpo/env.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include "treegrpo/rng.hpp"

namespace treegrpo {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string fold_case(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

std::size_t count_occurrences(const std::string& s, const std::string& sub) {
  std::size_t n = 0;
  for (std::size_t pos = s.find(sub); pos != std::string::npos;
       pos = s.find(sub, pos + sub.size())) {
    ++n;
  }
  return n;
}

// Content of the unique open/close pair, or nullopt when the pair is not
// exactly-once and well-ordered.
std::optional<std::string> single_pair_content(const std::string& s,
                                               const std::string& open,
                                               const std::string& close) {
  if (count_occurrences(s, open) != 1 || count_occurrences(s, close) != 1) {
    return std::nullopt;
  }
  const std::size_t b = s.find(open);
  const std::size_t e = s.find(close);
  if (e < b) return std::nullopt;
  return trim(s.substr(b + open.size(), e - b - open.size()));
}

}  // namespace

World gen_world(std::uint64_t seed, int n_entities, int n_relations,
                int hop_depth, int n_tasks) {
  if (hop_depth < 1) throw InvalidSize("gen_world: hop_depth must be >= 1");
  if (n_entities < hop_depth + 1) {
    throw InvalidSize("gen_world: n_entities must be >= hop_depth + 1");
  }
  if (n_relations < hop_depth) {
    throw InvalidSize("gen_world: n_relations must be >= hop_depth");
  }
  if (n_tasks < 1) throw InvalidSize("gen_world: n_tasks must be >= 1");

  World world;
  world.seed = seed;
  world.hop_depth = hop_depth;

  const int layers = hop_depth + 1;
  std::vector<std::vector<int>> layer_entities(layers);
  for (int i = 0; i < n_entities; ++i) {
    world.entities.push_back("e" + std::to_string(i));
    layer_entities[i % layers].push_back(i);
  }
  // Relation r_j maps layer (j % hop_depth) onto the next layer.
  std::vector<std::vector<int>> layer_relations(hop_depth);
  std::vector<std::string> relation_names(n_relations);
  for (int j = 0; j < n_relations; ++j) {
    relation_names[j] = "r" + std::to_string(j);
    layer_relations[j % hop_depth].push_back(j);
  }

  RngStream rng(stream_key({seed, hash_string("world")}));
  std::map<std::pair<std::string, std::string>, std::string> edge;
  for (int layer = 0; layer < hop_depth; ++layer) {
    for (int subject : layer_entities[layer]) {
      for (int rel : layer_relations[layer]) {
        const auto& targets = layer_entities[layer + 1];
        const std::string& object =
            world.entities[targets[rng.below(targets.size())]];
        Fact fact{world.entities[subject], relation_names[rel], object};
        edge[{fact.subject, fact.relation}] = fact.object;
        world.facts.push_back(std::move(fact));
      }
    }
  }
  // Record relations in order of first appearance so imported worlds
  // reconstruct the same list from the fact stream.
  for (const Fact& f : world.facts) {
    if (std::find(world.relations.begin(), world.relations.end(), f.relation) ==
        world.relations.end()) {
      world.relations.push_back(f.relation);
    }
  }

  for (int t = 0; t < n_tasks; ++t) {
    const auto& starts = layer_entities[0];
    std::string current = world.entities[starts[rng.below(starts.size())]];
    QATask task;
    char buf[16];
    std::snprintf(buf, sizeof buf, "q%04d", t);
    task.prompt_id = buf;
    task.question = current;
    task.hops = hop_depth;
    for (int layer = 0; layer < hop_depth; ++layer) {
      const auto& rels = layer_relations[layer];
      const std::string& rel = relation_names[rels[rng.below(rels.size())]];
      task.question += " " + rel;
      current = edge.at({current, rel});
    }
    task.gold = current;
    world.tasks.push_back(std::move(task));
  }
  return world;
}

std::vector<std::string> search(const World& world, const std::string& query,
                                int k) {
  if (k < 1) throw std::invalid_argument("search: k must be >= 1");
  std::vector<std::string> terms = split_ws(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

  // Facts are keyed by subject and relation; the object is payload and does
  // not count toward the match (a query naming only an answer entity finds
  // nothing new).
  std::vector<std::pair<int, std::string>> ranked;
  for (const Fact& f : world.facts) {
    int matches = 0;
    for (const std::string& t : terms) {
      if (t == f.subject || t == f.relation) ++matches;
    }
    if (matches > 0) ranked.emplace_back(matches, f.render());
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  std::vector<std::string> out;
  for (std::size_t i = 0; i < ranked.size() && i < static_cast<std::size_t>(k);
       ++i) {
    out.push_back(ranked[i].second);
  }
  return out;
}

Action parse_action(const std::string& raw) {
  const bool any_search = count_occurrences(raw, "<search>") > 0 ||
                          count_occurrences(raw, "</search>") > 0;
  const bool any_answer = count_occurrences(raw, "<answer>") > 0 ||
                          count_occurrences(raw, "</answer>") > 0;
  if (any_search && !any_answer) {
    if (auto q = single_pair_content(raw, "<search>", "</search>");
        q.has_value() && !q->empty()) {
      return Action{ActionKind::Search, *q};
    }
  } else if (any_answer && !any_search) {
    if (auto a = single_pair_content(raw, "<answer>", "</answer>");
        a.has_value() && !a->empty()) {
      return Action{ActionKind::Answer, *a};
    }
  }
  return Action{ActionKind::Malformed, raw};
}

std::string extract_thought(const std::string& raw) {
  if (auto t = single_pair_content(raw, "<think>", "</think>")) return *t;
  return "";
}

double em_score(const std::string& answer, const std::string& gold) {
  return fold_case(trim(answer)) == fold_case(trim(gold)) ? 1.0 : 0.0;
}

double shaped_reward(double score, bool format_ok, double lambda_f) {
  return format_ok ? score : score - lambda_f;
}

std::string export_world(const World& world) {
  std::ostringstream out;
  out << "# seed " << world.seed << " hop_depth " << world.hop_depth << "\n";
  out << "[entities]\n";
  for (const std::string& e : world.entities) out << e << "\n";
  out << "[facts]\n";
  for (const Fact& f : world.facts) out << f.render() << "\n";
  out << "[tasks]\n";
  for (const QATask& t : world.tasks) {
    out << t.prompt_id << "\t" << t.question << "\t" << t.gold << "\t"
        << t.hops << "\n";
  }
  return out.str();
}

World import_world(const std::string& text) {
  World world;
  std::istringstream in(text);
  std::string line;
  enum class Section { None, Entities, Facts, Tasks } section = Section::None;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hdr(line.substr(1));
      std::string key;
      while (hdr >> key) {
        if (key == "seed") hdr >> world.seed;
        if (key == "hop_depth") hdr >> world.hop_depth;
      }
      continue;
    }
    if (line == "[entities]") { section = Section::Entities; continue; }
    if (line == "[facts]") { section = Section::Facts; continue; }
    if (line == "[tasks]") { section = Section::Tasks; continue; }
    switch (section) {
      case Section::Entities:
        world.entities.push_back(trim(line));
        break;
      case Section::Facts: {
        auto parts = split_ws(line);
        if (parts.size() != 3) {
          throw std::invalid_argument("import_world: bad fact line: " + line);
        }
        world.facts.push_back(Fact{parts[0], parts[1], parts[2]});
        break;
      }
      case Section::Tasks: {
        std::vector<std::string> cols;
        std::size_t start = 0;
        for (std::size_t pos = line.find('\t'); pos != std::string::npos;
             pos = line.find('\t', start)) {
          cols.push_back(line.substr(start, pos - start));
          start = pos + 1;
        }
        cols.push_back(line.substr(start));
        if (cols.size() != 4) {
          throw std::invalid_argument("import_world: bad task line: " + line);
        }
        world.tasks.push_back(
            QATask{cols[0], cols[1], cols[2], std::stoi(cols[3])});
        break;
      }
      case Section::None:
        throw std::invalid_argument("import_world: content before a section");
    }
  }
  for (const Fact& f : world.facts) {
    if (std::find(world.relations.begin(), world.relations.end(), f.relation) ==
        world.relations.end()) {
      world.relations.push_back(f.relation);
    }
  }
  return world;
}

}  // namespace treegrpo
