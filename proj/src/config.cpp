#include "treegrpo/config.hpp"

#include <fstream>
#include <sstream>

namespace treegrpo {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Tree: return "tree";
    case Variant::Chain: return "chain";
    case Variant::TokenTree: return "token";
  }
  return "tree";
}

Variant parse_variant(const std::string& name) {
  if (name == "tree") return Variant::Tree;
  if (name == "chain") return Variant::Chain;
  if (name == "token") return Variant::TokenTree;
  throw ConfigError("experiment.variant: expected tree|chain|token, got '" +
                    name + "'");
}

void ExperimentSpec::finalize() {
  if (variant == Variant::Chain) {
    rollout.expansions_per_iteration = 0;
    rollout.expansion_iterations = 0;
    rollout.granularity = NodeGranularity::Step;
  } else if (variant == Variant::TokenTree) {
    rollout.granularity = NodeGranularity::Token;
  } else {
    rollout.granularity = NodeGranularity::Step;
  }

  if (world.hop_depth < 1) throw ConfigError("env-sim.hop_depth must be >= 1");
  if (world.n_entities < world.hop_depth + 1) {
    throw ConfigError("env-sim.n_entities must be >= hop_depth + 1");
  }
  if (world.n_relations < world.hop_depth) {
    throw ConfigError("env-sim.n_relations must be >= hop_depth");
  }
  if (world.n_tasks < 1) throw ConfigError("env-sim.n_tasks must be >= 1");
  if (feature_dim < 2) throw ConfigError("policy.feature_dim must be >= 2");
  if (rollout.trees_per_prompt < 1) {
    throw ConfigError("rollout.trees_per_prompt must be >= 1");
  }
  if (rollout.expansions_per_iteration < 0) {
    throw ConfigError("rollout.expansions_per_iteration must be >= 0");
  }
  if (rollout.expansion_iterations < 0) {
    throw ConfigError("rollout.expansion_iterations must be >= 0");
  }
  if (rollout.expansion_iterations > 0 &&
      rollout.expansions_per_iteration < 1) {
    throw ConfigError(
        "rollout.expansions_per_iteration must be >= 1 when "
        "rollout.expansion_iterations > 0");
  }
  if (rollout.caps.max_tool_calls < 0) {
    throw ConfigError("rollout.max_tool_calls must be >= 0");
  }
  if (rollout.caps.max_response_tokens < 2) {
    throw ConfigError("rollout.max_response_tokens must be >= 2");
  }
  if (rollout.max_step_tokens < 1) {
    throw ConfigError("rollout.max_step_tokens must be >= 1");
  }
  if (rollout.top_k < 1) throw ConfigError("rollout.top_k must be >= 1");
  if (!(train.clip_eps > 0.0 && train.clip_eps < 1.0)) {
    throw ConfigError("trainer.clip_eps must be in (0, 1)");
  }
  if (train.kl_beta < 0.0) {
    throw ConfigError("trainer.kl_coefficient must be >= 0");
  }
  if (train.lr < 0.0) throw ConfigError("trainer.learning_rate must be >= 0");
  if (train.lambda_f < 0.0) {
    throw ConfigError("trainer.format_score must be >= 0");
  }
  if (train.batch_prompts < 1) {
    throw ConfigError("trainer.batch_prompts must be >= 1");
  }
  if (train.mini_batch < 1) throw ConfigError("trainer.mini_batch must be >= 1");
  if (train.inner_epochs < 1) {
    throw ConfigError("trainer.inner_epochs must be >= 1");
  }
  if (train.total_steps < 1) {
    throw ConfigError("trainer.total_steps must be >= 1");
  }
  if (train.warmup_ratio < 0.0) {
    throw ConfigError("trainer.warmup_ratio must be >= 0");
  }
  if (seeds.empty()) throw ConfigError("experiment.seeds must be non-empty");
  if (output_dir.empty()) {
    throw ConfigError("experiment.output_dir must be non-empty");
  }
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

long long to_int(const std::string& section, const std::string& key,
                 const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(section + "." + key + ": expected an integer, got '" +
                      value + "'");
  }
}

double to_double(const std::string& section, const std::string& key,
                 const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(section + "." + key + ": expected a number, got '" +
                      value + "'");
  }
}

std::vector<std::uint64_t> to_seed_list(const std::string& section,
                                        const std::string& key,
                                        const std::string& value) {
  std::vector<std::uint64_t> seeds;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    seeds.push_back(
        static_cast<std::uint64_t>(to_int(section, key, item)));
  }
  if (seeds.empty()) {
    throw ConfigError(section + "." + key + ": expected a seed list");
  }
  return seeds;
}

}  // namespace

ExperimentSpec parse_config(const std::string& text) {
  ExperimentSpec spec;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';') continue;
    if (stripped.front() == '[' && stripped.back() == ']') {
      section = stripped.substr(1, stripped.size() - 2);
      if (section != "env-sim" && section != "policy" && section != "rollout" &&
          section != "trainer" && section != "experiment") {
        throw ConfigError("unknown config section [" + section + "]");
      }
      continue;
    }
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": expected 'key = value', got '" + stripped + "'");
    }
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(line_no) +
                        ": key outside of any section");
    }
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));

    if (section == "env-sim") {
      if (key == "seed") spec.world.seed = static_cast<std::uint64_t>(to_int(section, key, value));
      else if (key == "n_entities") spec.world.n_entities = static_cast<int>(to_int(section, key, value));
      else if (key == "n_relations") spec.world.n_relations = static_cast<int>(to_int(section, key, value));
      else if (key == "hop_depth") spec.world.hop_depth = static_cast<int>(to_int(section, key, value));
      else if (key == "n_tasks") spec.world.n_tasks = static_cast<int>(to_int(section, key, value));
      else throw ConfigError("unknown key env-sim." + key);
    } else if (section == "policy") {
      if (key == "feature_dim") spec.feature_dim = static_cast<int>(to_int(section, key, value));
      else throw ConfigError("unknown key policy." + key);
    } else if (section == "rollout") {
      if (key == "trees_per_prompt") spec.rollout.trees_per_prompt = static_cast<int>(to_int(section, key, value));
      else if (key == "expansions_per_iteration") spec.rollout.expansions_per_iteration = static_cast<int>(to_int(section, key, value));
      else if (key == "expansion_iterations") spec.rollout.expansion_iterations = static_cast<int>(to_int(section, key, value));
      else if (key == "max_tool_calls") spec.rollout.caps.max_tool_calls = static_cast<int>(to_int(section, key, value));
      else if (key == "max_response_tokens") spec.rollout.caps.max_response_tokens = static_cast<std::size_t>(to_int(section, key, value));
      else if (key == "max_step_tokens") spec.rollout.max_step_tokens = static_cast<std::size_t>(to_int(section, key, value));
      else if (key == "top_k") spec.rollout.top_k = static_cast<int>(to_int(section, key, value));
      else throw ConfigError("unknown key rollout." + key);
    } else if (section == "trainer") {
      if (key == "learning_rate") spec.train.lr = to_double(section, key, value);
      else if (key == "kl_coefficient") spec.train.kl_beta = to_double(section, key, value);
      else if (key == "format_score") spec.train.lambda_f = to_double(section, key, value);
      else if (key == "clip_eps") spec.train.clip_eps = to_double(section, key, value);
      else if (key == "batch_prompts") spec.train.batch_prompts = static_cast<int>(to_int(section, key, value));
      else if (key == "mini_batch") spec.train.mini_batch = static_cast<int>(to_int(section, key, value));
      else if (key == "inner_epochs") spec.train.inner_epochs = static_cast<int>(to_int(section, key, value));
      else if (key == "total_steps") spec.train.total_steps = static_cast<int>(to_int(section, key, value));
      else if (key == "warmup_ratio") spec.train.warmup_ratio = to_double(section, key, value);
      else throw ConfigError("unknown key trainer." + key);
    } else if (section == "experiment") {
      if (key == "variant") spec.variant = parse_variant(value);
      else if (key == "seeds") spec.seeds = to_seed_list(section, key, value);
      else if (key == "output_dir") spec.output_dir = value;
      else throw ConfigError("unknown key experiment." + key);
    }
  }
  spec.finalize();
  return spec;
}

ExperimentSpec load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

}  // namespace treegrpo
