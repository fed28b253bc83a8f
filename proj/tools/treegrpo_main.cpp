#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "treegrpo/config.hpp"
#include "treegrpo/experiment.hpp"

namespace {

// --out beats the environment default; TREEGRPO_OUT is the output root when
// no flag is given.
std::string resolve_out_root(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("TREEGRPO_OUT")) return env;
  return ".";
}

treegrpo::ExperimentSpec load_spec(const std::string& config_path,
                                   const std::string& variant,
                                   std::uint64_t seed_override, bool has_seed) {
  treegrpo::ExperimentSpec spec = treegrpo::load_config(config_path);
  if (!variant.empty()) spec.variant = treegrpo::parse_variant(variant);
  if (has_seed) spec.seeds = {seed_override};
  spec.finalize();
  return spec;
}

int inspect_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "cannot open trace file: " << path << "\n";
    return 1;
  }
  struct PromptStats {
    std::size_t nodes = 0;
    std::size_t leaves = 0;
    std::size_t tokens = 0;
    std::size_t tool_calls = 0;
    double reward_sum = 0.0;
    std::size_t scored = 0;
  };
  std::map<std::string, PromptStats> prompts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const std::exception& err) {
      std::cerr << "bad trace line " << line_no << ": " << err.what() << "\n";
      return 1;
    }
    PromptStats& stats = prompts[rec.at("prompt_id").get<std::string>()];
    ++stats.nodes;
    stats.tokens += rec.at("gen_token_count").get<std::size_t>();
    stats.tool_calls += rec.at("tool_calls").get<std::size_t>();
    if (rec.contains("reward")) {
      ++stats.leaves;
      if (!rec.at("reward").is_null()) {
        stats.reward_sum += rec.at("reward").get<double>();
        ++stats.scored;
      }
    }
  }
  for (const auto& [prompt, stats] : prompts) {
    std::cout << prompt << ": nodes=" << stats.nodes
              << " leaves=" << stats.leaves << " tokens=" << stats.tokens
              << " tool_calls=" << stats.tool_calls;
    if (stats.scored > 0) {
      std::cout << " mean_reward=" << stats.reward_sum / stats.scored;
    }
    std::cout << "\n";
  }
  std::cout << prompts.size() << " prompt(s), " << line_no << " record(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tree-search rollout and group-relative training experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_flag;
  std::string variant;
  std::uint64_t seed_override = 0;
  int jobs = 0;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    auto* opt = cmd->add_option("--config", config_path, "config file (INI)");
    if (needs_config) opt->required();
    cmd->add_option("--out", out_flag, "output root (defaults to $TREEGRPO_OUT)");
  };

  CLI::App* run = app.add_subcommand("run", "train and export artifacts");
  add_common(run, true);
  run->add_option("--seed", seed_override, "override the seed list");
  run->add_option("--variant", variant, "tree|chain|token");
  run->add_option("--jobs", jobs, "worker threads across seeds");

  CLI::App* verify =
      app.add_subcommand("verify", "equivalence, budget and gradient suites");
  add_common(verify, true);
  int budget_seeds = 2000;
  bool inject_k3 = false;
  verify->add_option("--budget-seeds", budget_seeds,
                     "seeds for the budget Monte Carlo");
  verify->add_flag("--inject-k3-sign-flip", inject_k3,
                   "fault fixture: flip the K3 sign before the check")
      ->group("");  // hidden

  CLI::App* export_world_cmd =
      app.add_subcommand("export-world", "write the world file of a config");
  add_common(export_world_cmd, true);

  CLI::App* inspect =
      app.add_subcommand("inspect-trace", "summarize a trace.jsonl");
  std::string trace_path;
  inspect->add_option("--trace", trace_path, "trace file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      const auto spec = load_spec(config_path, variant, seed_override,
                                  run->count("--seed") > 0);
      treegrpo::RunOptions options;
      options.out_root = resolve_out_root(out_flag);
      options.jobs = jobs;
      return treegrpo::run_experiment(spec, options);
    }
    if (verify->parsed()) {
      const auto spec = load_spec(config_path, "", 0, false);
      treegrpo::VerifyOptions options;
      options.out_root = resolve_out_root(out_flag);
      options.budget_seeds = budget_seeds;
      options.inject_k3_sign_flip = inject_k3;
      return treegrpo::run_verify(spec, options);
    }
    if (export_world_cmd->parsed()) {
      const auto spec = load_spec(config_path, "", 0, false);
      const treegrpo::World world = treegrpo::gen_world(
          spec.world.seed, spec.world.n_entities, spec.world.n_relations,
          spec.world.hop_depth, spec.world.n_tasks);
      std::cout << treegrpo::export_world(world);
      return 0;
    }
    if (inspect->parsed()) return inspect_trace(trace_path);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
