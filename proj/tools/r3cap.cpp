// Batch driver: data generation, training, decoding, scoring, role analysis.

#include <cstddef>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "r3/commands.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  long long seed = -1;
  std::string variant;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run config file (key=value)");
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--variant", args.variant, "attention variant")
      ->check(CLI::IsMember({"r3", "baseline"}));
}

r3::RunConfig resolve_config(const CommonArgs& args) {
  r3::RunConfig cfg;
  if (!args.config_path.empty()) {
    cfg = r3::RunConfig::load_file(args.config_path);
  }
  if (args.seed >= 0) cfg.model.seed = static_cast<std::uint64_t>(args.seed);
  if (!args.variant.empty()) cfg.variant = args.variant;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"grounded caption model: data, training, decoding, reports"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, dec_args, eval_args, roles_args;

  CLI::App* gen = app.add_subcommand("gen-data", "generate an episode corpus");
  add_common(gen, gen_args);
  std::size_t gen_count = 0;
  gen->add_option("--count", gen_count, "episodes to generate (0 = config value)");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory (default: config data_dir)");

  CLI::App* train = app.add_subcommand("train", "run the training loop");
  add_common(train, train_args);
  long long train_steps = -1;
  train->add_option("--steps", train_steps, "total step target (overrides config)");

  CLI::App* dec = app.add_subcommand("generate", "greedy-decode a feature file");
  add_common(dec, dec_args);
  std::string dec_ckpt, dec_data, dec_out;
  dec->add_option("--checkpoint", dec_ckpt, "checkpoint to decode with")->required();
  dec->add_option("--data", dec_data, "feature file to decode")->required();
  dec->add_option("--out", dec_out, "trace dump to write (JSONL)")->required();

  CLI::App* eval = app.add_subcommand("evaluate", "score a trace dump");
  add_common(eval, eval_args);
  std::string eval_traces, eval_refs, eval_compare;
  int eval_min_predicates = 0;
  eval->add_option("--traces", eval_traces, "trace dump to score")->required();
  eval->add_option("--refs", eval_refs, "reference feature file")->required();
  eval->add_option("--compare", eval_compare,
                   "second dump to report improvement against");
  eval->add_option("--min-predicates", eval_min_predicates,
                   "score a single predicate stratum instead of all four")
      ->check(CLI::Range(1, 4));

  CLI::App* roles = app.add_subcommand("analyze-roles", "role/word analysis");
  add_common(roles, roles_args);
  std::string roles_traces, roles_site;
  std::size_t roles_head = 0;
  roles->add_option("--traces", roles_traces, "trace dump to analyze")->required();
  roles->add_option("--site", roles_site,
                    "quantize site (default: first cross-attention site)");
  roles->add_option("--head", roles_head, "head index at the site");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      r3::RunConfig cfg = resolve_config(gen_args);
      if (gen_count > 0) cfg.count = gen_count;
      if (!gen_out.empty()) cfg.data_dir = gen_out;
      r3::cmd_gen_data(cfg, std::cout);
    } else if (train->parsed()) {
      r3::RunConfig cfg = resolve_config(train_args);
      if (train_steps >= 0) cfg.steps = static_cast<std::uint64_t>(train_steps);
      r3::cmd_train(cfg, std::cout);
    } else if (dec->parsed()) {
      r3::cmd_generate(resolve_config(dec_args), dec_ckpt, dec_data, dec_out,
                       std::cout);
    } else if (eval->parsed()) {
      r3::cmd_evaluate(resolve_config(eval_args), eval_traces, eval_refs,
                       eval_compare, eval_min_predicates, std::cout);
    } else if (roles->parsed()) {
      r3::cmd_analyze_roles(resolve_config(roles_args), roles_traces,
                            roles_site, roles_head, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
