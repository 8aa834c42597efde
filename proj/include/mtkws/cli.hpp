// mtkws/cli.hpp

// Copyright 2026  MT-KWS Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef MTKWS_CLI_HPP
#define MTKWS_CLI_HPP

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mtkws/pipeline.hpp"

namespace mtkws {

// Exit codes: 0 success, 1 stage failure, 2 usage error.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Mix-training keyword spotting pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string workdir = "work";
  std::optional<uint64_t> seed_override;
  app.add_option("--config", config_path, "Experiment config file (defaults when omitted)");
  app.add_option("--workdir", workdir, "Work directory for artifacts");
  app.add_option("--seed", seed_override, "Override the config seed");

  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic keyword corpus");
  auto* mix = app.add_subcommand("mix-build", "Build pre-training and evaluation mixture sets");
  auto* tokenize = app.add_subcommand("tokenize",
                                      "Fit the clean codebook and write token/n-hot targets");
  auto* pretrain = app.add_subcommand("pretrain", "Run masked-prediction pre-training");
  std::string mode = "mt_bce";
  pretrain->add_option("--mode", mode, "clean_nll, mt_bce or mpc_nll")
      ->check(CLI::IsMember({"clean_nll", "mt_bce", "mpc_nll"}));
  auto* adapt = app.add_subcommand("adapt", "Few-shot adaptation of the frozen backbone");
  std::string strategy = "all";
  int shots_flag = 0;
  adapt->add_option("--strategy", strategy, "clean, mixup, mt or all")
      ->check(CLI::IsMember({"clean", "mixup", "mt", "all"}));
  adapt->add_option("--shots", shots_flag, "Examples per keyword (default: config adapt.shots)")
      ->check(CLI::PositiveNumber);
  auto* eval = app.add_subcommand("eval", "Evaluate adapted heads on a test condition");
  std::string condition = "clean";
  int eval_shots_flag = 0;
  eval->add_option("--condition", condition, "clean, 2mix or 3mix")
      ->check(CLI::IsMember({"clean", "2mix", "3mix"}));
  eval->add_option("--shots", eval_shots_flag, "Shot count of the heads to evaluate")
      ->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "Aggregate metrics into report.tsv / report.txt");
  auto* toy = app.add_subcommand("toy-table1",
                                 "End-to-end recipe: corpus through report in one command");
  // shared flags may follow the subcommand
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<const char*> argv;
  argv.push_back("mtkws");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  }

  std::string stage_name = app.get_subcommands().front()->get_name();
  try {
    StageContext ctx;
    ctx.cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed_override) ctx.cfg.seed = *seed_override;
    validate_config(ctx.cfg);
    ctx.workdir = workdir;
    std::filesystem::create_directories(ctx.workdir);
    write_text_file(ctx.workdir / "config.effective", format_config(ctx.cfg));
    append_run_log(ctx, "stage " + stage_name + " config_hash=" + hex64(ctx.hash()) +
                            " seed=" + std::to_string(ctx.cfg.seed));

    if (synth->parsed()) {
      out << stage_synth_data(ctx) << "\n";
    } else if (mix->parsed()) {
      out << stage_mix_build(ctx) << "\n";
    } else if (tokenize->parsed()) {
      out << stage_tokenize(ctx) << "\n";
    } else if (pretrain->parsed()) {
      out << stage_pretrain(ctx, parse_pretrain_mode(mode)) << "\n";
    } else if (adapt->parsed()) {
      std::vector<std::string> strategies =
          strategy == "all" ? ctx.cfg.adapt_strategies : std::vector<std::string>{strategy};
      int shots = shots_flag > 0 ? shots_flag : ctx.cfg.adapt_shots;
      out << stage_adapt(ctx, strategies, shots) << "\n";
    } else if (eval->parsed()) {
      int shots = eval_shots_flag > 0 ? eval_shots_flag : ctx.cfg.adapt_shots;
      out << stage_eval(ctx, condition, shots);
    } else if (report->parsed()) {
      out << stage_report(ctx);
    } else if (toy->parsed()) {
      std::string table =
          run_full_pipeline(ctx, [&](const std::string& s) { out << s << "\n"; });
      out << table;
    }
    return 0;
  } catch (const Error& e) {
    err << "mtkws " << stage_name << ": error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "mtkws " << stage_name << ": unexpected error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mtkws

#endif  // MTKWS_CLI_HPP
