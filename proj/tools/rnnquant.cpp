// SPDX-License-Identifier: Apache-2.0
//
// rnnquant synth|train|backtest|gradcheck [--config PATH] [--out DIR] [--seed N]
//
// Exit codes: 0 ok, 1 unexpected failure, 2 configuration error,
// 3 data/IO error, 4 numeric failure (diverged training, gradient check).
#include <CLI11.hpp>

#include <iostream>

#include "rnnquant/app.hpp"

int main(int argc, char** argv) {
  using namespace rnnquant;

  CLI::App cli{"Recurrent-network stock selection: data, training, backtests"};
  cli.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  cli.add_option("--config", config_path, "key = value configuration file")->check(CLI::ExistingFile);
  cli.add_option("--out", out_dir, "output directory (overrides 'out')");
  cli.add_option("--seed", seed, "master seed (overrides 'seed')");
  cli.set_help_all_flag("--help-all", "show help for every subcommand");
  cli.footer("Configuration keys (with defaults):\n" + app::RunConfig{}.to_text());

  auto* synth = cli.add_subcommand("synth", "write a synthetic weekly bars CSV");
  auto* train = cli.add_subcommand("train", "train one pooled model; write checkpoint and history");
  auto* backtest = cli.add_subcommand("backtest", "walk-forward top-k backtest; write equity, weights, report");
  auto* gradcheck = cli.add_subcommand("gradcheck", "finite-difference check of both presets at small width");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? app::kOk : app::kConfig;
  }

  try {
    app::RunConfig cfg = config_path.empty() ? app::RunConfig{} : app::RunConfig::load(config_path);
    if (!out_dir.empty()) cfg.set("out", out_dir);
    if (seed) cfg.set("seed", std::to_string(*seed));

    if (*synth) return app::cmd_synth(cfg);
    if (*train) return app::cmd_train(cfg);
    if (*backtest) return app::cmd_backtest(cfg);
    if (*gradcheck) return app::cmd_gradcheck(cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return app::exit_code_for(e);
  }
  return app::kFailure;
}
