#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "hnas/error.hpp"
#include "hnas/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::string arch;
  std::string checkpoint;
  std::string data;
  std::vector<std::string> sets;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "global seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--mode", c.mode, "search | ablation | retrain")
      ->check(CLI::IsMember({"search", "ablation", "retrain"}));
  cmd->add_option("--arch", c.arch, "architecture file");
  cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint, or checkpoint to resume from");
  cmd->add_option("--data", c.data, "dataset directory (holding manifest.json)");
  cmd->add_option("--set", c.sets, "override one config key, as key=value")->take_all();
  cmd->add_flag("--force", c.force, "overwrite a non-empty output directory");
}

hnas::RunConfig build_config(const Common& c) {
  hnas::RunConfig cfg;
  if (!c.config.empty()) cfg = hnas::RunConfig::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw hnas::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  if (!c.mode.empty()) cfg.mode = hnas::parse_run_mode(c.mode);
  if (!c.arch.empty()) cfg.arch = c.arch;
  if (!c.checkpoint.empty()) cfg.checkpoint = c.checkpoint;
  if (!c.data.empty()) cfg.data_dir = c.data;
  return cfg;
}

void log_line(const std::string& s) { std::cout << s << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical architecture search for deformable registration"};
  app.require_subcommand(1);

  Common common;
  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset into --out");
  auto* search = app.add_subcommand("search", "bi-level search, then decode the architecture");
  auto* retrain = app.add_subcommand("retrain", "train a decoded architecture and score it");
  auto* evaluate = app.add_subcommand("evaluate", "score a model checkpoint on one split");
  auto* reg = app.add_subcommand("register", "register one moving volume onto a fixed volume");
  auto* report = app.add_subcommand("report", "summarize a run directory");
  auto* config = app.add_subcommand("config", "print the resolved configuration, or every key with --keys");
  for (auto* cmd : {synth, search, retrain, evaluate, reg, config}) add_common(cmd, common);

  std::string fixed_path, moving_path, split, run_dir;
  reg->add_option("--fixed", fixed_path, "fixed volume (HNRG)")->required()->check(CLI::ExistingFile);
  reg->add_option("--moving", moving_path, "moving volume (HNRG)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--split", split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  report->add_option("dir", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);
  bool list_keys = false;
  config->add_flag("--keys", list_keys, "list every accepted key");

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      hnas::cmd_report(run_dir, std::cout);
      return 0;
    }
    auto cfg = build_config(common);
    if (config->parsed()) {
      if (list_keys) {
        for (const auto& [k, doc] : hnas::RunConfig::documented_keys()) std::cout << k << "\t" << doc << "\n";
      } else {
        std::cout << cfg.resolved().dump();
      }
    } else if (synth->parsed()) {
      hnas::cmd_synth(cfg, common.force, log_line);
    } else if (search->parsed()) {
      hnas::cmd_search(cfg, common.force, log_line);
    } else if (retrain->parsed()) {
      hnas::cmd_retrain(cfg, common.force, log_line);
    } else if (evaluate->parsed()) {
      if (!split.empty()) cfg.eval_split = hnas::parse_split(split);
      hnas::cmd_evaluate(cfg, common.force, log_line);
    } else if (reg->parsed()) {
      hnas::cmd_register(cfg, fixed_path, moving_path, common.force, log_line);
    }
    return 0;
  } catch (const hnas::ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const hnas::ParseError& e) {
    std::cerr << "error[parse]: " << e.what() << "\n";
    return 3;
  } catch (const hnas::NumericError& e) {
    std::cerr << "error[numeric]: " << e.what() << "\n";
    return 4;
  } catch (const hnas::ShapeError& e) {
    std::cerr << "error[shape]: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
