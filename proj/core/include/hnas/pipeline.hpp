#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hnas/bilevel.hpp"
#include "hnas/decode.hpp"
#include "hnas/searchspace.hpp"
#include "hnas/synthdata.hpp"

namespace hnas {

enum class RunMode { Search, Ablation, Retrain };
std::string_view to_string(RunMode m);
RunMode parse_run_mode(std::string_view s);

/// Everything a pipeline command needs. `seed` is the only seed: it drives the
/// dataset, network initialization, partial-channel masks and data order.
struct RunConfig {
  std::uint64_t seed = 0;
  RunMode mode = RunMode::Search;
  std::filesystem::path data_dir = "data";
  std::filesystem::path out = "out";
  std::filesystem::path arch;
  std::filesystem::path checkpoint;
  Split eval_split = Split::Test;
  int checkpoint_every = 0;
  bool per_edge_alpha = false;

  TopologyShape shape;
  PartialChannelConfig pc;
  SearchConfig search;
  RetrainConfig retrain;
  DatasetSpec data;
  /// Explicit NCC window; empty means the per-dimension default.
  std::vector<int> ncc_window;

  /// Applies `key = value` lines; '#' starts a comment. Unknown keys and
  /// malformed values throw ConfigError naming the line.
  void apply(std::string_view text);
  void set(std::string_view key, std::string_view value);
  /// Propagates the seed, dimensionality and shared loss settings into the
  /// nested configs and validates all of them.
  RunConfig resolved() const;
  /// Fully resolved key = value text; parsing it back reproduces the config.
  std::string dump() const;

  static RunConfig load(const std::filesystem::path& path);
  /// Every accepted key with its one-line description.
  static std::vector<std::pair<std::string, std::string>> documented_keys();
};

/// Worker count for evaluation: hardware concurrency capped by HNAS_THREADS.
int thread_budget();

using Log = std::function<void(const std::string&)>;

struct SearchOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path history;
  std::filesystem::path arch;
  DiscreteArchitecture decoded;
};

struct RetrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::filesystem::path pairs;
  EvalReport report;
  std::int64_t parameters = 0;
};

/// Each command owns `cfg.out`: it refuses a non-empty directory unless
/// `force`, writes config.txt first and keeps a FAILED marker in place until
/// it finishes. On error the marker holds the message and the error is rethrown.
Manifest cmd_synth(const RunConfig& cfg, bool force, const Log& log = {});
SearchOutputs cmd_search(const RunConfig& cfg, bool force, const Log& log = {});
RetrainOutputs cmd_retrain(const RunConfig& cfg, bool force, const Log& log = {});
EvalReport cmd_evaluate(const RunConfig& cfg, bool force, const Log& log = {});
/// Registers `moving` onto `fixed` with the model at cfg.checkpoint and writes
/// warped.hnrg, velocity.hnrg and deformation.hnrg.
void cmd_register(const RunConfig& cfg, const std::filesystem::path& fixed, const std::filesystem::path& moving,
                  bool force, const Log& log = {});
/// Human-readable summary of a run directory.
void cmd_report(const std::filesystem::path& run_dir, std::ostream& out);

/// Key/value metrics of a retrained model, in file order.
std::vector<std::pair<std::string, std::string>> read_metrics(const std::filesystem::path& path);

}  // namespace hnas
