#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hnas/checkpoint.hpp"
#include "hnas/optim.hpp"
#include "hnas/random.hpp"
#include "hnas/regmath.hpp"
#include "hnas/searchspace.hpp"

namespace hnas {

/// Full hierarchical search, or cell-only search on a fixed U-shaped topology.
enum class SearchMode { Hierarchical, OpsOnly };

struct SearchConfig {
  double lr_arch = 1e-3;
  double lr_weights = 1e-4;
  double gamma = 0.2;  ///< weight of the α entropy term
  double beta = 0.1;   ///< weight of the η entropy term
  LossWeights loss = LossWeights::defaults(2);
  std::int64_t epochs = 2000;
  int steps_per_phase = 1;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double grad_clip = 0.0;  ///< gradient-norm clip; 0 disables
  bool cosine_decay = false;
  SearchMode mode = SearchMode::Hierarchical;

  void validate(int dims) const;
};

/// One registration example: I0 is warped towards I1.
struct ImagePair {
  Tensor moving;  ///< I0
  Tensor fixed;   ///< I1
};

struct StepLosses {
  double train = 0.0;
  double val = 0.0;
  double l_alpha = 0.0;
  double l_eta = 0.0;
};

/// Sum of the Shannon entropies −Σ p log p of the rows of `dist` (last axis).
/// Rows must be nonnegative and sum to 1.
Tensor entropy_penalty(const Tensor& dist);
/// Sum over a list of distributions.
Tensor entropy_penalty(std::span<const Tensor> rows);

/// Optimizer and data-order state carried across search steps.
struct SearchState {
  Adam weights;
  Adam arch;
  Rng data;
  std::int64_t epoch = 0;

  static SearchState fresh(const SearchConfig& cfg);
};

/// θ tensors, in optimizer order.
std::vector<Tensor> weight_tensors(const Supernet& net);
/// α, then η logits (the latter omitted in OpsOnly mode).
std::vector<Tensor> arch_tensors(const Supernet& net, SearchMode mode);

/// Phase A: Adam on θ against the symmetric loss of `train`. Phase B: Adam on
/// (α, η) against the symmetric loss of `val` plus γ·H(α) + β·H(η). First
/// order: θ is held fixed during phase B. Throws NumericError on a non-finite loss.
StepLosses search_step(Supernet& net, const ImagePair& train, const ImagePair& val, const SearchConfig& cfg,
                       SearchState& state);

/// η statistics over decision nodes (nodes with at least two live inputs).
struct EtaSummary {
  std::vector<std::string> nodes;
  std::vector<double> max_weight;
  double mean_entropy = 0.0;
  /// Fraction of decision nodes whose largest weight is ≥ 0.8.
  double confident_fraction = 0.0;
};
EtaSummary summarize_eta(const Supernet& net);

struct EpochRecord {
  std::int64_t epoch = 0;
  StepLosses losses;
  EtaSummary eta;
  std::array<double, kBlockKinds> alpha_max{};
  double wall_seconds = 0.0;
};

struct SearchHistory {
  std::vector<EpochRecord> records;

  /// Tab-separated, one row per epoch. Columns: epoch, train_loss, val_loss,
  /// l_alpha, l_eta, eta_entropy, eta_confident, alpha_max_{UpS,SameS,DownS},
  /// one eta_max column per decision node, wall_seconds.
  void write_tsv(std::ostream& out) const;
};

struct SearchHooks {
  /// Called after every `every` epochs and after the last one.
  std::function<void(const Supernet&, const SearchState&)> checkpoint;
  std::int64_t every = 0;
};

/// Runs epochs state.epoch … cfg.epochs − 1. Each epoch draws one train and
/// one validation pair from the data stream and performs one search_step.
SearchHistory run_search(Supernet& net, SearchState& state, const SearchConfig& cfg, std::span<const ImagePair> train,
                         std::span<const ImagePair> val, const SearchHooks& hooks = {});

/// Freezes η to the canonical U-shaped path for the cell-only ablation.
void prepare_ablation(Supernet& net);

/// Supernet plus optional search state in checkpoint form, and back.
Checkpoint save_search_checkpoint(const Supernet& net, const SearchState* state, std::uint64_t seed);
struct LoadedSearch {
  Supernet net;
  std::optional<SearchState> state;
};
LoadedSearch load_search_checkpoint(const Checkpoint& ckpt, const SearchConfig& cfg);

/// Shared helpers for checkpointing shapes and optimizer state.
void store_shape(Checkpoint& ckpt, const TopologyShape& shape);
TopologyShape load_shape(const Checkpoint& ckpt);
void store_adam(Checkpoint& ckpt, const std::string& prefix, const Adam& adam);
void load_adam(const Checkpoint& ckpt, const std::string& prefix, Adam& adam);

}  // namespace hnas
