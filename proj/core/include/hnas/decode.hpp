#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "hnas/bilevel.hpp"
#include "hnas/checkpoint.hpp"
#include "hnas/optim.hpp"
#include "hnas/searchspace.hpp"
#include "hnas/synthdata.hpp"

namespace hnas {

/// One path from the input node (0, 0) to the output node (L−1, 0) plus one
/// op per block kind.
struct DiscreteArchitecture {
  TopologyShape shape;
  std::vector<int> resolutions;  ///< one entry per layer
  std::array<OpKind, kBlockKinds> ops{OpKind::Conv3, OpKind::Conv3, OpKind::Conv3};
  std::string provenance;

  /// Block kind of the transition into layer `layer` (≥ 1).
  BlockKind kind_into(int layer) const;
  OpKind op_for(BlockKind k) const { return ops[static_cast<std::size_t>(k)]; }
  void validate() const;
  bool operator==(const DiscreteArchitecture&) const = default;
};

/// Normalized η per live edge. A node whose logits are all −inf gives its
/// inputs weight 0.
std::vector<double> edge_weights(const TopologyGraph& graph, const TopologyParams& eta);

/// Max-product path: Dijkstra with edge cost −log w; edges with w = 0 are
/// unusable. Costs within a relative margin of 1e-9 tie, and ties resolve
/// towards SameS, then UpS, then DownS, then the lower source resolution.
/// Returns live-edge indices, one per transition.
std::vector<int> decode_path(const TopologyGraph& graph, std::span<const double> weights);
std::vector<int> decode_topology(const TopologyGraph& graph, const TopologyParams& eta);

/// Argmax per row of α with ties going to the earlier candidate. With per-edge
/// α each kind takes the most frequent per-edge winner (ties to the earlier op).
std::array<OpKind, kBlockKinds> decode_cells(const CellParams& alpha, const TopologyGraph& graph);

/// Hex FNV-1a over the α and η logits.
std::string arch_provenance(const Supernet& net);

DiscreteArchitecture decode_architecture(const Supernet& net);
DiscreteArchitecture architecture_from_path(const TopologyGraph& graph, const std::vector<int>& path_edges,
                                            const std::array<OpKind, kBlockKinds>& ops);

std::string arch_to_json(const DiscreteArchitecture& arch);
DiscreteArchitecture arch_from_json(const std::string& text);
void write_arch(const std::filesystem::path& path, const DiscreteArchitecture& arch);
DiscreteArchitecture read_arch(const std::filesystem::path& path);

/// The retrainable single-path network: stems plus one full-channel block per
/// path transition, each running the decoded op of its kind.
class DiscreteNet {
 public:
  static DiscreteNet build(const DiscreteArchitecture& arch, std::uint64_t seed);

  VelocityField forward(const Tensor& i0, const Tensor& i1) const;
  const DiscreteArchitecture& arch() const { return arch_; }
  std::vector<NamedTensor> parameters() const;
  std::int64_t parameter_count() const;
  Tensor& stem_out_weight() { return stem_out_w_; }

 private:
  explicit DiscreteNet(DiscreteArchitecture arch) : arch_(std::move(arch)) {}
  DiscreteArchitecture arch_;
  Tensor stem_in_w_, stem_in_b_, stem_out_w_, stem_out_b_;
  std::vector<BlockParams> blocks_;  ///< blocks_[t] feeds layer t + 1
};

struct RetrainConfig {
  double lr = 1e-4;
  LossWeights loss = LossWeights::defaults(2);
  std::int64_t epochs = 2000;
  std::uint64_t seed = 0;
  AdamConfig adam;
  double grad_clip = 0.0;
  bool cosine_decay = false;

  void validate(int dims) const;
};

struct RetrainState {
  Adam adam;
  Rng data;
  std::int64_t epoch = 0;

  static RetrainState fresh(const RetrainConfig& cfg);
};

struct TrainRecord {
  std::int64_t epoch = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct RetrainHooks {
  std::function<void(const DiscreteNet&, const RetrainState&)> checkpoint;
  std::int64_t every = 0;
};

/// Single-level Adam on the symmetric loss over pairs drawn from the data stream.
std::vector<TrainRecord> retrain(DiscreteNet& net, RetrainState& state, const RetrainConfig& cfg,
                                 std::span<const ImagePair> train, const RetrainHooks& hooks = {});

ImagePair image_pair(const RegistrationPair& p);
std::vector<ImagePair> image_pairs(std::span<const RegistrationPair> pairs);

struct PairMetrics {
  std::vector<double> dice;  ///< per foreground label
  double dice_mean = 0.0;
  double identity_dice_mean = 0.0;
  double epe = 0.0;           ///< NaN without ground truth
  double identity_epe = 0.0;  ///< NaN without ground truth
  double min_jacobian = 0.0;
};

struct EvalReport {
  std::vector<int> labels;
  std::vector<PairMetrics> pairs;

  double mean(double PairMetrics::*field) const;
  double stddev(double PairMetrics::*field) const;  ///< sample standard deviation
  /// Per-label mean Dice, parallel to `labels`.
  std::vector<double> label_means() const;
  /// Tab-separated per-pair rows followed by mean and std rows.
  void write_tsv(std::ostream& out) const;
};

using RegistrationModel = std::function<VelocityField(const Tensor& moving, const Tensor& fixed)>;

/// Registers every pair (moving onto fixed) and scores the warped moving labels
/// against the fixed labels. Runs on up to `threads` threads.
EvalReport evaluate(const RegistrationModel& model, std::span<const RegistrationPair> pairs, int label_count,
                    int integration_steps, int threads = 1);

/// Parameter bytes at 4 bytes per parameter, in MiB.
double model_megabytes(std::int64_t params);

Checkpoint save_discrete_checkpoint(const DiscreteNet& net, const RetrainState* state, std::uint64_t seed);
struct LoadedDiscrete {
  DiscreteNet net;
  std::optional<RetrainState> state;
};
LoadedDiscrete load_discrete_checkpoint(const Checkpoint& ckpt, const RetrainConfig& cfg);

}  // namespace hnas
