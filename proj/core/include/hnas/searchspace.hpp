#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hnas/ops.hpp"
#include "hnas/random.hpp"
#include "hnas/regmath.hpp"
#include "hnas/tensor.hpp"

namespace hnas {

/// Block type on a topology edge, named after what it does to resolution.
enum class BlockKind : int { UpS = 0, SameS = 1, DownS = 2 };
inline constexpr int kBlockKinds = 3;

/// Candidate cell operations. The enumerator order is the candidate-list
/// order used to break argmax ties during decoding.
enum class OpKind : int {
  SepConv3 = 0,
  AtrousConv7,
  SepConv5,
  Conv1,
  AtrousConv3,
  Conv3,
  AtrousConv5,
  Conv5,
};
inline constexpr int kOpCount = 8;
inline constexpr int kAtrousDilation = 2;

std::string_view to_string(BlockKind k);
std::string_view to_string(OpKind k);
BlockKind parse_block_kind(std::string_view s);
OpKind parse_op_kind(std::string_view s);

/// Kernel extent, dilation and whether the op is depthwise-separable.
struct OpGeometry {
  int kernel;
  int dilation;
  bool separable;
};
OpGeometry op_geometry(OpKind k);

struct TopologyShape {
  int layers = 8;
  int resolutions = 4;
  int base_channels = 8;
  int dims = 2;
  /// Channel doubling per coarser level stops at base_channels × channel_cap.
  int channel_cap = 8;
  /// Leading transitions restricted to DownS and trailing ones to UpS.
  int u_shape_stem = 0;

  std::int64_t channels(int resolution) const;
  void validate() const;
  bool operator==(const TopologyShape&) const = default;
};

struct PartialChannelConfig {
  int k = 4;
  std::uint64_t rng_seed = 0;
  bool resample_per_step = true;
};

/// Directed edge from node (layer − 1, from) to node (layer, to).
struct Edge {
  int layer = 0;
  int from = 0;
  int to = 0;
  BlockKind kind = BlockKind::SameS;
};

struct EdgeCount {
  int grid = 0;  ///< every edge of the layer × resolution grid
  int live = 0;  ///< edges on some path from the input node to the output node
};

/// The L × N grid with edges between adjacent resolutions of adjacent layers.
///
/// The input stem feeds node (0, 0) and the output stem reads node (L−1, 0),
/// so only edges lying on a path between those two nodes are searchable
/// ("live"); every other grid edge can never influence the velocity field.
class TopologyGraph {
 public:
  explicit TopologyGraph(const TopologyShape& shape);

  const TopologyShape& shape() const { return shape_; }
  int node_count() const { return shape_.layers * shape_.resolutions; }
  const std::vector<Edge>& grid_edges() const { return grid_; }
  const std::vector<Edge>& live_edges() const { return live_; }
  EdgeCount edge_count() const { return {static_cast<int>(grid_.size()), static_cast<int>(live_.size())}; }
  /// Number of grid edges entering (layer, res).
  int grid_in_degree(int layer, int res) const;
  bool node_live(int layer, int res) const;
  /// Indices into live_edges() of edges entering (layer, res), ordered UpS, SameS, DownS.
  const std::vector<int>& incoming(int layer, int res) const;

 private:
  TopologyShape shape_;
  std::vector<Edge> grid_;
  std::vector<Edge> live_;
  std::vector<bool> live_node_;
  std::vector<std::vector<int>> incoming_;
};

/// η: one logit per live incoming edge of every live node in layers ≥ 1.
struct NodeEta {
  int layer = 0;
  int res = 0;
  std::vector<int> edges;  ///< indices into TopologyGraph::live_edges()
  Tensor logits;
};

struct TopologyParams {
  std::vector<NodeEta> nodes;

  static TopologyParams zeros(const TopologyGraph& graph);
  const NodeEta* find(int layer, int res) const;
  std::vector<Tensor> leaves() const;
  /// Logit 0 on path edges and −inf elsewhere, so normalized η is one-hot along `path`.
  void freeze_to_path(const TopologyGraph& graph, const std::vector<int>& path_edges);
};

/// Per-node softmax of the logits; each row sums to 1.
std::vector<Tensor> normalize_eta(const TopologyParams& eta);

/// α: logits over the candidate ops, one row per block kind (or per live edge).
struct CellParams {
  Tensor alpha;  ///< [rows, kOpCount]
  bool per_edge = false;

  static CellParams zeros(int live_edges, bool per_edge);
  int row_for(int edge_index, BlockKind kind) const {
    return per_edge ? edge_index : static_cast<int>(kind);
  }
  /// Softmax over each row.
  Tensor probabilities() const { return ops::softmax(alpha, 1); }
};

struct OpParams {
  Tensor weight;     ///< dense kernel, or the depthwise kernel of a separable op
  Tensor pointwise;  ///< separable ops only
};

/// θ of one topology edge: the channel-adjusting 3×3 conv plus the cell ops.
struct BlockParams {
  Tensor conv;
  std::vector<OpParams> ops;  ///< kOpCount entries in the supernet, 1 in a discrete net
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace search {

/// Kaiming fan-in normal initialization for a conv weight of `shape`.
Tensor kaiming(const Shape& shape, Rng& rng);
OpParams init_op(OpKind kind, std::int64_t channels, int dims, Rng& rng);
std::int64_t op_parameter_count(OpKind kind, std::int64_t channels, int dims);

Tensor apply_op(OpKind kind, const Tensor& x, const OpParams& p);

/// Σ_o softmax(α)_o · o(x) over all candidates; `weights` holds the softmax row.
Tensor mixed_op(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops);

/// Partial-channel mixed op: channel group `group` of `k` contiguous groups goes
/// through mixed_op, the other groups bypass unchanged, and the result is
/// reassembled in the original channel order.
Tensor mixed_op_partial(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops, int k, int group);
/// As above with the group drawn uniformly from `rng`.
Tensor mixed_op_partial(const Tensor& x, const Tensor& weights, const std::vector<OpParams>& ops, int k, Rng& rng);

/// Scaling layer, 3×3 conv, instance norm and leaky rectifier: the part of a
/// block before its cell.
Tensor block_prologue(BlockKind kind, const Tensor& x, const Tensor& conv, const Shape& target_extent);
/// Leaky rectifier after the cell, plus the identity skip for SameS blocks.
Tensor block_epilogue(BlockKind kind, const Tensor& x, const Tensor& cell_out);

/// Full supernet block: prologue, partial-channel mixed cell, epilogue.
Tensor block_forward(BlockKind kind, const Tensor& x, const BlockParams& theta, const Tensor& alpha_weights,
                     const Shape& target_extent, int k, Rng& rng);

/// η-weighted sum of the incoming block outputs of one node. Terms whose
/// weight is exactly 0 may be passed as undefined tensors and are skipped.
Tensor node_forward(const std::vector<Tensor>& block_outputs, const Tensor& eta_row);

/// Extents of resolution level `res` for an input with spatial extents `full`.
Shape level_extent(const Shape& full, int res);

/// Live-edge indices of the canonical U-shaped path: descend as far as the
/// layer budget allows, stay, then ascend back to the finest level.
std::vector<int> unet_path_edges(const TopologyGraph& graph);

}  // namespace search

/// The relaxed supernet: stems, one block per live edge, α, η and the
/// partial-channel mask stream.
class Supernet {
 public:
  static Supernet build(const TopologyShape& shape, const PartialChannelConfig& pc, std::uint64_t seed,
                        bool per_edge_alpha = false);

  /// v = f(I0, I1). Spatial extents must be divisible by 2^(N−1).
  VelocityField forward(const Tensor& i0, const Tensor& i1);

  const TopologyShape& shape() const { return graph_.shape(); }
  const TopologyGraph& graph() const { return graph_; }
  const PartialChannelConfig& pc() const { return pc_; }
  EdgeCount edge_count() const { return graph_.edge_count(); }

  CellParams& alpha() { return alpha_; }
  const CellParams& alpha() const { return alpha_; }
  TopologyParams& eta() { return eta_; }
  const TopologyParams& eta() const { return eta_; }
  std::vector<BlockParams>& blocks() { return blocks_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  Tensor& stem_in_weight() { return stem_in_w_; }
  Tensor& stem_out_weight() { return stem_out_w_; }
  Tensor& stem_out_bias() { return stem_out_b_; }

  /// θ: every stem, block conv and cell op tensor.
  std::vector<NamedTensor> weight_parameters() const;
  /// α followed by the η logits of every node.
  std::vector<NamedTensor> arch_parameters() const;
  std::int64_t parameter_count() const;

  Rng& pc_rng() { return pc_rng_; }
  const Rng& pc_rng() const { return pc_rng_; }
  /// State the mask stream is rewound to before each forward when masks are frozen.
  const std::string& pc_rng_snapshot() const { return pc_rng_snapshot_; }
  void set_pc_rng_snapshot(std::string state) { pc_rng_snapshot_ = std::move(state); }

 private:
  explicit Supernet(const TopologyShape& shape) : graph_(shape) {}

  TopologyGraph graph_;
  PartialChannelConfig pc_;
  Tensor stem_in_w_, stem_in_b_, stem_out_w_, stem_out_b_;
  std::vector<BlockParams> blocks_;  ///< parallel to graph_.live_edges()
  CellParams alpha_;
  TopologyParams eta_;
  Rng pc_rng_;
  std::string pc_rng_snapshot_;
};

/// Rejects image pairs a network of `shape` cannot consume.
void check_input_pair(const Tensor& i0, const Tensor& i1, const TopologyShape& shape);

/// Stem helpers shared by the supernet and decoded networks.
Tensor input_stem(const Tensor& i0, const Tensor& i1, const Tensor& w, const Tensor& b);
Tensor output_stem(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace hnas
