#include <algorithm>
#include <cmath>
#include <limits>

#include "hnas/error.hpp"
#include "hnas/searchspace.hpp"

namespace hnas {

namespace {
constexpr std::array<std::string_view, kBlockKinds> kBlockNames{"UpS", "SameS", "DownS"};
constexpr std::array<std::string_view, kOpCount> kOpNames{"SepConv3",    "AtrousConv7", "SepConv5",    "Conv1",
                                                          "AtrousConv3", "Conv3",       "AtrousConv5", "Conv5"};
}  // namespace

std::string_view to_string(BlockKind k) { return kBlockNames[static_cast<std::size_t>(k)]; }
std::string_view to_string(OpKind k) { return kOpNames[static_cast<std::size_t>(k)]; }

BlockKind parse_block_kind(std::string_view s) {
  for (int i = 0; i < kBlockKinds; ++i)
    if (kBlockNames[static_cast<std::size_t>(i)] == s) return static_cast<BlockKind>(i);
  throw ConfigError("unknown block kind '" + std::string(s) + "'");
}

OpKind parse_op_kind(std::string_view s) {
  for (int i = 0; i < kOpCount; ++i)
    if (kOpNames[static_cast<std::size_t>(i)] == s) return static_cast<OpKind>(i);
  throw ConfigError("unknown op kind '" + std::string(s) + "'");
}

OpGeometry op_geometry(OpKind k) {
  switch (k) {
    case OpKind::SepConv3: return {3, 1, true};
    case OpKind::AtrousConv7: return {7, kAtrousDilation, false};
    case OpKind::SepConv5: return {5, 1, true};
    case OpKind::Conv1: return {1, 1, false};
    case OpKind::AtrousConv3: return {3, kAtrousDilation, false};
    case OpKind::Conv3: return {3, 1, false};
    case OpKind::AtrousConv5: return {5, kAtrousDilation, false};
    case OpKind::Conv5: return {5, 1, false};
  }
  throw ConfigError("invalid op kind");
}

std::int64_t TopologyShape::channels(int resolution) const {
  const std::int64_t mult = std::min<std::int64_t>(std::int64_t{1} << resolution, channel_cap);
  return base_channels * mult;
}

void TopologyShape::validate() const {
  if (resolutions != 4) throw ConfigError("the topology grid has exactly 4 resolutions");
  if (layers < 2) throw ConfigError("layers must be >= 2");
  if (dims != 2 && dims != 3) throw ConfigError("spatial rank must be 2 or 3");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (channel_cap < 1) throw ConfigError("channel_cap must be >= 1");
  if (u_shape_stem < 0) throw ConfigError("u_shape_stem must be >= 0");
  if (u_shape_stem > 0) {
    if (layers < 5) throw ConfigError("u_shape_stem requires layers >= 5");
    if (2 * u_shape_stem > layers - 1 || u_shape_stem > resolutions - 1) {
      throw ConfigError("u_shape_stem too large for the layer count");
    }
  }
}

TopologyGraph::TopologyGraph(const TopologyShape& shape) : shape_(shape) {
  shape_.validate();
  const int L = shape_.layers, N = shape_.resolutions, u = shape_.u_shape_stem;
  for (int l = 1; l < L; ++l) {
    const int transition = l - 1;
    for (int to = 0; to < N; ++to) {
      for (int kind = 0; kind < kBlockKinds; ++kind) {
        const auto bk = static_cast<BlockKind>(kind);
        const int from = bk == BlockKind::UpS ? to + 1 : bk == BlockKind::SameS ? to : to - 1;
        if (from < 0 || from >= N) continue;
        if (transition < u && bk != BlockKind::DownS) continue;
        if (transition >= L - 1 - u && u > 0 && bk != BlockKind::UpS) continue;
        grid_.push_back({l, from, to, bk});
      }
    }
  }
  auto idx = [N](int l, int r) { return static_cast<std::size_t>(l * N + r); };
  std::vector<bool> fwd(static_cast<std::size_t>(L * N), false), bwd(fwd.size(), false);
  fwd[idx(0, 0)] = true;
  for (const auto& e : grid_)
    if (fwd[idx(e.layer - 1, e.from)]) fwd[idx(e.layer, e.to)] = true;
  bwd[idx(L - 1, 0)] = true;
  for (auto it = grid_.rbegin(); it != grid_.rend(); ++it)
    if (bwd[idx(it->layer, it->to)]) bwd[idx(it->layer - 1, it->from)] = true;

  live_node_.assign(fwd.size(), false);
  for (std::size_t i = 0; i < fwd.size(); ++i) live_node_[i] = fwd[i] && bwd[i];
  incoming_.assign(fwd.size(), {});
  for (const auto& e : grid_) {
    if (fwd[idx(e.layer - 1, e.from)] && bwd[idx(e.layer, e.to)]) {
      incoming_[idx(e.layer, e.to)].push_back(static_cast<int>(live_.size()));
      live_.push_back(e);
    }
  }
}

int TopologyGraph::grid_in_degree(int layer, int res) const {
  return static_cast<int>(
      std::count_if(grid_.begin(), grid_.end(), [&](const Edge& e) { return e.layer == layer && e.to == res; }));
}

bool TopologyGraph::node_live(int layer, int res) const {
  if (layer < 0 || layer >= shape_.layers || res < 0 || res >= shape_.resolutions) return false;
  return live_node_[static_cast<std::size_t>(layer * shape_.resolutions + res)];
}

const std::vector<int>& TopologyGraph::incoming(int layer, int res) const {
  return incoming_.at(static_cast<std::size_t>(layer * shape_.resolutions + res));
}

TopologyParams TopologyParams::zeros(const TopologyGraph& graph) {
  TopologyParams p;
  const auto& s = graph.shape();
  for (int l = 1; l < s.layers; ++l)
    for (int r = 0; r < s.resolutions; ++r) {
      if (!graph.node_live(l, r)) continue;
      const auto& in = graph.incoming(l, r);
      p.nodes.push_back({l, r, in, Tensor::zeros({static_cast<std::int64_t>(in.size())}, true)});
    }
  return p;
}

const NodeEta* TopologyParams::find(int layer, int res) const {
  for (const auto& n : nodes)
    if (n.layer == layer && n.res == res) return &n;
  return nullptr;
}

std::vector<Tensor> TopologyParams::leaves() const {
  std::vector<Tensor> out;
  for (const auto& n : nodes) out.push_back(n.logits);
  return out;
}

void TopologyParams::freeze_to_path(const TopologyGraph& graph, const std::vector<int>& path_edges) {
  (void)graph;
  for (auto& n : nodes) {
    const bool on_path = std::any_of(n.edges.begin(), n.edges.end(), [&](int e) {
      return std::find(path_edges.begin(), path_edges.end(), e) != path_edges.end();
    });
    if (!on_path) continue;
    auto v = n.logits.mutable_data();
    for (std::size_t i = 0; i < n.edges.size(); ++i) {
      const bool hit = std::find(path_edges.begin(), path_edges.end(), n.edges[i]) != path_edges.end();
      v[i] = hit ? 0.0 : -std::numeric_limits<double>::infinity();
    }
  }
}

std::vector<Tensor> normalize_eta(const TopologyParams& eta) {
  std::vector<Tensor> rows;
  rows.reserve(eta.nodes.size());
  for (const auto& n : eta.nodes) rows.push_back(ops::softmax(n.logits, 0));
  return rows;
}

CellParams CellParams::zeros(int live_edges, bool per_edge) {
  const std::int64_t rows = per_edge ? live_edges : kBlockKinds;
  return {Tensor::zeros({rows, kOpCount}, true), per_edge};
}

namespace search {

Shape level_extent(const Shape& full, int res) {
  Shape out;
  for (auto e : full) out.push_back((e + (std::int64_t{1} << res) - 1) >> res);
  return out;
}

std::vector<int> unet_path_edges(const TopologyGraph& graph) {
  const auto& s = graph.shape();
  const int depth = std::min(s.resolutions - 1, (s.layers - 1) / 2);
  std::vector<int> path;
  int res = 0;
  for (int t = 0; t < s.layers - 1; ++t) {
    int next = res;
    if (t < depth) next = res + 1;
    else if (t >= s.layers - 1 - depth) next = res - 1;
    const auto& in = graph.incoming(t + 1, next);
    auto it = std::find_if(in.begin(), in.end(), [&](int e) { return graph.live_edges()[static_cast<std::size_t>(e)].from == res; });
    if (it == in.end()) throw ConfigError("U-shaped path is not representable in this topology");
    path.push_back(*it);
    res = next;
  }
  return path;
}

}  // namespace search
}  // namespace hnas
