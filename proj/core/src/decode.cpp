#include "hnas/decode.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <nlohmann/json.hpp>
#include <ostream>
#include <queue>
#include <sstream>
#include <thread>

#include "binio.hpp"
#include "hnas/error.hpp"

namespace hnas {

BlockKind DiscreteArchitecture::kind_into(int layer) const {
  const int d = resolutions.at(static_cast<std::size_t>(layer)) - resolutions.at(static_cast<std::size_t>(layer - 1));
  return d > 0 ? BlockKind::DownS : d < 0 ? BlockKind::UpS : BlockKind::SameS;
}

void DiscreteArchitecture::validate() const {
  shape.validate();
  if (static_cast<int>(resolutions.size()) != shape.layers) {
    throw ConfigError("architecture path has " + std::to_string(resolutions.size()) + " nodes for " +
                      std::to_string(shape.layers) + " layers");
  }
  if (resolutions.front() != 0 || resolutions.back() != 0) throw ConfigError("architecture path must start and end at resolution 0");
  for (std::size_t i = 0; i < resolutions.size(); ++i) {
    if (resolutions[i] < 0 || resolutions[i] >= shape.resolutions) throw ConfigError("path resolution out of range");
    if (i > 0 && std::abs(resolutions[i] - resolutions[i - 1]) > 1) throw ConfigError("path skips a resolution level");
  }
}

namespace {

int kind_rank(BlockKind k) {
  switch (k) {
    case BlockKind::SameS: return 0;
    case BlockKind::UpS: return 1;
    case BlockKind::DownS: return 2;
  }
  return 3;
}

// Path costs within this relative margin count as equal, so ties survive
// summation-order rounding.
constexpr double kTieTolerance = 1e-9;

bool preferred(const Edge& a, const Edge& b) {
  if (kind_rank(a.kind) != kind_rank(b.kind)) return kind_rank(a.kind) < kind_rank(b.kind);
  return a.from < b.from;
}

}  // namespace

std::vector<double> edge_weights(const TopologyGraph& graph, const TopologyParams& eta) {
  std::vector<double> w(graph.live_edges().size(), 0.0);
  for (const auto& node : eta.nodes) {
    const auto logits = node.logits.data();
    const double mx = *std::ranges::max_element(logits);
    if (!std::isfinite(mx)) continue;
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    for (std::size_t j = 0; j < node.edges.size(); ++j)
      w.at(static_cast<std::size_t>(node.edges[j])) = std::exp(logits[j] - mx) / z;
  }
  return w;
}

std::vector<int> decode_topology(const TopologyGraph& graph, const TopologyParams& eta) {
  const auto w = edge_weights(graph, eta);
  return decode_path(graph, w);
}

std::vector<int> decode_path(const TopologyGraph& graph, std::span<const double> edge_eta) {
  const auto& s = graph.shape();
  const int L = s.layers, N = s.resolutions;
  const auto& edges = graph.live_edges();
  if (edge_eta.size() != edges.size()) throw ShapeError("decode: expected one weight per live edge");
  std::vector<std::vector<int>> out_edges(static_cast<std::size_t>(L * N));
  for (std::size_t e = 0; e < edges.size(); ++e)
    out_edges[static_cast<std::size_t>((edges[e].layer - 1) * N + edges[e].from)].push_back(static_cast<int>(e));

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(static_cast<std::size_t>(L * N), inf);
  std::vector<int> pred(dist.size(), -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  dist[0] = 0.0;
  queue.push({0.0, 0});
  while (!queue.empty()) {
    const auto [d, u] = queue.top();
    queue.pop();
    if (d > dist[static_cast<std::size_t>(u)]) continue;
    for (int e : out_edges[static_cast<std::size_t>(u)]) {
      const double w = edge_eta[static_cast<std::size_t>(e)];
      if (!(w > 0.0)) continue;
      const auto& edge = edges[static_cast<std::size_t>(e)];
      const auto v = static_cast<std::size_t>(edge.layer * N + edge.to);
      const double nd = d + (-std::log(w));
      const double tol = kTieTolerance * (1.0 + std::abs(nd));
      if (nd < dist[v] - tol) {
        dist[v] = nd;
        pred[v] = e;
        queue.push({nd, static_cast<int>(v)});
      } else if (nd <= dist[v] + tol && preferred(edge, edges[static_cast<std::size_t>(pred[v])])) {
        pred[v] = e;
      }
    }
  }
  const auto sink = static_cast<std::size_t>((L - 1) * N);
  if (!std::isfinite(dist[sink])) throw Error("decode: output node is unreachable under the given edge weights");
  std::vector<int> path(static_cast<std::size_t>(L - 1));
  std::size_t v = sink;
  for (int l = L - 1; l >= 1; --l) {
    const int e = pred[v];
    path[static_cast<std::size_t>(l - 1)] = e;
    v = static_cast<std::size_t>((l - 1) * N + edges[static_cast<std::size_t>(e)].from);
  }
  return path;
}

std::array<OpKind, kBlockKinds> decode_cells(const CellParams& alpha, const TopologyGraph& graph) {
  const Tensor& a = alpha.alpha;
  const auto cols = a.dim(1);
  auto argmax_row = [&](std::int64_t r) {
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < cols; ++j)
      if (a.at(r * cols + j) > a.at(r * cols + best)) best = j;
    return static_cast<int>(best);
  };
  std::array<OpKind, kBlockKinds> out{};
  if (!alpha.per_edge) {
    for (int k = 0; k < kBlockKinds; ++k) out[static_cast<std::size_t>(k)] = static_cast<OpKind>(argmax_row(k));
    return out;
  }
  for (int k = 0; k < kBlockKinds; ++k) {
    std::array<int, kOpCount> votes{};
    const auto& edges = graph.live_edges();
    for (std::size_t e = 0; e < edges.size(); ++e)
      if (static_cast<int>(edges[e].kind) == k) ++votes[static_cast<std::size_t>(argmax_row(static_cast<std::int64_t>(e)))];
    int best = 0;
    for (int o = 1; o < kOpCount; ++o)
      if (votes[static_cast<std::size_t>(o)] > votes[static_cast<std::size_t>(best)]) best = o;
    out[static_cast<std::size_t>(k)] = static_cast<OpKind>(best);
  }
  return out;
}

std::string arch_provenance(const Supernet& net) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& p : net.arch_parameters()) h = fnv1a(p.tensor.data().data(), p.tensor.data().size_bytes(), h);
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

DiscreteArchitecture architecture_from_path(const TopologyGraph& graph, const std::vector<int>& path_edges,
                                            const std::array<OpKind, kBlockKinds>& ops) {
  DiscreteArchitecture arch;
  arch.shape = graph.shape();
  arch.resolutions.push_back(0);
  for (int e : path_edges) arch.resolutions.push_back(graph.live_edges().at(static_cast<std::size_t>(e)).to);
  arch.ops = ops;
  arch.validate();
  return arch;
}

DiscreteArchitecture decode_architecture(const Supernet& net) {
  auto arch = architecture_from_path(net.graph(), decode_topology(net.graph(), net.eta()), decode_cells(net.alpha(), net.graph()));
  arch.provenance = arch_provenance(net);
  return arch;
}

// ---- architecture file ----

std::string arch_to_json(const DiscreteArchitecture& arch) {
  arch.validate();
  nlohmann::ordered_json j;
  j["format"] = "hnas-arch";
  j["version"] = 1;
  j["dims"] = arch.shape.dims;
  j["L"] = arch.shape.layers;
  j["N"] = arch.shape.resolutions;
  j["base_channels"] = arch.shape.base_channels;
  j["channel_cap"] = arch.shape.channel_cap;
  j["u_shape_stem"] = arch.shape.u_shape_stem;
  j["path"] = nlohmann::ordered_json::array();
  for (int l = 0; l < arch.shape.layers; ++l) {
    nlohmann::ordered_json node{{"layer", l}, {"resolution", arch.resolutions[static_cast<std::size_t>(l)]}};
    node["edge"] = l == 0 ? std::string("input") : std::string(to_string(arch.kind_into(l)));
    j["path"].push_back(node);
  }
  j["ops"] = {{"UpS", std::string(to_string(arch.ops[0]))},
              {"SameS", std::string(to_string(arch.ops[1]))},
              {"DownS", std::string(to_string(arch.ops[2]))}};
  j["provenance"] = arch.provenance;
  return j.dump(2) + "\n";
}

DiscreteArchitecture arch_from_json(const std::string& text) {
  DiscreteArchitecture arch;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "hnas-arch") throw ConfigError("not an architecture file");
    if (j.at("version") != 1) throw ConfigError("unsupported architecture file version");
    arch.shape.dims = j.at("dims").get<int>();
    arch.shape.layers = j.at("L").get<int>();
    arch.shape.resolutions = j.at("N").get<int>();
    arch.shape.base_channels = j.at("base_channels").get<int>();
    arch.shape.channel_cap = j.at("channel_cap").get<int>();
    arch.shape.u_shape_stem = j.at("u_shape_stem").get<int>();
    const auto& path = j.at("path");
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (path[i].at("layer").get<std::size_t>() != i) throw ConfigError("path layers must be 0, 1, 2, ...");
      arch.resolutions.push_back(path[i].at("resolution").get<int>());
    }
    const auto& ops = j.at("ops");
    for (int k = 0; k < kBlockKinds; ++k)
      arch.ops[static_cast<std::size_t>(k)] = parse_op_kind(ops.at(std::string(to_string(static_cast<BlockKind>(k)))).get<std::string>());
    arch.provenance = j.at("provenance").get<std::string>();
    arch.validate();
    for (std::size_t i = 1; i < path.size(); ++i) {
      if (parse_block_kind(path[i].at("edge").get<std::string>()) != arch.kind_into(static_cast<int>(i))) {
        throw ConfigError("edge kind at layer " + std::to_string(i) + " disagrees with the resolutions");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed architecture file: ") + e.what());
  }
  return arch;
}

void write_arch(const std::filesystem::path& path, const DiscreteArchitecture& arch) {
  const std::string text = arch_to_json(arch);
  binio::write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

DiscreteArchitecture read_arch(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return arch_from_json(std::string(bytes.begin(), bytes.end()));
}

// ---- discrete network ----

namespace {
Shape kernel(std::int64_t out, std::int64_t in, int k, int dims) {
  Shape s{out, in};
  s.insert(s.end(), static_cast<std::size_t>(dims), k);
  return s;
}
}  // namespace

DiscreteNet DiscreteNet::build(const DiscreteArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  DiscreteNet net(arch);
  const auto& s = arch.shape;
  Rng init(seed, "init");
  const auto c0 = s.channels(0);
  net.stem_in_w_ = search::kaiming(kernel(c0, 2, 3, s.dims), init);
  net.stem_in_b_ = Tensor::zeros({c0}, true);
  net.stem_out_w_ = Tensor::zeros(kernel(s.dims, c0, 1, s.dims), true);
  net.stem_out_b_ = Tensor::zeros({s.dims}, true);
  for (int l = 1; l < s.layers; ++l) {
    const auto cin = s.channels(arch.resolutions[static_cast<std::size_t>(l - 1)]);
    const auto cout = s.channels(arch.resolutions[static_cast<std::size_t>(l)]);
    BlockParams b;
    b.conv = search::kaiming(kernel(cout, cin, 3, s.dims), init);
    b.ops.push_back(search::init_op(arch.op_for(arch.kind_into(l)), cout, s.dims, init));
    net.blocks_.push_back(std::move(b));
  }
  return net;
}

VelocityField DiscreteNet::forward(const Tensor& i0, const Tensor& i1) const {
  const auto& s = arch_.shape;
  check_input_pair(i0, i1, s);
  const Shape full(i0.shape().begin() + 2, i0.shape().end());
  Tensor x = input_stem(i0, i1, stem_in_w_, stem_in_b_);
  for (int l = 1; l < s.layers; ++l) {
    const BlockKind kind = arch_.kind_into(l);
    const auto& b = blocks_[static_cast<std::size_t>(l - 1)];
    const Tensor h = search::block_prologue(kind, x, b.conv, search::level_extent(full, arch_.resolutions[static_cast<std::size_t>(l)]));
    x = search::block_epilogue(kind, x, search::apply_op(arch_.op_for(kind), h, b.ops.front()));
  }
  return VelocityField(output_stem(x, stem_out_w_, stem_out_b_));
}

std::vector<NamedTensor> DiscreteNet::parameters() const {
  std::vector<NamedTensor> out{{"stem_in.weight", stem_in_w_}, {"stem_in.bias", stem_in_b_}};
  for (std::size_t t = 0; t < blocks_.size(); ++t) {
    const std::string prefix = "block" + std::to_string(t + 1) + ".";
    out.push_back({prefix + "conv", blocks_[t].conv});
    out.push_back({prefix + "op.weight", blocks_[t].ops.front().weight});
    if (blocks_[t].ops.front().pointwise.defined()) out.push_back({prefix + "op.pointwise", blocks_[t].ops.front().pointwise});
  }
  out.push_back({"stem_out.weight", stem_out_w_});
  out.push_back({"stem_out.bias", stem_out_b_});
  return out;
}

std::int64_t DiscreteNet::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

// ---- retraining ----

void RetrainConfig::validate(int dims) const {
  if (!(lr > 0.0)) throw ConfigError("retrain learning rate must be > 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  loss.validate(dims);
}

RetrainState RetrainState::fresh(const RetrainConfig& cfg) { return {Adam(cfg.adam), Rng(cfg.seed, "retrain-order"), 0}; }

std::vector<TrainRecord> retrain(DiscreteNet& net, RetrainState& state, const RetrainConfig& cfg,
                                 std::span<const ImagePair> train, const RetrainHooks& hooks) {
  cfg.validate(net.arch().shape.dims);
  std::vector<TrainRecord> records;
  if (state.epoch >= cfg.epochs) return records;
  if (train.empty()) throw ConfigError("retraining needs at least one training pair");
  std::vector<Tensor> params;
  for (const auto& p : net.parameters()) params.push_back(p.tensor);
  const auto t0 = std::chrono::steady_clock::now();
  while (state.epoch < cfg.epochs) {
    const auto& pair = train[state.data.below(train.size())];
    for (auto& p : params) p.zero_grad();
    const Tensor loss = reg::symmetric_loss(pair.moving, pair.fixed, net.forward(pair.moving, pair.fixed), cfg.loss);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite retraining loss at epoch " + std::to_string(state.epoch));
    backward(loss);
    double scale = 1.0;
    if (cfg.grad_clip > 0.0) {
      const double n = grad_norm(params);
      if (n > cfg.grad_clip) scale = cfg.grad_clip / n;
    }
    const double lr = cfg.cosine_decay ? cosine_lr(cfg.lr, state.epoch, cfg.epochs) : cfg.lr;
    state.adam.step(params, lr, scale);
    for (auto& p : params) p.zero_grad();
    records.push_back({state.epoch, value, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    ++state.epoch;
    const bool last = state.epoch == cfg.epochs;
    if (hooks.checkpoint && (last || (hooks.every > 0 && state.epoch % hooks.every == 0))) hooks.checkpoint(net, state);
  }
  return records;
}

ImagePair image_pair(const RegistrationPair& p) { return {p.moving.intensity, p.fixed.intensity}; }

std::vector<ImagePair> image_pairs(std::span<const RegistrationPair> pairs) {
  std::vector<ImagePair> out;
  for (const auto& p : pairs) out.push_back(image_pair(p));
  return out;
}

// ---- evaluation ----

namespace {

PairMetrics evaluate_pair(const RegistrationModel& model, const RegistrationPair& p, const std::vector<int>& labels,
                          int steps) {
  NoGradGuard guard;
  PairMetrics m;
  const VelocityField v = model(p.moving.intensity, p.fixed.intensity);
  const auto phi = reg::integrate_velocity(v, steps);
  const auto warped = reg::warp_labels(p.moving.labels, phi);
  const auto d = reg::dice(warped, p.fixed.labels, labels);
  m.dice = d.scores;
  m.dice_mean = d.mean;
  m.identity_dice_mean = reg::dice(p.moving.labels, p.fixed.labels, labels).mean;
  m.min_jacobian = reg::min_jacobian_determinant(phi);
  if (p.gt_velocity) {
    const auto gt = reg::integrate_velocity(*p.gt_velocity, steps);
    m.epe = reg::mean_endpoint_error(phi, gt);
    m.identity_epe = reg::mean_displacement(gt);
  } else {
    m.epe = m.identity_epe = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

}  // namespace

EvalReport evaluate(const RegistrationModel& model, std::span<const RegistrationPair> pairs, int label_count,
                    int integration_steps, int threads) {
  EvalReport report;
  report.labels = foreground_labels(label_count);
  report.pairs.resize(pairs.size());
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(pairs.size())));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      try {
        report.pairs[i] = evaluate_pair(model, pairs[i], report.labels, integration_steps);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);
  return report;
}

double EvalReport::mean(double PairMetrics::*field) const {
  if (pairs.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& p : pairs) s += p.*field;
  return s / static_cast<double>(pairs.size());
}

double EvalReport::stddev(double PairMetrics::*field) const {
  if (pairs.size() < 2) return 0.0;
  const double mu = mean(field);
  double s = 0.0;
  for (const auto& p : pairs) s += (p.*field - mu) * (p.*field - mu);
  return std::sqrt(s / static_cast<double>(pairs.size() - 1));
}

std::vector<double> EvalReport::label_means() const {
  std::vector<double> out(labels.size(), 0.0);
  for (const auto& p : pairs)
    for (std::size_t i = 0; i < labels.size(); ++i) out[i] += p.dice[i];
  for (auto& x : out) x /= static_cast<double>(std::max<std::size_t>(pairs.size(), 1));
  return out;
}

void EvalReport::write_tsv(std::ostream& out) const {
  out << "pair\tdice_mean\tidentity_dice\tepe\tidentity_epe\tmin_jacobian";
  for (int l : labels) out << "\tdice_label_" << l;
  out << '\n' << std::setprecision(10);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    out << i << '\t' << p.dice_mean << '\t' << p.identity_dice_mean << '\t' << p.epe << '\t' << p.identity_epe << '\t'
        << p.min_jacobian;
    for (double d : p.dice) out << '\t' << d;
    out << '\n';
  }
  const auto lm = label_means();
  out << "mean\t" << mean(&PairMetrics::dice_mean) << '\t' << mean(&PairMetrics::identity_dice_mean) << '\t'
      << mean(&PairMetrics::epe) << '\t' << mean(&PairMetrics::identity_epe) << '\t' << mean(&PairMetrics::min_jacobian);
  for (double d : lm) out << '\t' << d;
  out << "\nstd\t" << stddev(&PairMetrics::dice_mean) << '\t' << stddev(&PairMetrics::identity_dice_mean) << '\t'
      << stddev(&PairMetrics::epe) << '\t' << stddev(&PairMetrics::identity_epe) << '\t'
      << stddev(&PairMetrics::min_jacobian);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double mu = lm[i], s = 0.0;
    for (const auto& p : pairs) s += (p.dice[i] - mu) * (p.dice[i] - mu);
    out << '\t' << (pairs.size() < 2 ? 0.0 : std::sqrt(s / static_cast<double>(pairs.size() - 1)));
  }
  out << '\n';
}

double model_megabytes(std::int64_t params) { return static_cast<double>(params) * 4.0 / (1024.0 * 1024.0); }

// ---- checkpoints ----

Checkpoint save_discrete_checkpoint(const DiscreteNet& net, const RetrainState* state, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.set("kind", "discrete");
  ckpt.set("seed", std::to_string(seed));
  ckpt.set("arch", arch_to_json(net.arch()));
  for (const auto& p : net.parameters()) ckpt.add_tensor("theta." + p.name, p.tensor);
  if (state) {
    ckpt.set("state.epoch", std::to_string(state->epoch));
    ckpt.set("state.data_rng", state->data.state());
    store_adam(ckpt, "adam", state->adam);
  }
  return ckpt;
}

LoadedDiscrete load_discrete_checkpoint(const Checkpoint& ckpt, const RetrainConfig& cfg) {
  if (ckpt.get("kind") != "discrete") throw ConfigError("checkpoint does not hold a discrete network");
  auto net = DiscreteNet::build(arch_from_json(ckpt.get("arch")), std::stoull(ckpt.get("seed")));
  for (auto& p : net.parameters()) ckpt.load_into("theta." + p.name, p.tensor);
  LoadedDiscrete out{std::move(net), std::nullopt};
  if (ckpt.has("state.epoch")) {
    RetrainState st = RetrainState::fresh(cfg);
    st.epoch = std::stoll(ckpt.get("state.epoch"));
    st.data.set_state(ckpt.get("state.data_rng"));
    load_adam(ckpt, "adam", st.adam);
    out.state = std::move(st);
  }
  return out;
}

}  // namespace hnas
