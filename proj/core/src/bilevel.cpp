#include "hnas/bilevel.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "hnas/error.hpp"

namespace hnas {

void SearchConfig::validate(int dims) const {
  if (!(lr_arch >= 0.0) || !(lr_weights > 0.0)) throw ConfigError("lr_weights must be > 0 and lr_arch >= 0");
  if (!(gamma >= 0.0) || !(beta >= 0.0)) throw ConfigError("gamma and beta must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (steps_per_phase < 1) throw ConfigError("steps_per_phase must be >= 1");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  loss.validate(dims);
}

namespace {

void check_rows(const Tensor& dist) {
  if (dist.rank() < 1) throw ShapeError("entropy: distribution needs at least one axis");
  const auto m = dist.shape().back();
  const auto rows = dist.numel() / std::max<std::int64_t>(m, 1);
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      const double p = dist.at(r * m + j);
      if (!(p >= 0.0)) throw NumericError("entropy: negative or NaN probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw NumericError("entropy: row sums to " + std::to_string(s));
  }
}

}  // namespace

Tensor entropy_penalty(const Tensor& dist) {
  check_rows(dist);
  return ops::neg(ops::sum(ops::xlogx(dist)));
}

Tensor entropy_penalty(std::span<const Tensor> rows) {
  if (rows.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (const auto& r : rows) {
    Tensor h = entropy_penalty(r);
    total = total.defined() ? ops::add(total, h) : h;
  }
  return total;
}

SearchState SearchState::fresh(const SearchConfig& cfg) {
  return {Adam(cfg.adam), Adam(cfg.adam), Rng(cfg.seed, "data-order"), 0};
}

std::vector<Tensor> weight_tensors(const Supernet& net) {
  std::vector<Tensor> out;
  for (auto& p : net.weight_parameters()) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> arch_tensors(const Supernet& net, SearchMode mode) {
  std::vector<Tensor> out{net.alpha().alpha};
  if (mode == SearchMode::Hierarchical)
    for (const auto& n : net.eta().nodes) out.push_back(n.logits);
  return out;
}

namespace {

void set_trainable(std::span<Tensor> ts, bool flag) {
  for (auto& t : ts) {
    t.set_requires_grad(flag);
    t.zero_grad();
  }
}

double finite_or_throw(const Tensor& loss, const char* phase, std::int64_t epoch) {
  const double x = loss.item();
  if (!std::isfinite(x)) {
    throw NumericError(std::string("non-finite ") + phase + " loss at epoch " + std::to_string(epoch));
  }
  return x;
}

double clip_scale(std::span<const Tensor> ts, double clip) {
  if (clip <= 0.0) return 1.0;
  const double n = grad_norm(ts);
  return n > clip ? clip / n : 1.0;
}

// Restores every parameter to trainable on scope exit, including on throw.
struct TrainableReset {
  std::array<std::vector<Tensor>*, 3> lists;
  ~TrainableReset() {
    for (auto* l : lists)
      for (auto& t : *l) t.set_requires_grad(true);
  }
};

}  // namespace

StepLosses search_step(Supernet& net, const ImagePair& train, const ImagePair& val, const SearchConfig& cfg,
                       SearchState& state) {
  auto theta = weight_tensors(net);
  auto arch = arch_tensors(net, cfg.mode);
  std::vector<Tensor> eta_all;
  for (const auto& n : net.eta().nodes) eta_all.push_back(n.logits);
  TrainableReset reset{{&theta, &arch, &eta_all}};
  const double lr_w = cfg.cosine_decay ? cosine_lr(cfg.lr_weights, state.epoch, cfg.epochs) : cfg.lr_weights;
  const double lr_a = cfg.cosine_decay ? cosine_lr(cfg.lr_arch, state.epoch, cfg.epochs) : cfg.lr_arch;
  StepLosses out;

  set_trainable(arch, false);
  set_trainable(eta_all, false);
  set_trainable(theta, true);
  for (int s = 0; s < cfg.steps_per_phase; ++s) {
    for (auto& t : theta) t.zero_grad();
    const Tensor loss = reg::symmetric_loss(train.moving, train.fixed, net.forward(train.moving, train.fixed), cfg.loss);
    out.train = finite_or_throw(loss, "train", state.epoch);
    backward(loss);
    state.weights.step(theta, lr_w, clip_scale(theta, cfg.grad_clip));
  }

  set_trainable(theta, false);
  set_trainable(arch, true);
  for (int s = 0; s < cfg.steps_per_phase; ++s) {
    for (auto& t : arch) t.zero_grad();
    const Tensor sim = reg::symmetric_loss(val.moving, val.fixed, net.forward(val.moving, val.fixed), cfg.loss);
    const Tensor la = entropy_penalty(net.alpha().probabilities());
    Tensor total = ops::add(sim, ops::scale(la, cfg.gamma));
    Tensor le = Tensor::scalar(0.0);
    if (cfg.mode == SearchMode::Hierarchical) {
      le = entropy_penalty(normalize_eta(net.eta()));
      total = ops::add(total, ops::scale(le, cfg.beta));
    }
    out.val = finite_or_throw(sim, "validation", state.epoch);
    out.l_alpha = la.item();
    out.l_eta = le.item();
    finite_or_throw(total, "architecture", state.epoch);
    backward(total);
    state.arch.step(arch, lr_a, clip_scale(arch, cfg.grad_clip));
  }
  for (auto& t : theta) t.zero_grad();
  for (auto& t : arch) t.zero_grad();
  return out;
}

EtaSummary summarize_eta(const Supernet& net) {
  NoGradGuard guard;
  EtaSummary s;
  const auto rows = normalize_eta(net.eta());
  double entropy = 0.0;
  int confident = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& n = net.eta().nodes[i];
    if (n.edges.size() < 2) continue;
    double mx = 0.0, h = 0.0;
    for (double p : rows[i].data()) {
      mx = std::max(mx, p);
      if (p > 0.0) h -= p * std::log(p);
    }
    s.nodes.push_back("L" + std::to_string(n.layer) + "R" + std::to_string(n.res));
    s.max_weight.push_back(mx);
    entropy += h;
    if (mx >= 0.8) ++confident;
  }
  if (!s.nodes.empty()) {
    s.mean_entropy = entropy / static_cast<double>(s.nodes.size());
    s.confident_fraction = static_cast<double>(confident) / static_cast<double>(s.nodes.size());
  }
  return s;
}

void SearchHistory::write_tsv(std::ostream& out) const {
  out << "epoch\ttrain_loss\tval_loss\tl_alpha\tl_eta\teta_entropy\teta_confident\talpha_max_UpS\talpha_max_SameS\t"
         "alpha_max_DownS";
  if (!records.empty())
    for (const auto& n : records.front().eta.nodes) out << "\teta_max_" << n;
  out << "\twall_seconds\n";
  out << std::setprecision(10);
  for (const auto& r : records) {
    out << r.epoch << '\t' << r.losses.train << '\t' << r.losses.val << '\t' << r.losses.l_alpha << '\t'
        << r.losses.l_eta << '\t' << r.eta.mean_entropy << '\t' << r.eta.confident_fraction;
    for (double a : r.alpha_max) out << '\t' << a;
    for (double m : r.eta.max_weight) out << '\t' << m;
    out << '\t' << std::setprecision(4) << r.wall_seconds << std::setprecision(10) << '\n';
  }
}

SearchHistory run_search(Supernet& net, SearchState& state, const SearchConfig& cfg, std::span<const ImagePair> train,
                         std::span<const ImagePair> val, const SearchHooks& hooks) {
  cfg.validate(net.shape().dims);
  SearchHistory history;
  if (state.epoch >= cfg.epochs) return history;
  if (train.empty() || val.empty()) throw ConfigError("search needs at least one training and one validation pair");
  const auto t0 = std::chrono::steady_clock::now();
  while (state.epoch < cfg.epochs) {
    const auto& tp = train[state.data.below(train.size())];
    const auto& vp = val[state.data.below(val.size())];
    EpochRecord rec;
    rec.epoch = state.epoch;
    rec.losses = search_step(net, tp, vp, cfg, state);
    ++state.epoch;
    rec.eta = summarize_eta(net);
    {
      NoGradGuard guard;
      const Tensor p = net.alpha().probabilities();
      const auto cols = p.dim(1);
      for (int k = 0; k < kBlockKinds && k < p.dim(0); ++k)
        for (std::int64_t j = 0; j < cols; ++j) rec.alpha_max[static_cast<std::size_t>(k)] = std::max(rec.alpha_max[static_cast<std::size_t>(k)], p.at(k * cols + j));
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.records.push_back(std::move(rec));
    const bool last = state.epoch == cfg.epochs;
    if (hooks.checkpoint && (last || (hooks.every > 0 && state.epoch % hooks.every == 0))) hooks.checkpoint(net, state);
  }
  return history;
}

void prepare_ablation(Supernet& net) { net.eta().freeze_to_path(net.graph(), search::unet_path_edges(net.graph())); }

void store_shape(Checkpoint& ckpt, const TopologyShape& s) {
  ckpt.set("shape.layers", std::to_string(s.layers));
  ckpt.set("shape.resolutions", std::to_string(s.resolutions));
  ckpt.set("shape.base_channels", std::to_string(s.base_channels));
  ckpt.set("shape.dims", std::to_string(s.dims));
  ckpt.set("shape.channel_cap", std::to_string(s.channel_cap));
  ckpt.set("shape.u_shape_stem", std::to_string(s.u_shape_stem));
}

TopologyShape load_shape(const Checkpoint& ckpt) {
  TopologyShape s;
  s.layers = std::stoi(ckpt.get("shape.layers"));
  s.resolutions = std::stoi(ckpt.get("shape.resolutions"));
  s.base_channels = std::stoi(ckpt.get("shape.base_channels"));
  s.dims = std::stoi(ckpt.get("shape.dims"));
  s.channel_cap = std::stoi(ckpt.get("shape.channel_cap"));
  s.u_shape_stem = std::stoi(ckpt.get("shape.u_shape_stem"));
  s.validate();
  return s;
}

void store_adam(Checkpoint& ckpt, const std::string& prefix, const Adam& adam) {
  ckpt.set(prefix + ".steps", std::to_string(adam.steps()));
  ckpt.set(prefix + ".buffers", std::to_string(adam.first_moments().size()));
  for (std::size_t i = 0; i < adam.first_moments().size(); ++i) {
    const auto n = static_cast<std::int64_t>(adam.first_moments()[i].size());
    ckpt.tensors.push_back({prefix + ".m." + std::to_string(i), Tensor::from({n}, adam.first_moments()[i])});
    ckpt.tensors.push_back({prefix + ".v." + std::to_string(i), Tensor::from({n}, adam.second_moments()[i])});
  }
}

void load_adam(const Checkpoint& ckpt, const std::string& prefix, Adam& adam) {
  const auto count = std::stoul(ckpt.get(prefix + ".buffers"));
  std::vector<std::vector<double>> m, v;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& tm = ckpt.tensor(prefix + ".m." + std::to_string(i));
    const auto& tv = ckpt.tensor(prefix + ".v." + std::to_string(i));
    m.emplace_back(tm.data().begin(), tm.data().end());
    v.emplace_back(tv.data().begin(), tv.data().end());
  }
  adam.restore(std::stoll(ckpt.get(prefix + ".steps")), std::move(m), std::move(v));
}

Checkpoint save_search_checkpoint(const Supernet& net, const SearchState* state, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.set("kind", "supernet");
  ckpt.set("seed", std::to_string(seed));
  store_shape(ckpt, net.shape());
  ckpt.set("pc.k", std::to_string(net.pc().k));
  ckpt.set("pc.rng_seed", std::to_string(net.pc().rng_seed));
  ckpt.set("pc.resample_per_step", net.pc().resample_per_step ? "1" : "0");
  ckpt.set("pc.rng", net.pc_rng().state());
  ckpt.set("pc.rng_snapshot", net.pc_rng_snapshot());
  ckpt.set("alpha.per_edge", net.alpha().per_edge ? "1" : "0");
  for (const auto& p : net.weight_parameters()) ckpt.add_tensor("theta." + p.name, p.tensor);
  for (const auto& p : net.arch_parameters()) ckpt.add_tensor("arch." + p.name, p.tensor);
  if (state) {
    ckpt.set("state.epoch", std::to_string(state->epoch));
    ckpt.set("state.data_rng", state->data.state());
    store_adam(ckpt, "adam.weights", state->weights);
    store_adam(ckpt, "adam.arch", state->arch);
  }
  return ckpt;
}

LoadedSearch load_search_checkpoint(const Checkpoint& ckpt, const SearchConfig& cfg) {
  if (ckpt.get("kind") != "supernet") throw ConfigError("checkpoint does not hold a supernet");
  PartialChannelConfig pc;
  pc.k = std::stoi(ckpt.get("pc.k"));
  pc.rng_seed = std::stoull(ckpt.get("pc.rng_seed"));
  pc.resample_per_step = ckpt.get("pc.resample_per_step") == "1";
  auto net = Supernet::build(load_shape(ckpt), pc, std::stoull(ckpt.get("seed")), ckpt.get("alpha.per_edge") == "1");
  for (auto& p : net.weight_parameters()) ckpt.load_into("theta." + p.name, p.tensor);
  for (auto& p : net.arch_parameters()) ckpt.load_into("arch." + p.name, p.tensor);
  net.pc_rng().set_state(ckpt.get("pc.rng"));
  net.set_pc_rng_snapshot(ckpt.get("pc.rng_snapshot"));
  LoadedSearch out{std::move(net), std::nullopt};
  if (ckpt.has("state.epoch")) {
    SearchState st = SearchState::fresh(cfg);
    st.epoch = std::stoll(ckpt.get("state.epoch"));
    st.data.set_state(ckpt.get("state.data_rng"));
    load_adam(ckpt, "adam.weights", st.weights);
    load_adam(ckpt, "adam.arch", st.arch);
    out.state = std::move(st);
  }
  return out;
}

}  // namespace hnas
