#include "hnas/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include "hnas/error.hpp"

namespace hnas {

namespace fs = std::filesystem;

std::string_view to_string(RunMode m) {
  switch (m) {
    case RunMode::Search: return "search";
    case RunMode::Ablation: return "ablation";
    case RunMode::Retrain: return "retrain";
  }
  return "?";
}

RunMode parse_run_mode(std::string_view s) {
  if (s == "search") return RunMode::Search;
  if (s == "ablation") return RunMode::Ablation;
  if (s == "retrain") return RunMode::Retrain;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected search, ablation or retrain)");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ConfigError("bad value '" + std::string(text) + "' for " + std::string(key));
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean '" + std::string(text) + "' for " + std::string(key));
}

std::vector<std::int64_t> parse_extents(std::string_view key, std::string_view text) {
  std::vector<std::int64_t> out;
  std::size_t start = 0;
  while (true) {
    const auto x = text.find('x', start);
    out.push_back(parse_number<std::int64_t>(key, text.substr(start, x - start)));
    if (x == std::string_view::npos) break;
    start = x + 1;
  }
  return out;
}

std::string fmt(double x) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, ptr);
}

template <class T>
std::string fmt_int(T x) {
  return std::to_string(x);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <class T>
std::string join(const std::vector<T>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(v[i]);
  }
  return s;
}

struct Key {
  const char* name;
  const char* doc;
  std::function<void(RunConfig&, std::string_view, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define HNAS_INT_KEY(NAME, FIELD, DOC)                                                                      \
  Key {                                                                                                     \
    NAME, DOC, [](RunConfig& c, std::string_view k, std::string_view v) {                                   \
      c.FIELD = parse_number<std::remove_cvref_t<decltype(c.FIELD)>>(k, v);                                 \
    },                                                                                                      \
        [](const RunConfig& c) { return fmt_int(c.FIELD); }                                                 \
  }
#define HNAS_REAL_KEY(NAME, FIELD, DOC)                                                                     \
  Key {                                                                                                     \
    NAME, DOC, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_number<double>(k, v); }, \
        [](const RunConfig& c) { return fmt(c.FIELD); }                                                     \
  }
#define HNAS_BOOL_KEY(NAME, FIELD, DOC)                                                                     \
  Key {                                                                                                     \
    NAME, DOC, [](RunConfig& c, std::string_view k, std::string_view v) { c.FIELD = parse_bool(k, v); },   \
        [](const RunConfig& c) { return fmt_bool(c.FIELD); }                                                \
  }
#define HNAS_PATH_KEY(NAME, FIELD, DOC)                                                                     \
  Key {                                                                                                     \
    NAME, DOC, [](RunConfig& c, std::string_view, std::string_view v) { c.FIELD = fs::path(std::string(v)); }, \
        [](const RunConfig& c) { return c.FIELD.string(); }                                                 \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      HNAS_INT_KEY("seed", seed, "single seed for data, initialization, channel masks and data order"),
      Key{"mode", "search | ablation (cell-only search on the fixed U-shaped path) | retrain",
          [](RunConfig& c, std::string_view, std::string_view v) { c.mode = parse_run_mode(v); },
          [](const RunConfig& c) { return std::string(to_string(c.mode)); }},
      HNAS_PATH_KEY("data_dir", data_dir, "directory holding manifest.json"),
      HNAS_PATH_KEY("out", out, "output directory of the command"),
      HNAS_PATH_KEY("arch", arch, "architecture file for retrain"),
      HNAS_PATH_KEY("checkpoint", checkpoint, "model checkpoint (evaluate, register) or checkpoint to resume from"),
      Key{"split", "split scored by retrain and evaluate",
          [](RunConfig& c, std::string_view, std::string_view v) { c.eval_split = parse_split(v); },
          [](const RunConfig& c) { return std::string(to_string(c.eval_split)); }},
      HNAS_INT_KEY("checkpoint_every", checkpoint_every, "epochs between intermediate checkpoints; 0 writes only the final one"),
      HNAS_BOOL_KEY("per_edge_alpha", per_edge_alpha, "one α row per edge instead of per block kind"),

      HNAS_INT_KEY("layers", shape.layers, "L, number of layers"),
      HNAS_INT_KEY("resolutions", shape.resolutions, "N, number of resolution levels"),
      HNAS_INT_KEY("base_channels", shape.base_channels, "channels at the finest level"),
      HNAS_INT_KEY("dims", shape.dims, "spatial dimensionality; must match size"),
      HNAS_INT_KEY("channel_cap", shape.channel_cap, "channel ceiling as a multiple of base_channels"),
      HNAS_INT_KEY("u_shape_stem", shape.u_shape_stem, "leading transitions forced to DownS and trailing ones to UpS"),
      HNAS_INT_KEY("pc_k", pc.k, "partial-channel group count"),
      HNAS_BOOL_KEY("pc_resample_per_step", pc.resample_per_step, "redraw channel groups every forward"),

      HNAS_REAL_KEY("lr_arch", search.lr_arch, "Adam learning rate of α and η"),
      HNAS_REAL_KEY("lr_weights", search.lr_weights, "Adam learning rate of θ during search"),
      HNAS_REAL_KEY("gamma", search.gamma, "weight of the α entropy term"),
      HNAS_REAL_KEY("beta", search.beta, "weight of the η entropy term"),
      HNAS_INT_KEY("search_epochs", search.epochs, "search epochs (one train and one validation pair each)"),
      HNAS_INT_KEY("steps_per_phase", search.steps_per_phase, "optimizer steps per phase per epoch"),
      HNAS_REAL_KEY("search_grad_clip", search.grad_clip, "gradient-norm clip during search; 0 disables"),
      HNAS_BOOL_KEY("search_cosine", search.cosine_decay, "cosine learning-rate decay during search"),

      HNAS_REAL_KEY("retrain_lr", retrain.lr, "Adam learning rate of the retrained network"),
      HNAS_INT_KEY("retrain_epochs", retrain.epochs, "retrain epochs (one training pair each)"),
      HNAS_REAL_KEY("retrain_grad_clip", retrain.grad_clip, "gradient-norm clip during retraining; 0 disables"),
      HNAS_BOOL_KEY("retrain_cosine", retrain.cosine_decay, "cosine learning-rate decay during retraining"),

      HNAS_REAL_KEY("lambda_smooth", search.loss.lambda_smooth, "weight of the velocity smoothness term"),
      Key{"ncc_window", "local NCC window, one odd extent per dimension (comma separated); empty = 9 in 2D, 5 in 3D",
          [](RunConfig& c, std::string_view k, std::string_view v) {
            c.ncc_window.clear();
            std::size_t start = 0;
            while (!v.empty()) {
              const auto comma = v.find(',', start);
              c.ncc_window.push_back(parse_number<int>(k, trim(v.substr(start, comma - start))));
              if (comma == std::string_view::npos) break;
              start = comma + 1;
            }
          },
          [](const RunConfig& c) { return join(c.ncc_window, ','); }},
      HNAS_INT_KEY("integration_steps", search.loss.integration_steps, "scaling-and-squaring steps"),
      HNAS_REAL_KEY("ncc_eps", search.loss.ncc_eps, "NCC denominator stabilizer"),
      HNAS_REAL_KEY("adam_beta1", search.adam.beta1, "Adam first-moment decay"),
      HNAS_REAL_KEY("adam_beta2", search.adam.beta2, "Adam second-moment decay"),
      HNAS_REAL_KEY("adam_eps", search.adam.eps, "Adam denominator stabilizer"),

      Key{"size", "spatial extents of synthetic volumes, e.g. 64x64 or 32x32x32",
          [](RunConfig& c, std::string_view k, std::string_view v) { c.data.volume.size = parse_extents(k, v); },
          [](const RunConfig& c) { return join(c.data.volume.size, 'x'); }},
      HNAS_INT_KEY("label_count", data.volume.label_count, "labels per volume including background"),
      HNAS_REAL_KEY("blob_sigma", data.volume.blob_sigma, "smoothing width of the region fields"),
      HNAS_REAL_KEY("texture", data.volume.texture, "amplitude of smooth intensity noise"),
      HNAS_REAL_KEY("warp_scale", data.warp_scale, "maximum ground-truth velocity magnitude in voxels"),
      HNAS_REAL_KEY("warp_sigma", data.warp_sigma, "smoothing width of the ground-truth velocity"),
      HNAS_INT_KEY("train", data.train, "training pairs"),
      HNAS_INT_KEY("val", data.val, "validation pairs"),
      HNAS_INT_KEY("test", data.test, "test pairs"),
  };
  return table;
}

#undef HNAS_INT_KEY
#undef HNAS_REAL_KEY
#undef HNAS_BOOL_KEY
#undef HNAS_PATH_KEY

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto& table = keys();
  const auto it = std::ranges::find_if(table, [&](const Key& k) { return key == k.name; });
  if (it == table.end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->set(*this, key, value);
}

void RunConfig::apply(std::string_view text) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    auto line = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    ++line_no;
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig cfg;
  cfg.apply(ss.str());
  return cfg;
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  if (static_cast<int>(r.data.volume.size.size()) != r.shape.dims)
    throw ConfigError("size has " + std::to_string(r.data.volume.size.size()) + " extents but dims = " +
                      std::to_string(r.shape.dims));
  if (r.ncc_window.empty()) r.ncc_window = LossWeights::defaults(r.shape.dims).ncc_window;
  r.search.loss.ncc_window = r.ncc_window;
  r.retrain.loss = r.search.loss;
  r.retrain.adam = r.search.adam;
  r.search.seed = r.retrain.seed = r.data.seed = r.pc.rng_seed = r.seed;
  r.search.mode = r.mode == RunMode::Ablation ? SearchMode::OpsOnly : SearchMode::Hierarchical;
  if (r.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  r.shape.validate();
  r.data.validate();
  r.search.validate(r.shape.dims);
  r.retrain.validate(r.shape.dims);
  if (r.pc.k < 1) throw ConfigError("pc_k must be >= 1");
  return r;
}

std::string RunConfig::dump() const {
  std::string s;
  for (const auto& k : keys()) s += std::string(k.name) + " = " + k.get(*this) + "\n";
  return s;
}

std::vector<std::pair<std::string, std::string>> RunConfig::documented_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : keys()) out.emplace_back(k.name, k.doc);
  return out;
}

int thread_budget() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("HNAS_THREADS"); env && *env) {
    const int cap = parse_number<int>("HNAS_THREADS", env);
    if (cap < 1) throw ConfigError("HNAS_THREADS must be >= 1");
    n = std::min(n, cap);
  }
  return n;
}

namespace {

constexpr const char* kFailedMarker = "FAILED";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

/// Claims an output directory, runs `body`, and leaves FAILED behind on error.
template <class F>
auto run_in(const fs::path& dir, const std::string& config_text, bool force, F&& body) {
  if (dir.empty()) throw ConfigError("no output directory");
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force)
    throw ConfigError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
  fs::create_directories(dir);
  const auto marker = dir / kFailedMarker;
  write_text(marker, "incomplete: the command did not finish\n");
  try {
    write_text(dir / "config.txt", config_text);
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      fs::remove(marker);
    } else {
      auto result = body();
      fs::remove(marker);
      return result;
    }
  } catch (const std::exception& e) {
    std::ofstream(marker, std::ios::trunc) << e.what() << "\n";
    throw;
  }
}

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

struct Dataset {
  Manifest manifest;
  std::vector<RegistrationPair> pairs;
};

Dataset load_split(const RunConfig& cfg, Split split) {
  const auto manifest = Manifest::read(cfg.data_dir / "manifest.json");
  if (static_cast<int>(manifest.spec.volume.size.size()) != cfg.shape.dims)
    throw ConfigError("dataset in " + cfg.data_dir.string() + " is " +
                      std::to_string(manifest.spec.volume.size.size()) + "-dimensional but dims = " +
                      std::to_string(cfg.shape.dims));
  auto pairs = load_dataset(manifest, cfg.data_dir, split);
  if (pairs.empty()) throw ConfigError("dataset has no " + std::string(to_string(split)) + " pairs");
  return {manifest, std::move(pairs)};
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fixed(double x, int digits = 6) {
  std::ostringstream s;
  s << std::setprecision(digits) << std::fixed << x;
  return s.str();
}

LoadedDiscrete load_model(const RunConfig& cfg) {
  if (cfg.checkpoint.empty()) throw ConfigError("no model checkpoint given");
  const auto ckpt = read_checkpoint(cfg.checkpoint);
  if (!ckpt.has("kind") || ckpt.get("kind") != "discrete")
    throw ConfigError(cfg.checkpoint.string() + " is not a retrained model checkpoint");
  return load_discrete_checkpoint(ckpt, cfg.retrain);
}

RegistrationModel as_model(const DiscreteNet& net) {
  return [&net](const Tensor& moving, const Tensor& fixed) { return net.forward(moving, fixed); };
}

void write_metrics(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& rows) {
  std::string s = "metric\tvalue\n";
  for (const auto& [k, v] : rows) s += k + "\t" + v + "\n";
  write_text(path, s);
}

std::vector<std::pair<std::string, std::string>> report_rows(const EvalReport& r, Split split) {
  std::vector<std::pair<std::string, std::string>> rows = {
      {"split", std::string(to_string(split))},
      {"pairs", std::to_string(r.pairs.size())},
      {"dice_mean", fmt(r.mean(&PairMetrics::dice_mean))},
      {"dice_std", fmt(r.stddev(&PairMetrics::dice_mean))},
      {"identity_dice_mean", fmt(r.mean(&PairMetrics::identity_dice_mean))},
      {"identity_dice_std", fmt(r.stddev(&PairMetrics::identity_dice_mean))},
      {"epe_mean", fmt(r.mean(&PairMetrics::epe))},
      {"epe_std", fmt(r.stddev(&PairMetrics::epe))},
      {"identity_epe_mean", fmt(r.mean(&PairMetrics::identity_epe))},
      {"min_jacobian_mean", fmt(r.mean(&PairMetrics::min_jacobian))},
  };
  const auto label_means = r.label_means();
  for (std::size_t i = 0; i < r.labels.size(); ++i)
    rows.emplace_back("dice_label_" + std::to_string(r.labels[i]), fmt(label_means[i]));
  return rows;
}

void write_report(const fs::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::binary);
  r.write_tsv(out);
  if (!out) throw Error("cannot write " + path.string());
}

}  // namespace

Manifest cmd_synth(const RunConfig& raw, bool force, const Log& log) {
  const auto cfg = raw.resolved();
  return run_in(cfg.out, cfg.dump(), force, [&] {
    const auto t0 = std::chrono::steady_clock::now();
    auto manifest = write_dataset(cfg.data, cfg.out);
    say(log, "wrote " + std::to_string(manifest.pairs.size()) + " pairs to " + cfg.out.string() + " in " +
                 fixed(elapsed(t0), 1) + " s");
    return manifest;
  });
}

SearchOutputs cmd_search(const RunConfig& raw, bool force, const Log& log) {
  const auto cfg = raw.resolved();
  if (cfg.mode == RunMode::Retrain) throw ConfigError("search needs mode = search or ablation");
  return run_in(cfg.out, cfg.dump(), force, [&] {
    const auto train = image_pairs(load_split(cfg, Split::Train).pairs);
    const auto val = image_pairs(load_split(cfg, Split::Val).pairs);

    std::optional<LoadedSearch> loaded;
    if (!cfg.checkpoint.empty()) {
      loaded.emplace(load_search_checkpoint(read_checkpoint(cfg.checkpoint), cfg.search));
      if (!loaded->state) throw ConfigError(cfg.checkpoint.string() + " carries no search state to resume");
      say(log, "resuming at epoch " + std::to_string(loaded->state->epoch));
    } else {
      loaded.emplace(LoadedSearch{Supernet::build(cfg.shape, cfg.pc, cfg.seed, cfg.per_edge_alpha),
                                  SearchState::fresh(cfg.search)});
      if (cfg.mode == RunMode::Ablation) prepare_ablation(loaded->net);
    }
    auto& net = loaded->net;
    auto& state = *loaded->state;

    SearchOutputs out{cfg.out / "supernet.ckpt", cfg.out / "history.tsv", cfg.out / "arch.json", {}};
    SearchHooks hooks;
    hooks.every = std::max<std::int64_t>(1, cfg.checkpoint_every > 0 ? cfg.checkpoint_every : cfg.search.epochs / 10);
    hooks.checkpoint = [&](const Supernet& n, const SearchState& s) {
      const auto eta = summarize_eta(n);
      say(log, "epoch " + std::to_string(s.epoch) + "/" + std::to_string(cfg.search.epochs) + "  eta entropy " +
                   fixed(eta.mean_entropy, 4) + "  confident " + fixed(eta.confident_fraction, 2));
      if (cfg.checkpoint_every > 0) write_checkpoint(out.checkpoint, save_search_checkpoint(n, &s, cfg.seed));
    };
    const auto history = run_search(net, state, cfg.search, train, val, hooks);

    write_checkpoint(out.checkpoint, save_search_checkpoint(net, &state, cfg.seed));
    {
      std::ofstream h(out.history, std::ios::binary);
      history.write_tsv(h);
      if (!h) throw Error("cannot write " + out.history.string());
    }
    out.decoded = decode_architecture(net);
    write_arch(out.arch, out.decoded);
    std::string path;
    for (int r : out.decoded.resolutions) path += std::to_string(r);
    say(log, "decoded path " + path + "  ops UpS " + std::string(to_string(out.decoded.ops[0])) + ", SameS " +
                 std::string(to_string(out.decoded.ops[1])) + ", DownS " + std::string(to_string(out.decoded.ops[2])));
    return out;
  });
}

RetrainOutputs cmd_retrain(const RunConfig& raw, bool force, const Log& log) {
  const auto cfg = raw.resolved();
  return run_in(cfg.out, cfg.dump(), force, [&] {
    const auto train_set = load_split(cfg, Split::Train);
    const auto eval_set = load_split(cfg, cfg.eval_split);
    const auto train = image_pairs(train_set.pairs);

    std::optional<LoadedDiscrete> loaded;
    if (!cfg.checkpoint.empty()) {
      loaded.emplace(load_model(cfg));
      if (!loaded->state) throw ConfigError(cfg.checkpoint.string() + " carries no training state to resume");
      say(log, "resuming at epoch " + std::to_string(loaded->state->epoch));
    } else {
      if (cfg.arch.empty()) throw ConfigError("retrain needs an architecture file (arch = PATH)");
      loaded.emplace(LoadedDiscrete{DiscreteNet::build(read_arch(cfg.arch), cfg.seed), RetrainState::fresh(cfg.retrain)});
    }
    auto& net = loaded->net;
    auto& state = *loaded->state;
    if (net.arch().shape.dims != cfg.shape.dims) throw ConfigError("architecture dims differ from the config's");

    RetrainOutputs out{cfg.out / "model.ckpt", cfg.out / "metrics.tsv", cfg.out / "pairs.tsv", {}, net.parameter_count()};
    RetrainHooks hooks;
    hooks.every = std::max<std::int64_t>(1, cfg.checkpoint_every > 0 ? cfg.checkpoint_every : cfg.retrain.epochs / 10);
    const auto t0 = std::chrono::steady_clock::now();
    hooks.checkpoint = [&](const DiscreteNet& n, const RetrainState& s) {
      say(log, "epoch " + std::to_string(s.epoch) + "/" + std::to_string(cfg.retrain.epochs) + "  " +
                   fixed(elapsed(t0), 1) + " s");
      if (cfg.checkpoint_every > 0) write_checkpoint(out.checkpoint, save_discrete_checkpoint(n, &s, cfg.seed));
    };
    const auto records = retrain(net, state, cfg.retrain, train, hooks);
    {
      std::string s = "epoch\tloss\n";
      for (const auto& r : records) s += std::to_string(r.epoch) + "\t" + fmt(r.loss) + "\n";
      write_text(cfg.out / "train.tsv", s);
    }
    write_checkpoint(out.checkpoint, save_discrete_checkpoint(net, &state, cfg.seed));

    out.report = evaluate(as_model(net), eval_set.pairs, eval_set.manifest.spec.volume.label_count,
                          cfg.retrain.loss.integration_steps, thread_budget());
    write_report(out.pairs, out.report);

    const auto supernet = Supernet::build(net.arch().shape, cfg.pc, cfg.seed, cfg.per_edge_alpha);
    std::vector<std::pair<std::string, std::string>> rows = {
        {"parameters", std::to_string(out.parameters)},
        {"model_mb", fixed(model_megabytes(out.parameters), 6)},
        {"supernet_parameters", std::to_string(supernet.parameter_count())},
        {"supernet_mb", fixed(model_megabytes(supernet.parameter_count()), 6)},
        {"epochs", std::to_string(state.epoch)},
        {"final_loss", records.empty() ? "nan" : fmt(records.back().loss)},
    };
    for (auto& row : report_rows(out.report, cfg.eval_split)) rows.push_back(std::move(row));
    write_metrics(out.metrics, rows);
    say(log, "dice " + fixed(out.report.mean(&PairMetrics::dice_mean), 4) + " (identity " +
                 fixed(out.report.mean(&PairMetrics::identity_dice_mean), 4) + ")  epe " +
                 fixed(out.report.mean(&PairMetrics::epe), 4) + " (identity " +
                 fixed(out.report.mean(&PairMetrics::identity_epe), 4) + ")  " + std::to_string(out.parameters) +
                 " parameters, " + fixed(model_megabytes(out.parameters), 3) + " MB");
    return out;
  });
}

EvalReport cmd_evaluate(const RunConfig& raw, bool force, const Log& log) {
  const auto cfg = raw.resolved();
  return run_in(cfg.out, cfg.dump(), force, [&] {
    const auto model = load_model(cfg);
    const auto set = load_split(cfg, cfg.eval_split);
    auto report = evaluate(as_model(model.net), set.pairs, set.manifest.spec.volume.label_count,
                           cfg.retrain.loss.integration_steps, thread_budget());
    write_report(cfg.out / "pairs.tsv", report);
    write_metrics(cfg.out / "metrics.tsv", report_rows(report, cfg.eval_split));
    say(log, "dice " + fixed(report.mean(&PairMetrics::dice_mean), 4) + " ± " +
                 fixed(report.stddev(&PairMetrics::dice_mean), 4) + " over " + std::to_string(report.pairs.size()) +
                 " pairs");
    return report;
  });
}

void cmd_register(const RunConfig& raw, const fs::path& fixed_path, const fs::path& moving_path, bool force,
                  const Log& log) {
  const auto cfg = raw.resolved();
  run_in(cfg.out, cfg.dump(), force, [&] {
    const auto model = load_model(cfg);
    const auto fixed_vol = read_volume(fixed_path);
    const auto moving_vol = read_volume(moving_path);
    NoGradGuard guard;
    const auto v = model.net.forward(moving_vol.intensity, fixed_vol.intensity);
    const auto phi = reg::integrate_velocity(v, cfg.retrain.loss.integration_steps);
    LabeledVolume warped{reg::warp(moving_vol.intensity, phi), reg::warp_labels(moving_vol.labels, phi),
                         "kind=warped\nmoving=" + moving_path.filename().string() + "\n"};
    write_volume(cfg.out / "warped.hnrg", warped);
    write_volume(cfg.out / "velocity.hnrg", field_volume(v.v, "kind=velocity\n"));
    write_volume(cfg.out / "deformation.hnrg",
                 field_volume(phi.phi, "kind=deformation\nsquaring_steps=" + std::to_string(phi.squaring_steps) + "\n"));
    say(log, "mean displacement " + fixed(reg::mean_displacement(phi), 4) + " voxels");
  });
}

std::vector<std::pair<std::string, std::string>> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  std::getline(in, line);
  if (line != "metric\tvalue") throw ParseError("bad metrics header in " + path.string(), 0);
  while (std::getline(in, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("bad metrics line in " + path.string(), rows.size() + 2);
    rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return rows;
}

void cmd_report(const fs::path& dir, std::ostream& out) {
  if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " is not a directory");
  out << "run " << dir.string() << "\n";
  if (fs::exists(dir / kFailedMarker)) {
    std::ifstream in(dir / kFailedMarker);
    std::string msg;
    std::getline(in, msg);
    out << "status FAILED: " << msg << "\n";
  } else {
    out << "status complete\n";
  }
  if (fs::exists(dir / "arch.json")) {
    const auto arch = read_arch(dir / "arch.json");
    out << "architecture path";
    for (int r : arch.resolutions) out << " " << r;
    out << "  ops UpS " << to_string(arch.ops[0]) << ", SameS " << to_string(arch.ops[1]) << ", DownS "
        << to_string(arch.ops[2]) << "\n";
    const auto params = DiscreteNet::build(arch, 0).parameter_count();
    out << "decoded parameters " << params << " (" << fixed(model_megabytes(params), 3) << " MB)\n";
  }
  if (fs::exists(dir / "history.tsv")) {
    std::ifstream in(dir / "history.tsv");
    std::string header, first, line, last;
    std::getline(in, header);
    std::getline(in, first);
    last = first;
    std::int64_t rows = first.empty() ? 0 : 1;
    while (std::getline(in, line))
      if (!line.empty()) {
        last = line;
        ++rows;
      }
    const auto column = [&](const std::string& row, const std::string& name) {
      std::istringstream h(header), r(row);
      std::string hc, rc;
      while (std::getline(h, hc, '\t') && std::getline(r, rc, '\t'))
        if (hc == name) return rc;
      return std::string("?");
    };
    if (!first.empty()) {
      out << "search epochs " << rows << "  eta entropy " << column(first, "eta_entropy") << " -> "
          << column(last, "eta_entropy") << "  confident " << column(last, "eta_confident") << "\n";
    }
  }
  if (fs::exists(dir / "metrics.tsv")) {
    const auto rows = read_metrics(dir / "metrics.tsv");
    std::size_t width = 0;
    for (const auto& [k, v] : rows) width = std::max(width, k.size());
    for (const auto& [k, v] : rows) out << std::left << std::setw(static_cast<int>(width) + 2) << k << v << "\n";
  }
}

}  // namespace hnas
