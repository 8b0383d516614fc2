#include "hnas/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>

#include "binio.hpp"
#include "hnas/error.hpp"
#include "hnas/random.hpp"

namespace hnas {

namespace {

Shape with_prefix(std::int64_t channels, const Shape& spatial) {
  Shape s{1, channels};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

Tensor normal_field(const Shape& spatial, std::int64_t channels, Rng& rng) {
  const Shape s = with_prefix(channels, spatial);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(s)));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(s, std::move(v));
}

std::string volume_meta(std::uint64_t seed, const std::string& kind) {
  return "generator=hnas-synth\nversion=" + std::to_string(kGeneratorVersion) + "\nkind=" + kind +
         "\nseed=" + std::to_string(seed) + "\n";
}

}  // namespace

void VolumeSpec::validate() const {
  if (size.size() != 2 && size.size() != 3) throw ConfigError("volume size needs 2 or 3 extents");
  for (auto e : size)
    if (e < 8 || e % 8 != 0) throw ConfigError("volume extents must be positive multiples of 8");
  if (label_count < 1 || label_count > 65535) throw ConfigError("label_count must be in [1, 65535]");
  if (!(blob_sigma > 0.0)) throw ConfigError("blob_sigma must be > 0");
  if (!(texture >= 0.0)) throw ConfigError("texture must be >= 0");
}

Tensor gaussian_smooth(const Tensor& x, double sigma) {
  if (!(sigma > 0.0)) return x.detach();
  const auto lay = SpatialLayout::of(x.shape());
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double ks = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& w : k) w /= ks;

  std::vector<double> buf(x.data().begin(), x.data().end()), tmp(buf.size());
  const auto& e = lay.extent;
  const std::array<std::int64_t, 3> st{e[1] * e[2], e[2], 1};
  const auto vox = lay.voxels();
  for (int ax = 3 - lay.dims; ax < 3; ++ax) {
    const auto n = e[static_cast<std::size_t>(ax)], stride = st[static_cast<std::size_t>(ax)];
    for (std::int64_t bc = 0; bc < lay.batch * lay.channels; ++bc)
      for (std::int64_t p = 0; p < vox; ++p) {
        const auto pos = (p / stride) % n;
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          const auto q = std::clamp<std::int64_t>(pos + i, 0, n - 1);
          s += k[static_cast<std::size_t>(i + radius)] * buf[static_cast<std::size_t>(bc * vox + p + (q - pos) * stride)];
        }
        tmp[static_cast<std::size_t>(bc * vox + p)] = s;
      }
    std::swap(buf, tmp);
  }
  return Tensor::from(x.shape(), std::move(buf));
}

LabeledVolume generate_volume(const VolumeSpec& spec) {
  spec.validate();
  NoGradGuard guard;
  Rng rng(spec.seed, "volume");
  const auto vox = shape_numel(spec.size);
  const int m = spec.label_count;

  LabeledVolume out;
  out.labels.spatial = spec.size;
  out.labels.labels.assign(static_cast<std::size_t>(vox), 0);
  if (m > 1) {
    std::vector<double> best(static_cast<std::size_t>(vox), -INFINITY);
    for (int l = 0; l < m; ++l) {
      const Tensor f = gaussian_smooth(normal_field(spec.size, 1, rng), spec.blob_sigma);
      double ss = 0.0;
      for (double x : f.data()) ss += x * x;
      const double sd = std::sqrt(ss / static_cast<double>(vox)) + 1e-12;
      for (std::int64_t p = 0; p < vox; ++p) {
        const double z = f.at(p) / sd;
        if (z > best[static_cast<std::size_t>(p)]) {
          best[static_cast<std::size_t>(p)] = z;
          out.labels.labels[static_cast<std::size_t>(p)] = l;
        }
      }
    }
  }

  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  for (int i = m - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  std::vector<double> level(static_cast<std::size_t>(m), 0.5);
  if (m > 1)
    for (int l = 0; l < m; ++l) level[static_cast<std::size_t>(l)] = 0.1 + 0.8 * order[static_cast<std::size_t>(l)] / (m - 1.0);

  std::vector<double> img(static_cast<std::size_t>(vox));
  for (std::int64_t p = 0; p < vox; ++p) img[static_cast<std::size_t>(p)] = level[static_cast<std::size_t>(out.labels.labels[static_cast<std::size_t>(p)])];
  const Tensor blurred = gaussian_smooth(Tensor::from(with_prefix(1, spec.size), std::move(img)), 0.75);
  const Tensor noise = gaussian_smooth(normal_field(spec.size, 1, rng), 1.5);
  double nmax = 0.0;
  for (double x : noise.data()) nmax = std::max(nmax, std::abs(x));
  std::vector<double> vals(static_cast<std::size_t>(vox));
  for (std::int64_t p = 0; p < vox; ++p) {
    const double t = nmax > 0 ? spec.texture * noise.at(p) / nmax : 0.0;
    vals[static_cast<std::size_t>(p)] = std::clamp(blurred.at(p) + t, 0.0, 1.0);
  }
  out.intensity = Tensor::from(with_prefix(1, spec.size), std::move(vals));
  out.meta = volume_meta(spec.seed, "image") + "label_count=" + std::to_string(m) + "\n";
  return out;
}

VelocityField random_velocity(const Shape& spatial, double scale, double sigma, std::uint64_t seed) {
  NoGradGuard guard;
  const auto d = static_cast<std::int64_t>(spatial.size());
  if (!(scale > 0.0)) return VelocityField(Tensor::zeros(with_prefix(d, spatial)));
  Rng rng(seed, "velocity");
  const Tensor f = gaussian_smooth(normal_field(spatial, d, rng), sigma);
  double mx = 0.0;
  for (double x : f.data()) mx = std::max(mx, std::abs(x));
  std::vector<double> v(f.data().begin(), f.data().end());
  for (auto& x : v) x = mx > 0 ? x * scale / mx : 0.0;
  return VelocityField(Tensor::from(f.shape(), std::move(v)));
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

RegistrationPair generate_pair(const LabeledVolume& base, double warp_scale, double warp_sigma, std::uint64_t seed) {
  NoGradGuard guard;
  if (!(warp_scale >= 0.0)) throw ConfigError("warp_scale must be >= 0");
  const auto& spatial = base.labels.spatial;
  const VelocityField v = random_velocity(spatial, warp_scale, warp_sigma, seed);
  const auto fwd = reg::integrate_velocity(v, 7);
  const auto inv = reg::integrate_velocity(v.negated(), 7);
  if (reg::min_jacobian_determinant(fwd) <= 0.0 || reg::min_jacobian_determinant(inv) <= 0.0) {
    throw NumericError("generated deformation folds; lower warp_scale or raise warp_sigma");
  }
  RegistrationPair pair;
  pair.fixed = base;
  pair.moving.intensity = reg::warp(base.intensity, inv);
  pair.moving.labels = reg::warp_labels(base.labels, inv);
  pair.moving.meta = base.meta + "warp_seed=" + std::to_string(seed) + "\n";
  pair.gt_velocity = v;
  return pair;
}

Split DatasetSpec::split_of(int index) const {
  if (index < train) return Split::Train;
  if (index < train + val) return Split::Val;
  return Split::Test;
}

void DatasetSpec::validate() const {
  volume.validate();
  if (train < 0 || val < 0 || test < 0 || total() == 0) throw ConfigError("dataset split sizes must be >= 0 and not all 0");
  if (!(warp_scale >= 0.0) || !(warp_sigma > 0.0)) throw ConfigError("warp_scale must be >= 0 and warp_sigma > 0");
}

std::string DatasetSpec::pair_tag(int index) const {
  const Split s = split_of(index);
  const int local = s == Split::Train ? index : s == Split::Val ? index - train : index - train - val;
  return std::string(to_string(s)) + "-" + std::to_string(local);
}

RegistrationPair generate_dataset_pair(const DatasetSpec& spec, int index) {
  if (index < 0 || index >= spec.total()) throw ConfigError("pair index out of range");
  const std::string tag = spec.pair_tag(index);
  VolumeSpec vs = spec.volume;
  vs.seed = Rng(spec.seed, "volume-" + tag).next();
  auto pair = generate_pair(generate_volume(vs), spec.warp_scale, spec.warp_sigma, Rng(spec.seed, "warp-" + tag).next());
  pair.split = spec.split_of(index);
  return pair;
}

std::vector<RegistrationPair> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::vector<RegistrationPair> out;
  for (int i = 0; i < spec.total(); ++i) out.push_back(generate_dataset_pair(spec, i));
  return out;
}

std::vector<int> foreground_labels(int label_count) {
  std::vector<int> out;
  for (int l = 1; l < label_count; ++l) out.push_back(l);
  return out;
}

LabeledVolume field_volume(const Tensor& field, std::string meta) {
  const auto lay = SpatialLayout::of(field.shape());
  if (lay.batch != 1) throw ShapeError("field volume needs batch 1", 0);
  LabeledVolume v;
  v.intensity = field.detach();
  v.labels.spatial = lay.spatial_shape();
  v.labels.labels.assign(static_cast<std::size_t>(lay.voxels()), 0);
  v.meta = std::move(meta);
  return v;
}

// ---- HNRG ----

std::vector<char> encode_volume(const LabeledVolume& v) {
  const auto lay = SpatialLayout::of(v.intensity.shape());
  if (lay.batch != 1) throw ShapeError("volume intensity must have batch 1", 0);
  if (v.labels.spatial != lay.spatial_shape() || v.labels.voxels() != lay.voxels()) {
    throw ShapeError("label map extents differ from intensity extents");
  }
  binio::Writer w;
  w.bytes("HNRG");
  w.u16(kVolumeVersion);
  w.u8(2);
  const Shape& s = v.intensity.shape();
  w.u8(static_cast<std::uint8_t>(s.size() - 1));
  for (std::size_t i = 1; i < s.size(); ++i) w.u32(static_cast<std::uint32_t>(s[i]));
  for (double x : v.intensity.data()) w.f64(x);
  for (int l : v.labels.labels) {
    if (l < 0 || l > 65535) throw ConfigError("label " + std::to_string(l) + " does not fit in u16");
    w.u16(static_cast<std::uint16_t>(l));
  }
  w.str(v.meta);
  return w.buffer();
}

LabeledVolume decode_volume(std::span<const char> bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4, "magic") != "HNRG") throw ParseError("not an HNRG volume (bad magic)", 0);
  const auto version = r.u16();
  if (version != kVolumeVersion) throw ParseError("unsupported HNRG version " + std::to_string(version), 4);
  const auto dtype = r.u8();
  if (dtype != 2) throw ParseError("unsupported HNRG dtype code " + std::to_string(dtype), 6);
  const auto rank = r.u8();
  if (rank < 2 || rank > 4) throw ParseError("HNRG rank must be 2-4 (channel axis plus spatial axes)", 7);
  Shape s{1};
  std::uint64_t n = 1;
  for (int i = 0; i < rank; ++i) {
    const auto e = r.u32();
    if (e == 0) throw ParseError("zero extent", r.offset() - 4);
    s.push_back(e);
    n *= e;
    if (n > r.remaining()) throw ParseError("extents exceed file size", r.offset() - 4);
  }
  std::vector<double> vals(static_cast<std::size_t>(n));
  for (auto& x : vals) x = r.f64();
  LabeledVolume v;
  v.intensity = Tensor::from(s, std::move(vals));
  v.labels.spatial.assign(s.begin() + 2, s.end());
  const auto vox = shape_numel(v.labels.spatial);
  v.labels.labels.resize(static_cast<std::size_t>(vox));
  for (auto& l : v.labels.labels) l = r.u16();
  v.meta = r.str("metadata");
  if (!r.done()) throw ParseError("trailing bytes after HNRG volume", r.offset());
  return v;
}

void write_volume(const std::filesystem::path& path, const LabeledVolume& v) {
  binio::write_file_atomic(path, encode_volume(v));
}

LabeledVolume read_volume(const std::filesystem::path& path) { return decode_volume(binio::read_file(path)); }

// ---- manifest ----

namespace {

nlohmann::json spec_json(const DatasetSpec& s) {
  return {{"size", s.volume.size},
          {"label_count", s.volume.label_count},
          {"blob_sigma", s.volume.blob_sigma},
          {"texture", s.volume.texture},
          {"warp_scale", s.warp_scale},
          {"warp_sigma", s.warp_sigma},
          {"train", s.train},
          {"val", s.val},
          {"test", s.test},
          {"seed", s.seed}};
}

DatasetSpec spec_from_json(const nlohmann::json& j) {
  DatasetSpec s;
  s.volume.size = j.at("size").get<Shape>();
  s.volume.label_count = j.at("label_count").get<int>();
  s.volume.blob_sigma = j.at("blob_sigma").get<double>();
  s.volume.texture = j.at("texture").get<double>();
  s.warp_scale = j.at("warp_scale").get<double>();
  s.warp_sigma = j.at("warp_sigma").get<double>();
  s.train = j.at("train").get<int>();
  s.val = j.at("val").get<int>();
  s.test = j.at("test").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

}  // namespace

void Manifest::write(const std::filesystem::path& path) const {
  nlohmann::json j;
  j["format"] = "hnas-manifest";
  j["version"] = 1;
  j["generator_version"] = kGeneratorVersion;
  j["spec"] = spec_json(spec);
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) {
    j["pairs"].push_back({{"id", p.id},
                          {"split", std::string(to_string(p.split))},
                          {"seed", p.seed},
                          {"fixed", p.fixed},
                          {"moving", p.moving},
                          {"velocity", p.velocity}});
  }
  const std::string text = j.dump(2) + "\n";
  binio::write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("format") != "hnas-manifest") throw ConfigError("not an hnas manifest: " + path.string());
    m.spec = spec_from_json(j.at("spec"));
    for (const auto& p : j.at("pairs")) {
      m.pairs.push_back({p.at("id").get<std::string>(), parse_split(p.at("split").get<std::string>()),
                         p.at("seed").get<std::uint64_t>(), p.at("fixed").get<std::string>(),
                         p.at("moving").get<std::string>(), p.at("velocity").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

Manifest write_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  std::filesystem::create_directories(dir / "pairs");
  Manifest m;
  m.spec = spec;
  for (int i = 0; i < spec.total(); ++i) {
    const auto pair = generate_dataset_pair(spec, i);
    char id[16];
    std::snprintf(id, sizeof id, "pair%03d", i);
    ManifestEntry e{id, pair.split, Rng(spec.seed, "volume-" + spec.pair_tag(i)).next(), "", "", ""};
    e.fixed = "pairs/" + e.id + "_fixed.hnrg";
    e.moving = "pairs/" + e.id + "_moving.hnrg";
    e.velocity = "pairs/" + e.id + "_velocity.hnrg";
    write_volume(dir / e.fixed, pair.fixed);
    write_volume(dir / e.moving, pair.moving);
    write_volume(dir / e.velocity, field_volume(pair.gt_velocity->v, volume_meta(e.seed, "velocity")));
    m.pairs.push_back(std::move(e));
  }
  m.write(dir / "manifest.json");
  return m;
}

std::vector<RegistrationPair> load_dataset(const Manifest& manifest, const std::filesystem::path& dir,
                                           std::optional<Split> split) {
  std::vector<RegistrationPair> out;
  for (const auto& e : manifest.pairs) {
    if (split && e.split != *split) continue;
    RegistrationPair p;
    p.fixed = read_volume(dir / e.fixed);
    p.moving = read_volume(dir / e.moving);
    if (!e.velocity.empty()) p.gt_velocity = VelocityField(read_volume(dir / e.velocity).intensity);
    p.split = e.split;
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace hnas
