#include "hnas/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "binio.hpp"
#include "hnas/error.hpp"

namespace hnas {

namespace binio {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const char> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace binio

void Checkpoint::set(std::string key, std::string value) {
  for (auto& [k, v] : entries) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries.emplace_back(std::move(key), std::move(value));
}

bool Checkpoint::has(const std::string& key) const {
  return std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.first == key; });
}

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : entries)
    if (k == key) return v;
  throw ConfigError("checkpoint has no entry '" + key + "'");
}

void Checkpoint::add_tensor(std::string name, const Tensor& t) { tensors.push_back({std::move(name), t.detach()}); }

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.tensor;
  throw ConfigError("checkpoint has no tensor '" + name + "'");
}

void Checkpoint::load_into(const std::string& name, Tensor& dst) const {
  const Tensor& src = tensor(name);
  if (src.shape() != dst.shape()) {
    throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                     shape_str(dst.shape()));
  }
  std::ranges::copy(src.data(), dst.mutable_data().begin());
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes("HNCK");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [k, v] : ckpt.entries) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.tensor.rank()));
    for (auto e : t.tensor.shape()) w.u64(static_cast<std::uint64_t>(e));
    for (double x : t.tensor.data()) w.f64(x);
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::span<const char> bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4, "magic") != "HNCK") throw ParseError("not a checkpoint file (bad magic)", 0);
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint ckpt;
  const auto n_entries = r.u32();
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    auto k = r.str("entry key");
    auto v = r.str("entry value");
    ckpt.entries.emplace_back(std::move(k), std::move(v));
  }
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str("tensor name");
    const auto rank = r.u8();
    Shape shape;
    std::uint64_t count = 1;
    for (int a = 0; a < rank; ++a) {
      const auto e = r.u64();
      if (e > r.remaining()) throw ParseError("tensor extent exceeds file size", r.offset());
      count *= e;
      if (count > r.remaining() / 8 + 1) throw ParseError("tensor '" + name + "' exceeds file size", r.offset());
      shape.push_back(static_cast<std::int64_t>(e));
    }
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : values) x = r.f64();
    ckpt.tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  binio::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binio::read_file(path)); }

}  // namespace hnas
