#include "tqpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace tqpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

using Kind = CheckpointError::Kind;
constexpr char kMagic[4] = {'T', 'Q', 'P', 'T'};

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  const auto* p = reinterpret_cast<const std::byte*>(&v);
  out.insert(out.end(), p, p + 4);
}

std::uint32_t get_u32(std::span<const std::byte> in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

template <typename V>
void append_raw(std::vector<std::byte>& out, const V& values) {
  const auto* p = reinterpret_cast<const std::byte*>(values.data());
  out.insert(out.end(), p, p + values.size() * sizeof(typename V::value_type));
}

struct Entry {
  Shape shape;
  std::string dtype;
  std::size_t offset = 0;
};

}  // namespace

const SidecarArray* CheckpointContents::find(std::string_view name) const {
  for (const auto& s : sidecars)
    if (s.name == name) return &s;
  return nullptr;
}

std::vector<std::byte> encode_checkpoint(const CheckpointContents& contents) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<std::byte> data;
  for (const auto& [name, t] : contents.model.params().named()) {
    tensors.push_back({{"name", name}, {"shape", t->shape()}, {"dtype", "f32"}, {"offset", data.size()}});
    append_raw(data, t->storage());
  }
  for (const auto& s : contents.sidecars) {
    const bool is_f32 = std::holds_alternative<std::vector<float>>(s.values);
    const std::size_t n = is_f32 ? std::get<0>(s.values).size() : std::get<1>(s.values).size();
    if (n != shape_size(s.shape)) {
      throw ShapeError("sidecar " + s.name + " holds " + std::to_string(n) +
                       " values for shape " + to_string(s.shape));
    }
    tensors.push_back({{"name", s.name},
                       {"shape", s.shape},
                       {"dtype", is_f32 ? "f32" : "i32"},
                       {"offset", data.size()}});
    if (is_f32) append_raw(data, std::get<0>(s.values));
    else append_raw(data, std::get<1>(s.values));
  }
  nlohmann::json manifest = {{"config", contents.model.config()}, {"tensors", std::move(tensors)}};
  if (!contents.quant.is_null()) manifest["quant"] = contents.quant;
  const std::string text = manifest.dump();

  std::vector<std::byte> out;
  out.reserve(12 + text.size() + data.size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  const auto* tp = reinterpret_cast<const std::byte*>(text.data());
  out.insert(out.end(), tp, tp + text.size());
  out.insert(out.end(), data.begin(), data.end());
  return out;
}

CheckpointContents decode_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 12) throw CheckpointError(Kind::truncated, "checkpoint shorter than its header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(Kind::bad_magic, "checkpoint does not start with TQPT");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint version " + std::to_string(version) +
                                                      ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::uint32_t manifest_len = get_u32(bytes, 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(manifest_len))
    throw CheckpointError(Kind::truncated, "checkpoint manifest is truncated");
  const std::string_view text(reinterpret_cast<const char*>(bytes.data() + 12), manifest_len);
  const auto data = bytes.subspan(12 + manifest_len);

  nlohmann::json manifest;
  ModelConfig cfg;
  std::map<std::string, Entry> entries;
  std::vector<std::string> order;
  try {
    manifest = nlohmann::json::parse(text);
    cfg = manifest.at("config").get<ModelConfig>();
    cfg.validate();
    for (const auto& t : manifest.at("tensors")) {
      Entry e{t.at("shape").get<Shape>(), t.at("dtype").get<std::string>(),
              t.at("offset").get<std::size_t>()};
      if (e.dtype != "f32" && e.dtype != "i32")
        throw CheckpointError(Kind::malformed_manifest, "unknown dtype " + e.dtype);
      auto name = t.at("name").get<std::string>();
      if (!entries.emplace(name, e).second)
        throw CheckpointError(Kind::malformed_manifest, "duplicate tensor " + name);
      order.push_back(std::move(name));
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::malformed_manifest, std::string("checkpoint manifest: ") + e.what());
  }

  auto region = [&](const std::string& name, const Entry& e) {
    const std::size_t nbytes = shape_size(e.shape) * 4;
    if (e.offset > data.size() || nbytes > data.size() - e.offset)
      throw CheckpointError(Kind::truncated, "data for " + name + " runs past the end of the file");
    return data.subspan(e.offset, nbytes);
  };

  CheckpointContents out;
  out.model = Model(cfg);
  auto params = out.model.params().named();
  for (auto& [name, t] : params) {
    auto it = entries.find(name);
    if (it == entries.end())
      throw CheckpointError(Kind::malformed_manifest, "checkpoint lacks tensor " + name);
    const Entry& e = it->second;
    if (e.shape != t->shape() || e.dtype != "f32") {
      throw CheckpointError(Kind::shape_mismatch, "tensor " + name + " stored as " +
                                                      to_string(e.shape) + " " + e.dtype +
                                                      ", model expects " + to_string(t->shape()) + " f32");
    }
    const auto src = region(name, e);
    std::memcpy(t->storage().data(), src.data(), src.size());
    entries.erase(it);
  }
  for (const auto& name : order) {
    auto it = entries.find(name);
    if (it == entries.end()) continue;
    const Entry& e = it->second;
    const auto src = region(name, e);
    SidecarArray s{name, e.shape, {}};
    const std::size_t n = shape_size(e.shape);
    if (e.dtype == "f32") {
      std::vector<float> v(n);
      std::memcpy(v.data(), src.data(), src.size());
      s.values = std::move(v);
    } else {
      std::vector<std::int32_t> v(n);
      std::memcpy(v.data(), src.data(), src.size());
      s.values = std::move(v);
    }
    out.sidecars.push_back(std::move(s));
  }
  if (manifest.contains("quant")) out.quant = manifest["quant"];
  return out;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw CheckpointError(Kind::io, "cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> bytes(size);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw CheckpointError(Kind::io, "failed to read " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(Kind::io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(Kind::io, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  CheckpointContents c;
  c.model = model;
  save_checkpoint(c, path);
}

void save_checkpoint(const CheckpointContents& contents, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(contents));
}

CheckpointContents load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace tqpt
