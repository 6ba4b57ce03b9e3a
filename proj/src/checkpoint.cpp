#include "pnd/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "pnd/errors.hpp"

namespace pnd {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

fs::path stem_of(const fs::path& path) {
  fs::path p = path;
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

}  // namespace

void save_checkpoint(const fs::path& stem_in, const NamedTensors& tensors, const nlohmann::json& meta) {
  const fs::path stem = stem_of(stem_in);
  const fs::path blob_path = fs::path(stem).concat(".bin");
  const fs::path manifest_path = fs::path(stem).concat(".json");

  nlohmann::json entries = nlohmann::json::array();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot write " + blob_path.string());
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::uint64_t nbytes = t.numel() * sizeof(real);
    blob.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(nbytes));
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  if (!blob) throw IoError("short write to " + blob_path.string());

  nlohmann::json manifest = {{"format", "pnd-checkpoint"},
                             {"version", 1},
                             {"dtype", kRealName},
                             {"byte_order", "little"},
                             {"blob", blob_path.filename().string()},
                             {"blob_bytes", offset},
                             {"tensors", entries},
                             {"meta", meta}};
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const fs::path& path) {
  const fs::path stem = stem_of(path);
  const fs::path manifest_path = fs::path(stem).concat(".json");
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "pnd-checkpoint" || manifest.value("version", 0) != 1) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": unknown format/version");
  }
  if (manifest.value("dtype", "") != kRealName) {
    throw FormatError("checkpoint manifest " + manifest_path.string() + ": dtype " + manifest.value("dtype", "?") +
                      " does not match this build (" + kRealName + ")");
  }
  const fs::path blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot open checkpoint blob " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != numel_of(shape) * sizeof(real)) {
      throw FormatError("checkpoint tensor " + name + ": byte count disagrees with shape at offset " +
                        std::to_string(offset));
    }
    if (offset + nbytes > bytes.size()) {
      throw FormatError("checkpoint tensor " + name + ": payload truncated at offset " + std::to_string(offset));
    }
    std::vector<real> values(numel_of(shape));
    std::memcpy(values.data(), bytes.data() + offset, nbytes);
    ck.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
  }
  return ck;
}

void assign_tensors(const NamedTensors& src, NamedTensors& dst) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  for (auto& [name, t] : dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                        shape_str(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
  }
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t tensors_hash(const NamedTensors& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : tensors) {
    h = fnv1a(name.data(), name.size(), h);
    for (auto extent : t.shape()) h = fnv1a(&extent, sizeof(extent), h);
    h = fnv1a(t.data().data(), t.numel() * sizeof(real), h);
  }
  return h;
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace pnd
