#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pnd/tensor.hpp"

namespace pnd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  NamedTensors tensors;
  nlohmann::json meta = nlohmann::json::object();
};

/// Writes `<stem>.json` (manifest: names, shapes, byte offsets) and
/// `<stem>.bin` (little-endian payload of `real` values, tensors back to back).
void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors,
                     const nlohmann::json& meta = nlohmann::json::object());

/// Accepts either the stem or the path of the manifest. Throws FormatError
/// when the manifest and blob disagree.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies loaded values into `dst` by name; every name in `dst` must be
/// present with a matching shape.
void assign_tensors(const NamedTensors& src, NamedTensors& dst);

/// FNV-1a over names, shapes and raw bytes; used to detect mutation.
std::uint64_t tensors_hash(const NamedTensors& tensors);

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t value);

}  // namespace pnd
