#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pnd/tensor.hpp"

namespace pnd {

enum class Attribute : std::uint8_t {
  digit_color,
  digit_scale,
  digit_position,
  texture_type,
  texture_color,
  letter,
  letter_color,
};

inline constexpr std::size_t kNumAttributes = 7;
inline constexpr std::size_t kNumCategories = 10;

const std::string& attribute_name(Attribute a);
Attribute parse_attribute(const std::string& name);
// The first n attributes in canonical order; the bias-count sweep adds them one at a time.
std::vector<Attribute> first_attributes(std::size_t n);

enum class Split : std::uint8_t { train, val, test };
const std::string& split_name(Split s);

struct DatasetSpec {
  std::size_t n_train = 10000;
  std::size_t n_val = 2000;
  std::size_t n_test = 2000;
  std::size_t image_size = 64;
  std::size_t n_classes = 10;
  std::vector<Attribute> bias_attributes = first_attributes(kNumAttributes);
  double rho = 0.95;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t count(Split s) const;
  std::size_t index_of(Attribute a) const;  // npos when absent
  bool has(Attribute a) const { return index_of(a) != npos; }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// counts[a][target][category] for every attribute a of the dataset.
struct GroupTable {
  std::vector<std::array<std::array<std::uint64_t, kNumCategories>, kNumCategories>> counts;

  GroupTable() = default;
  explicit GroupTable(std::size_t n_attrs) : counts(n_attrs) {}

  void add(int target, std::span<const std::uint8_t> attrs);
  std::uint64_t total(std::size_t a) const;
  std::uint64_t aligned(std::size_t a) const;
  double aligned_fraction(std::size_t a) const;
  bool operator==(const GroupTable&) const = default;
};

void to_json(nlohmann::json& j, const GroupTable& g);
void from_json(const nlohmann::json& j, GroupTable& g);

struct Sample {
  int target = 0;
  std::vector<std::uint8_t> attrs;
  std::vector<std::uint8_t> image;  // HWC, 3 channels
};

/// One split held in memory: samples are stored column-wise for fast batching.
struct Dataset {
  std::size_t height = 0, width = 0, channels = 3;
  std::vector<std::string> attr_names;
  std::vector<std::uint8_t> targets;
  std::vector<std::uint8_t> attrs;   // n × n_attrs
  std::vector<std::uint8_t> pixels;  // n × H × W × C
  GroupTable census;

  std::size_t size() const { return targets.size(); }
  std::size_t n_attrs() const { return attr_names.size(); }
  std::size_t image_bytes() const { return height * width * channels; }
  std::span<const std::uint8_t> attrs_of(std::size_t i) const {
    return {attrs.data() + i * n_attrs(), n_attrs()};
  }
  std::span<const std::uint8_t> image_of(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  std::size_t attr_index(const std::string& name) const;  // npos when absent
  void push(const Sample& s);
  GroupTable recount() const;
};

/// Independently per attribute: category = target with probability rho,
/// otherwise uniform over the other nine categories.
std::vector<std::uint8_t> sample_attributes(int target, const DatasetSpec& spec, std::mt19937_64& rng);
// Unbiased draw: every attribute uniform over all ten categories.
std::vector<std::uint8_t> sample_attributes_uniform(std::size_t n_attrs, std::mt19937_64& rng);

/// Renders an image_size² RGB image. Jitter and background noise come from `rng`
/// and are drawn in a fixed order, so two calls with equally seeded streams
/// differ only where the attributes change the picture.
std::vector<std::uint8_t> render_sample(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec,
                                        std::mt19937_64& rng);

/// Foreground mask (digit and letter pixels) of the same render, for tests.
std::vector<bool> glyph_mask(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec,
                             std::mt19937_64& rng);

std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index);

/// Generates one split in memory; sample i depends only on (spec, split, i).
Dataset generate_split(const DatasetSpec& spec, Split split);

struct SynthesisResult {
  std::filesystem::path train, val, test;
  GroupTable train_census;
};

/// Writes `<dir>/<split>.pndb` and `<dir>/<split>.manifest.json` for every split.
SynthesisResult synthesize(const DatasetSpec& spec, const std::filesystem::path& dir);

void write_dataset(const Dataset& data, const std::filesystem::path& path, const nlohmann::json& manifest);
/// Reads a `.pndb` file; when a sidecar manifest exists it is checked against the payload.
Dataset load_dataset(const std::filesystem::path& path);
/// Accepts a directory holding `<split>.pndb` or a file path.
std::filesystem::path split_path(const std::filesystem::path& data, Split split);

/// (B, 3, H, W) batch scaled to [-1, 1].
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices);
std::vector<int> batch_targets(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace pnd
