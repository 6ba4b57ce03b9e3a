#include "pnd/bias_forge.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "pnd/errors.hpp"
#include "pnd/rng.hpp"

namespace pnd {

static_assert(std::endian::native == std::endian::little, "PNDB IO assumes a little-endian host");

namespace {

const std::array<std::string, kNumAttributes> kAttributeNames{
    "digit_color", "digit_scale", "digit_position", "texture_type", "texture_color", "letter", "letter_color"};

const std::array<std::string, 3> kSplitNames{"train", "val", "test"};

using Glyph = std::array<const char*, 7>;

// 5x7 bitmaps: digits 0-9 then letters A-J.
const std::array<Glyph, 20> kFont{{
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"},
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"},
    {"01110", "10001", "00001", "00010", "00100", "01000", "11111"},
    {"11111", "00010", "00100", "00010", "00001", "10001", "01110"},
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"},
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"},
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"},
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"},
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"},
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"},
    {"01110", "10001", "10001", "11111", "10001", "10001", "10001"},
    {"11110", "10001", "10001", "11110", "10001", "10001", "11110"},
    {"01110", "10001", "10000", "10000", "10000", "10001", "01110"},
    {"11100", "10010", "10001", "10001", "10001", "10010", "11100"},
    {"11111", "10000", "10000", "11110", "10000", "10000", "11111"},
    {"11111", "10000", "10000", "11110", "10000", "10000", "10000"},
    {"01110", "10001", "10000", "10111", "10001", "10001", "01111"},
    {"10001", "10001", "10001", "11111", "10001", "10001", "10001"},
    {"01110", "00100", "00100", "00100", "00100", "00100", "01110"},
    {"00111", "00010", "00010", "00010", "00010", "10010", "01100"},
}};

using Rgb = std::array<int, 3>;

// Bright glyph colors; also used for letters.
const std::array<Rgb, 10> kGlyphPalette{{{255, 60, 60},
                                         {60, 230, 60},
                                         {80, 120, 255},
                                         {255, 235, 50},
                                         {255, 70, 255},
                                         {50, 235, 235},
                                         {255, 150, 30},
                                         {175, 100, 255},
                                         {255, 175, 205},
                                         {210, 165, 100}}};

// Muted background colors so glyphs stay legible on any texture.
const std::array<Rgb, 10> kTexturePalette{{{140, 30, 30},
                                           {30, 120, 40},
                                           {30, 50, 150},
                                           {130, 120, 20},
                                           {120, 30, 120},
                                           {20, 110, 120},
                                           {150, 80, 10},
                                           {80, 40, 140},
                                           {140, 90, 110},
                                           {90, 90, 90}}};

constexpr Rgb kNeutralDigit{255, 255, 255};
constexpr Rgb kNeutralBackground{30, 30, 30};
constexpr double kBaseGlyphHeight = 0.25;   // fraction of the image side
constexpr double kLetterHeight = 0.16;
constexpr double kNeutralScale = 1.0;
constexpr int kNoiseAmplitude = 8;
constexpr double kShadeOff = 0.6;  // texture pattern "off" intensity

double scale_factor(int category) { return 0.5 + 0.1 * category; }

bool texture_on(int type, int x, int y, int size) {
  const int p = std::max(4, size / 8);
  const int h = p / 2;
  switch (type) {
    case 0: return true;
    case 1: return (y / h) % 2 == 0;
    case 2: return (x / h) % 2 == 0;
    case 3: return ((x + y) / h) % 2 == 0;
    case 4: return ((x - y + 4 * size) / h) % 2 == 0;
    case 5: return ((x / h) + (y / h)) % 2 == 0;
    case 6: {
      const int dx = x % p - h, dy = y % p - h;
      return dx * dx + dy * dy <= (p * p) / 10;
    }
    case 7: return (x + y) % p == 0 || (x - y + 4 * size) % p == 0;
    case 8: {
      const double c = (size - 1) / 2.0;
      const double r = std::hypot(x - c, y - c);
      return static_cast<int>(r / h) % 2 == 0;
    }
    default:
      return (mix64((static_cast<std::uint64_t>(x / 2) << 32) ^ static_cast<std::uint64_t>(y / 2) ^ 0x7e57) & 1) != 0;
  }
}

struct Layout {
  int digit_cat = 0;
  Rgb digit_color = kNeutralDigit;
  double scale = kNeutralScale;
  double cx = 0, cy = 0;  // digit anchor
  int digit_cell = 4;
  int texture = 0;
  bool textured = false;
  Rgb texture_color = kNeutralBackground;
  bool letter = false;
  int letter_glyph = 10;
  Rgb letter_color = kNeutralDigit;
};

// Ten anchors: the eight outer cells of a 3x3 grid plus the center cell split
// into a left and a right anchor.
void anchor(int category, int size, double& cx, double& cy, int& cell) {
  const double cs = size / 3.0;
  if (category == 4 || category == 9) {
    cell = 4;
    cx = size / 2.0 + (category == 4 ? -cs / 4 : cs / 4);
    cy = size / 2.0;
    return;
  }
  cell = category;
  cx = (category % 3 + 0.5) * cs;
  cy = (category / 3 + 0.5) * cs;
}

Layout layout_for(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec) {
  Layout L;
  L.digit_cat = target;
  L.cx = L.cy = spec.image_size / 2.0;
  auto get = [&](Attribute a) -> int {
    const std::size_t k = spec.index_of(a);
    return k == DatasetSpec::npos ? -1 : attrs[k];
  };
  if (int c = get(Attribute::digit_color); c >= 0) L.digit_color = kGlyphPalette[c];
  if (int c = get(Attribute::digit_scale); c >= 0) L.scale = scale_factor(c);
  if (int c = get(Attribute::digit_position); c >= 0) anchor(c, static_cast<int>(spec.image_size), L.cx, L.cy, L.digit_cell);
  const int tt = get(Attribute::texture_type), tc = get(Attribute::texture_color);
  if (tt >= 0 || tc >= 0) {
    L.textured = true;
    L.texture = std::max(tt, 0);
    L.texture_color = tc >= 0 ? kTexturePalette[tc] : kTexturePalette[9];
  }
  const int lg = get(Attribute::letter), lc = get(Attribute::letter_color);
  if (lg >= 0 || lc >= 0) {
    L.letter = true;
    L.letter_glyph = 10 + std::max(lg, 0);
    if (lc >= 0) L.letter_color = kGlyphPalette[lc];
  }
  return L;
}

// Nearest-neighbour glyph raster into `mask` (value `id`), box centered at (cx, cy).
void stamp(std::vector<std::uint8_t>& mask, int size, int glyph, double height, double cx, double cy, std::uint8_t id) {
  const int h = std::max(7, static_cast<int>(std::lround(height)));
  const int w = std::max(5, static_cast<int>(std::lround(height * 5.0 / 7.0)));
  const int x0 = static_cast<int>(std::lround(cx - w / 2.0));
  const int y0 = static_cast<int>(std::lround(cy - h / 2.0));
  const Glyph& g = kFont[static_cast<std::size_t>(glyph)];
  for (int yy = 0; yy < h; ++yy) {
    const int row = yy * 7 / h;
    for (int xx = 0; xx < w; ++xx) {
      const int col = xx * 5 / w;
      if (g[row][col] != '1') continue;
      const int x = x0 + xx, y = y0 + yy;
      if (x < 0 || y < 0 || x >= size || y >= size) continue;
      mask[static_cast<std::size_t>(y * size + x)] = id;
    }
  }
}

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

// Returns the image; `mask_out` (if given) receives 1 for digit and 2 for letter pixels.
std::vector<std::uint8_t> render(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec,
                                 std::mt19937_64& rng, std::vector<std::uint8_t>* mask_out) {
  if (target < 0 || target >= static_cast<int>(kNumCategories)) throw SpecError("render_sample: target out of range");
  if (attrs.size() != spec.bias_attributes.size()) throw SpecError("render_sample: attribute count mismatch");
  for (auto a : attrs)
    if (a >= kNumCategories) throw SpecError("render_sample: category out of range");
  const int S = static_cast<int>(spec.image_size);
  const Layout L = layout_for(target, attrs, spec);

  // Random draws in a fixed order regardless of attributes.
  std::uniform_int_distribution<int> jitter(-1, 1), noise(-kNoiseAmplitude, kNoiseAmplitude);
  const int dx = jitter(rng), dy = jitter(rng);
  std::vector<int> grain(static_cast<std::size_t>(S * S));
  for (auto& g : grain) g = noise(rng);

  std::vector<std::uint8_t> mask(static_cast<std::size_t>(S * S), 0);
  stamp(mask, S, L.digit_cat, kBaseGlyphHeight * S * L.scale, L.cx + dx, L.cy + dy, 1);
  if (L.letter) {
    static constexpr std::array<int, 4> kCorners{0, 2, 6, 8};
    int cell = kCorners[0];
    for (int c : kCorners)
      if (c != L.digit_cell) {
        cell = c;
        break;
      }
    const double cs = S / 3.0;
    stamp(mask, S, L.letter_glyph, kLetterHeight * S, (cell % 3 + 0.5) * cs, (cell / 3 + 0.5) * cs, 2);
  }

  std::vector<std::uint8_t> img(static_cast<std::size_t>(S * S * 3));
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const std::size_t p = static_cast<std::size_t>(y * S + x);
      std::uint8_t* px = &img[p * 3];
      if (mask[p] == 1) {
        for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(L.digit_color[c]);
      } else if (mask[p] == 2) {
        for (int c = 0; c < 3; ++c) px[c] = static_cast<std::uint8_t>(L.letter_color[c]);
      } else {
        const double shade = !L.textured || texture_on(L.texture, x, y, S) ? 1.0 : kShadeOff;
        for (int c = 0; c < 3; ++c) px[c] = clamp_byte(L.texture_color[c] * shade + grain[p]);
      }
    }
  if (mask_out) *mask_out = std::move(mask);
  return img;
}

// Minimal bounds-checked little-endian reader.
struct Reader {
  const std::vector<char>& buf;
  std::size_t pos = 0;
  std::string what;

  void need(std::size_t n, const char* field) const {
    if (pos + n > buf.size())
      throw FormatError(what + ": truncated payload reading " + field + " at offset " + std::to_string(pos) +
                        " (need " + std::to_string(n) + " bytes, file has " + std::to_string(buf.size()) + ")");
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* field) {
    need(n, field);
    std::memcpy(dst, buf.data() + pos, n);
    pos += n;
  }
};

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

std::filesystem::path manifest_path(const std::filesystem::path& pndb) {
  auto p = pndb;
  p.replace_extension(".manifest.json");
  return p;
}

}  // namespace

const std::string& attribute_name(Attribute a) { return kAttributeNames[static_cast<std::size_t>(a)]; }

Attribute parse_attribute(const std::string& name) {
  for (std::size_t k = 0; k < kNumAttributes; ++k)
    if (kAttributeNames[k] == name) return static_cast<Attribute>(k);
  throw SpecError("unknown bias attribute \"" + name + "\"");
}

std::vector<Attribute> first_attributes(std::size_t n) {
  if (n < 1 || n > kNumAttributes) throw SpecError("bias count must lie in 1..7, got " + std::to_string(n));
  std::vector<Attribute> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(static_cast<Attribute>(k));
  return out;
}

const std::string& split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

void DatasetSpec::validate() const {
  if (bias_attributes.empty()) throw SpecError("bias_attributes must be nonempty");
  for (std::size_t k = 1; k < bias_attributes.size(); ++k)
    if (bias_attributes[k] <= bias_attributes[k - 1])
      throw SpecError("bias_attributes must be duplicate-free and in canonical order");
  if (!(rho >= 0.0 && rho <= 1.0)) throw SpecError("rho must lie in [0, 1]");
  if (image_size < 32) throw SpecError("image_size must be at least 32 to place glyphs");
  if (image_size > 4096) throw SpecError("image_size too large");
  if (n_classes != kNumCategories) throw SpecError("n_classes is fixed at 10");
  if (n_train == 0) throw SpecError("n_train must be positive");
}

std::size_t DatasetSpec::count(Split s) const {
  switch (s) {
    case Split::train: return n_train;
    case Split::val: return n_val;
    default: return n_test;
  }
}

std::size_t DatasetSpec::index_of(Attribute a) const {
  for (std::size_t k = 0; k < bias_attributes.size(); ++k)
    if (bias_attributes[k] == a) return k;
  return npos;
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  std::vector<std::string> names;
  for (auto a : s.bias_attributes) names.push_back(attribute_name(a));
  j = {{"n_train", s.n_train}, {"n_val", s.n_val},   {"n_test", s.n_test},
       {"image_size", s.image_size}, {"n_classes", s.n_classes}, {"bias_attributes", names},
       {"rho", s.rho},         {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  s.n_train = j.at("n_train").get<std::size_t>();
  s.n_val = j.at("n_val").get<std::size_t>();
  s.n_test = j.at("n_test").get<std::size_t>();
  s.image_size = j.at("image_size").get<std::size_t>();
  s.n_classes = j.value("n_classes", std::size_t{10});
  s.bias_attributes.clear();
  for (const auto& n : j.at("bias_attributes")) s.bias_attributes.push_back(parse_attribute(n.get<std::string>()));
  s.rho = j.at("rho").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

void GroupTable::add(int target, std::span<const std::uint8_t> attrs) {
  if (attrs.size() != counts.size()) throw ShapeError("GroupTable::add: attribute count mismatch");
  for (std::size_t a = 0; a < attrs.size(); ++a) ++counts[a][static_cast<std::size_t>(target)][attrs[a]];
}

std::uint64_t GroupTable::total(std::size_t a) const {
  std::uint64_t s = 0;
  for (const auto& row : counts.at(a))
    for (auto c : row) s += c;
  return s;
}

std::uint64_t GroupTable::aligned(std::size_t a) const {
  std::uint64_t s = 0;
  for (std::size_t y = 0; y < kNumCategories; ++y) s += counts.at(a)[y][y];
  return s;
}

double GroupTable::aligned_fraction(std::size_t a) const {
  const auto t = total(a);
  return t == 0 ? 0.0 : static_cast<double>(aligned(a)) / static_cast<double>(t);
}

void to_json(nlohmann::json& j, const GroupTable& g) { j = g.counts; }

void from_json(const nlohmann::json& j, GroupTable& g) {
  g.counts = j.get<decltype(g.counts)>();
}

std::size_t Dataset::attr_index(const std::string& name) const {
  for (std::size_t k = 0; k < attr_names.size(); ++k)
    if (attr_names[k] == name) return k;
  return DatasetSpec::npos;
}

void Dataset::push(const Sample& s) {
  if (s.attrs.size() != n_attrs() || s.image.size() != image_bytes()) throw ShapeError("Dataset::push: sample shape");
  targets.push_back(static_cast<std::uint8_t>(s.target));
  attrs.insert(attrs.end(), s.attrs.begin(), s.attrs.end());
  pixels.insert(pixels.end(), s.image.begin(), s.image.end());
  census.add(s.target, s.attrs);
}

GroupTable Dataset::recount() const {
  GroupTable g(n_attrs());
  for (std::size_t i = 0; i < size(); ++i) g.add(targets[i], attrs_of(i));
  return g;
}

std::vector<std::uint8_t> sample_attributes(int target, const DatasetSpec& spec, std::mt19937_64& rng) {
  if (target < 0 || target >= static_cast<int>(kNumCategories)) throw SpecError("sample_attributes: bad target");
  std::bernoulli_distribution aligned(spec.rho);
  std::uniform_int_distribution<int> other(0, static_cast<int>(kNumCategories) - 2);
  std::vector<std::uint8_t> out(spec.bias_attributes.size());
  for (auto& a : out) {
    // Both draws always happen so streams stay in lockstep across rho values.
    const bool al = aligned(rng);
    const int r = other(rng);
    a = static_cast<std::uint8_t>(al ? target : (r < target ? r : r + 1));
  }
  return out;
}

std::vector<std::uint8_t> sample_attributes_uniform(std::size_t n_attrs, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> any(0, static_cast<int>(kNumCategories) - 1);
  std::vector<std::uint8_t> out(n_attrs);
  for (auto& a : out) a = static_cast<std::uint8_t>(any(rng));
  return out;
}

std::vector<std::uint8_t> render_sample(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec,
                                        std::mt19937_64& rng) {
  return render(target, attrs, spec, rng, nullptr);
}

std::vector<bool> glyph_mask(int target, std::span<const std::uint8_t> attrs, const DatasetSpec& spec,
                             std::mt19937_64& rng) {
  std::vector<std::uint8_t> m;
  render(target, attrs, spec, rng, &m);
  return {m.begin(), m.end()};
}

std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index) {
  return derive_seed(seed, {static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index)});
}

Dataset generate_split(const DatasetSpec& spec, Split split) {
  spec.validate();
  const std::size_t n = spec.count(split);
  // Exactly balanced classes in a seeded order.
  std::vector<std::uint8_t> targets(n);
  for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<std::uint8_t>(i % kNumCategories);
  std::mt19937_64 order(derive_seed(spec.seed, {static_cast<std::uint64_t>(split), 0x7a76e75ULL}));
  std::shuffle(targets.begin(), targets.end(), order);

  Dataset d;
  d.height = d.width = spec.image_size;
  d.channels = 3;
  for (auto a : spec.bias_attributes) d.attr_names.push_back(attribute_name(a));
  d.census = GroupTable(d.n_attrs());
  d.targets.reserve(n);
  d.attrs.reserve(n * d.n_attrs());
  d.pixels.reserve(n * d.image_bytes());
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng(sample_seed(spec.seed, split, i));
    Sample s;
    s.target = targets[i];
    s.attrs = split == Split::train ? sample_attributes(s.target, spec, rng)
                                    : sample_attributes_uniform(d.n_attrs(), rng);
    s.image = render_sample(s.target, s.attrs, spec, rng);
    d.push(s);
  }
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path, const nlohmann::json& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write("PNDB", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  put_u32(out, static_cast<std::uint32_t>(data.height));
  put_u32(out, static_cast<std::uint32_t>(data.width));
  put_u32(out, static_cast<std::uint32_t>(data.channels));
  put_u32(out, static_cast<std::uint32_t>(data.n_attrs()));
  for (const auto& name : data.attr_names) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.put(static_cast<char>(data.targets[i]));
    auto a = data.attrs_of(i);
    out.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size()));
    auto img = data.image_of(i);
    out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());

  nlohmann::json m = manifest;
  m["format"] = "PNDB";
  m["version"] = 1;
  m["n_samples"] = data.size();
  m["attributes"] = data.attr_names;
  m["census"] = data.census;
  std::ofstream mo(manifest_path(path));
  if (!mo) throw IoError("cannot open " + manifest_path(path).string() + " for writing");
  mo << m.dump(1) << '\n';
  if (!mo) throw IoError("write failed: " + manifest_path(path).string());
}

SynthesisResult synthesize(const DatasetSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  SynthesisResult r;
  for (Split s : {Split::train, Split::val, Split::test}) {
    Dataset d = generate_split(spec, s);
    const auto path = dir / (split_name(s) + ".pndb");
    write_dataset(d, path, {{"split", split_name(s)}, {"spec", spec}});
    if (s == Split::train) {
      r.train = path;
      r.train_census = d.census;
    } else if (s == Split::val) {
      r.val = path;
    } else {
      r.test = path;
    }
  }
  return r;
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r{buf, 0, path.string()};

  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "PNDB", 4) != 0) throw FormatError(path.string() + ": bad magic at offset 0");
  if (const auto v = r.u32("version"); v != 1)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(v) + " at offset 4");
  const std::uint32_t n = r.u32("n_samples");
  Dataset d;
  d.height = r.u32("height");
  d.width = r.u32("width");
  d.channels = r.u32("channels");
  const std::uint32_t n_attrs = r.u32("n_attrs");
  if (n_attrs == 0 || n_attrs > kNumAttributes) throw FormatError(path.string() + ": bad n_attrs at offset 24");
  for (std::uint32_t k = 0; k < n_attrs; ++k) {
    const std::uint32_t len = r.u32("attribute name length");
    if (len > 64) throw FormatError(path.string() + ": attribute name too long at offset " + std::to_string(r.pos - 4));
    std::string name(len, '\0');
    r.bytes(name.data(), len, "attribute name");
    d.attr_names.push_back(std::move(name));
  }
  const std::size_t record = 1 + n_attrs + d.image_bytes();
  r.need(record * n, "samples");
  d.targets.resize(n);
  d.attrs.resize(static_cast<std::size_t>(n) * n_attrs);
  d.pixels.resize(static_cast<std::size_t>(n) * d.image_bytes());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.pos;
    r.bytes(&d.targets[i], 1, "target");
    r.bytes(d.attrs.data() + i * n_attrs, n_attrs, "attributes");
    r.bytes(d.pixels.data() + i * d.image_bytes(), d.image_bytes(), "pixels");
    if (d.targets[i] >= kNumCategories)
      throw FormatError(path.string() + ": target out of range at offset " + std::to_string(at));
    for (auto a : d.attrs_of(i))
      if (a >= kNumCategories)
        throw FormatError(path.string() + ": category out of range at offset " + std::to_string(at + 1));
  }
  if (r.pos != buf.size())
    throw FormatError(path.string() + ": trailing bytes at offset " + std::to_string(r.pos));
  d.census = d.recount();

  const auto mpath = manifest_path(path);
  if (std::filesystem::exists(mpath)) {
    std::ifstream mi(mpath);
    nlohmann::json m;
    try {
      mi >> m;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(mpath.string() + ": " + e.what());
    }
    const auto declared = m.value("n_samples", static_cast<std::size_t>(n));
    if (declared > n)
      throw FormatError(path.string() + ": truncated: manifest declares " + std::to_string(declared) +
                        " samples, payload ends after " + std::to_string(n) + " at offset " + std::to_string(r.pos));
    if (declared != n)
      throw FormatError(path.string() + ": manifest declares " + std::to_string(declared) + " samples, payload has " +
                        std::to_string(n) + " (offset 8)");
    if (m.contains("census") && m["census"].get<GroupTable>() != d.census)
      throw FormatError(path.string() + ": manifest census disagrees with payload (samples from offset " +
                        std::to_string(r.pos - record * n) + ")");
  }
  return d;
}

std::filesystem::path split_path(const std::filesystem::path& data, Split split) {
  if (std::filesystem::is_directory(data)) return data / (split_name(split) + ".pndb");
  return data;
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t H = data.height, W = data.width, C = data.channels;
  std::vector<real> v(indices.size() * C * H * W);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto img = data.image_of(indices[b]);
    real* dst = v.data() + b * C * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c)
          dst[(c * H + y) * W + x] = static_cast<real>(img[(y * W + x) * C + c]) / real(127.5) - real(1);
  }
  return Tensor::from({indices.size(), C, H, W}, std::move(v));
}

std::vector<int> batch_targets(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> y;
  y.reserve(indices.size());
  for (auto i : indices) y.push_back(data.targets[i]);
  return y;
}

}  // namespace pnd
