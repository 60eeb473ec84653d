#include "arimg/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "arimg/errors.hpp"

namespace arimg {

namespace {

constexpr std::array<Rgb8, kNumColors> kPalette{{
    {230, 25, 25},    // red
    {20, 160, 40},    // green
    {30, 60, 220},    // blue
    {245, 210, 20},   // yellow
    {200, 40, 200},   // magenta
    {20, 200, 210},   // cyan
    {245, 130, 20},   // orange
    {20, 20, 20},     // black
}};
constexpr std::array<const char*, kNumColors> kColorNames{"red", "green", "blue", "yellow",
                                                          "magenta", "cyan", "orange", "black"};
constexpr std::array<const char*, kNumShapes> kShapeNames{"circle", "square", "triangle"};

const char* relation_phrase(Relation r) {
  switch (r) {
    case Relation::kNone: return "next to";
    case Relation::kLeftOf: return "to the left of";
    case Relation::kAbove: return "above";
  }
  return "?";
}

}  // namespace

const std::array<Rgb8, kNumColors>& palette() { return kPalette; }

const char* color_name(int color) {
  if (color < 0 || color >= kNumColors) throw ContractError("color index " + std::to_string(color) + " out of range");
  return kColorNames[static_cast<std::size_t>(color)];
}

const char* shape_name(ShapeKind shape) { return kShapeNames[static_cast<std::size_t>(shape)]; }

std::vector<std::pair<int, int>> canonical_cells(std::size_t n_objects, Relation relation) {
  if (n_objects == 1) return {{0, 0}};
  switch (relation) {
    case Relation::kLeftOf: return {{0, 0}, {0, 1}};
    case Relation::kAbove: return {{0, 0}, {1, 0}};
    case Relation::kNone: break;
  }
  return {{0, 0}, {1, 1}};
}

void validate_spec(const SceneSpec& spec) {
  const auto n = spec.objects.size();
  if (n < 1 || n > 2) throw ContractError("scene spec: " + std::to_string(n) + " objects (need 1 or 2)");
  if (n == 1 && spec.relation != Relation::kNone) throw ContractError("scene spec: relation needs two objects");
  for (const auto& o : spec.objects) {
    if (o.color < 0 || o.color >= kNumColors) throw ContractError("scene spec: color index out of range");
    if (static_cast<int>(o.shape) >= kNumShapes) throw ContractError("scene spec: unknown shape");
    if (o.row < 0 || o.row >= kGridCells || o.col < 0 || o.col >= kGridCells) {
      throw ContractError("scene spec: cell outside the 2x2 grid");
    }
  }
  if (n == 2) {
    const auto& a = spec.objects[0];
    const auto& b = spec.objects[1];
    if (a.row == b.row && a.col == b.col) throw ContractError("scene spec: objects share a cell");
    if (spec.relation == Relation::kLeftOf && !(a.row == b.row && a.col < b.col)) {
      throw ContractError("scene spec: left_of needs the first object left of the second in one row");
    }
    if (spec.relation == Relation::kAbove && !(a.col == b.col && a.row < b.row)) {
      throw ContractError("scene spec: above needs the first object above the second in one column");
    }
  }
}

SceneSpec make_spec(const std::vector<std::pair<ShapeKind, int>>& objects, Relation relation) {
  SceneSpec spec;
  spec.relation = relation;
  const auto cells = canonical_cells(objects.size(), relation);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    spec.objects.push_back({objects[i].first, objects[i].second, cells.at(i).first, cells.at(i).second});
  }
  validate_spec(spec);
  return spec;
}

SceneSpec sample_spec(Rng& rng) {
  const int n = 1 + static_cast<int>(rng.below(2));
  const Relation rel = n == 2 ? static_cast<Relation>(rng.below(3)) : Relation::kNone;
  std::vector<std::pair<ShapeKind, int>> objs;
  for (int i = 0; i < n; ++i) {
    const auto shape = static_cast<ShapeKind>(rng.below(kNumShapes));
    const int color = static_cast<int>(rng.below(kNumColors));
    objs.emplace_back(shape, color);
  }
  return make_spec(objs, rel);
}

std::vector<SceneSpec> all_canonical_specs() {
  std::vector<std::pair<ShapeKind, int>> singles;
  for (int s = 0; s < kNumShapes; ++s) {
    for (int c = 0; c < kNumColors; ++c) singles.emplace_back(static_cast<ShapeKind>(s), c);
  }
  std::vector<SceneSpec> out;
  for (const auto& a : singles) out.push_back(make_spec({a}, Relation::kNone));
  for (int r = 0; r < 3; ++r) {
    for (const auto& a : singles) {
      for (const auto& b : singles) out.push_back(make_spec({a, b}, static_cast<Relation>(r)));
    }
  }
  return out;
}

bool glyph_contains(ShapeKind shape, double u, double v) {
  switch (shape) {
    case ShapeKind::kCircle: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.375 * 0.375;
    case ShapeKind::kSquare: return u >= 0.1875 && u <= 0.8125 && v >= 0.1875 && v <= 0.8125;
    case ShapeKind::kTriangle:
      // Apex (0.5, 0.125), base at v = 0.875 spanning u in [0.125, 0.875].
      return v >= 0.125 && v <= 0.875 && std::abs(u - 0.5) <= 0.375 * (v - 0.125) / 0.75;
  }
  return false;
}

Image render(const SceneSpec& spec, int size) {
  validate_spec(spec);
  if (size < 2 || size % kGridCells != 0) throw ContractError("render: size must be a positive multiple of 2");
  Image img(size, size, 1.0f);
  const int cell = size / kGridCells;
  for (const auto& o : spec.objects) {
    const Rgb8 c = kPalette[static_cast<std::size_t>(o.color)];
    const float rgb[3] = {c.r / 255.0f, c.g / 255.0f, c.b / 255.0f};
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        const double u = (x + 0.5) / cell;
        const double v = (y + 0.5) / cell;
        if (glyph_contains(o.shape, u, v)) std::copy_n(rgb, 3, img.at(o.row * cell + y, o.col * cell + x));
      }
    }
  }
  return img;
}

std::string caption(const SceneSpec& spec) {
  validate_spec(spec);
  auto obj = [](const SceneObject& o) {
    return std::string("a ") + kColorNames[static_cast<std::size_t>(o.color)] + " " +
           kShapeNames[static_cast<std::size_t>(o.shape)];
  };
  std::string out = obj(spec.objects[0]);
  if (spec.objects.size() == 2) out += std::string(" ") + relation_phrase(spec.relation) + " " + obj(spec.objects[1]);
  return out;
}

SceneSpec parse_caption(const std::string& text) {
  std::vector<std::string> words;
  {
    std::string cur;
    for (char ch : text) {
      if (ch == ' ') {
        if (cur.empty()) throw DataError("parse_caption: unexpected spacing in '" + text + "'");
        words.push_back(std::move(cur));
        cur.clear();
      } else {
        cur += ch;
      }
    }
    if (cur.empty()) throw DataError("parse_caption: '" + text + "' is not a caption");
    words.push_back(std::move(cur));
  }
  std::size_t pos = 0;
  auto fail = [&]() -> SceneSpec { throw DataError("parse_caption: '" + text + "' is outside the caption grammar"); };
  auto object = [&](std::pair<ShapeKind, int>& out) {
    if (pos + 3 > words.size() || words[pos] != "a") return false;
    const auto c = std::find(kColorNames.begin(), kColorNames.end(), words[pos + 1]);
    const auto s = std::find(kShapeNames.begin(), kShapeNames.end(), words[pos + 2]);
    if (c == kColorNames.end() || s == kShapeNames.end()) return false;
    out = {static_cast<ShapeKind>(s - kShapeNames.begin()), static_cast<int>(c - kColorNames.begin())};
    pos += 3;
    return true;
  };
  std::pair<ShapeKind, int> first, second;
  if (!object(first)) return fail();
  if (pos == words.size()) return make_spec({first}, Relation::kNone);
  Relation rel;
  auto match = [&](std::initializer_list<const char*> phrase) {
    if (pos + phrase.size() > words.size()) return false;
    std::size_t i = pos;
    for (const char* w : phrase) {
      if (words[i++] != w) return false;
    }
    pos = i;
    return true;
  };
  if (match({"to", "the", "left", "of"})) {
    rel = Relation::kLeftOf;
  } else if (match({"above"})) {
    rel = Relation::kAbove;
  } else if (match({"next", "to"})) {
    rel = Relation::kNone;
  } else {
    return fail();
  }
  if (!object(second) || pos != words.size()) return fail();
  return make_spec({first, second}, rel);
}

std::vector<Example> gen_dataset(int n, std::uint64_t seed) {
  if (n < 1) throw ContractError("gen_dataset: n must be >= 1");
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto spec = sample_spec(rng);
    out.push_back({render(spec), caption(spec), spec});
  }
  return out;
}

bool is_heldout(const SceneSpec& spec, int mod) {
  if (mod < 0) throw ContractError("is_heldout: mod must be >= 0");
  if (mod == 0) return false;
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : caption(spec)) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h % static_cast<std::uint64_t>(mod) == 0;
}

std::vector<SceneSpec> heldout_specs(int mod) {
  std::vector<SceneSpec> out;
  for (auto& s : all_canonical_specs()) {
    if (is_heldout(s, mod)) out.push_back(std::move(s));
  }
  return out;
}

std::vector<Example> gen_dataset(int n, std::uint64_t seed, int holdout_mod) {
  if (n < 1) throw ContractError("gen_dataset: n must be >= 1");
  if (holdout_mod == 1) throw ContractError("gen_dataset: holdout_mod 1 holds out everything");
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    auto spec = sample_spec(rng);
    if (is_heldout(spec, holdout_mod)) continue;
    out.push_back({render(spec), caption(spec), spec});
  }
  return out;
}

const std::vector<std::string>& prompt_categories() {
  static const std::vector<std::string> v{"Abstract",      "Animals",        "Artifacts", "Arts",
                                          "Food & Beverage", "Illustrations", "Indoor Scenes", "Outdoor Scenes",
                                          "People",        "Produce & Plants", "Vehicles", "World Knowledge"};
  return v;
}

const std::vector<std::string>& prompt_challenges() {
  static const std::vector<std::string> v{"Basic",       "Complex",     "Fine-grained Detail",
                                          "Imagination", "Linguistic Structures", "Perspective",
                                          "Properties & Positioning", "Quantity", "Simple Detail",
                                          "Style & Format", "Writing & Symbols"};
  return v;
}

std::vector<PromptRecord> parse_prompts(const std::string& text, const std::string& source) {
  std::vector<PromptRecord> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto where = [&]() { return source + ":" + std::to_string(lineno) + ": "; };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (lineno == 1 && cols.size() == 3 &&
        ((cols[0] == "Prompt" && cols[1] == "Category" && cols[2] == "Challenge") ||
         (cols[0] == "prompt" && cols[1] == "category" && cols[2] == "challenge"))) {
      continue;
    }
    if (cols.size() != 3) {
      throw DataError(where() + "expected 3 tab-separated columns, found " + std::to_string(cols.size()));
    }
    if (cols[0].empty()) throw DataError(where() + "empty prompt");
    const auto& cats = prompt_categories();
    const auto& chals = prompt_challenges();
    if (std::find(cats.begin(), cats.end(), cols[1]) == cats.end()) {
      throw DataError(where() + "unknown category label '" + cols[1] + "'");
    }
    if (std::find(chals.begin(), chals.end(), cols[2]) == chals.end()) {
      throw DataError(where() + "unknown challenge label '" + cols[2] + "'");
    }
    out.push_back({cols[0], cols[1], cols[2]});
  }
  return out;
}

std::vector<PromptRecord> load_prompts(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("load_prompts: cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_prompts(ss.str(), path.string());
}

}  // namespace arimg
