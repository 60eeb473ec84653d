#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arimg/image.hpp"
#include "arimg/rng.hpp"

namespace arimg {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle };
enum class Relation : std::uint8_t { kNone, kLeftOf, kAbove };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumColors = 8;
inline constexpr int kRenderSize = 32;
inline constexpr int kGridCells = 2;  // cells per side

struct Rgb8 {
  std::uint8_t r, g, b;
};
const std::array<Rgb8, kNumColors>& palette();
const char* color_name(int color);
const char* shape_name(ShapeKind shape);

struct SceneObject {
  ShapeKind shape = ShapeKind::kCircle;
  int color = 0;
  int row = 0;
  int col = 0;
  bool operator==(const SceneObject&) const = default;
};

// One or two objects. With two objects the relation binds their order:
// left_of puts objects[0] left of objects[1], above puts it above.
struct SceneSpec {
  std::vector<SceneObject> objects;
  Relation relation = Relation::kNone;
  bool operator==(const SceneSpec&) const = default;
};

// Throws ContractError when the spec breaks an invariant.
void validate_spec(const SceneSpec& spec);
// Cells assigned by the caption grammar: one object -> (0,0); left_of ->
// (0,0),(0,1); above -> (0,0),(1,0); none with two objects -> (0,0),(1,1).
std::vector<std::pair<int, int>> canonical_cells(std::size_t n_objects, Relation relation);
SceneSpec make_spec(const std::vector<std::pair<ShapeKind, int>>& objects, Relation relation);

// Uniform draw: object count in {1, 2}, then relation, then shapes and colours.
SceneSpec sample_spec(Rng& rng);
// Every canonical spec (24 single-object, 3 * 24 * 24 two-object).
std::vector<SceneSpec> all_canonical_specs();

// Glyph coverage test at cell-relative coordinates (u, v) in [0, 1).
bool glyph_contains(ShapeKind shape, double u, double v);
// White background; each object filled in its cell. size must be a multiple of 2.
Image render(const SceneSpec& spec, int size = kRenderSize);

std::string caption(const SceneSpec& spec);
// Exact inverse of caption(); throws DataError on text outside the grammar.
SceneSpec parse_caption(const std::string& text);

struct Example {
  Image image;
  std::string caption;
  SceneSpec spec;
};
std::vector<Example> gen_dataset(int n, std::uint64_t seed);

// Held-out split: a spec is held out when the FNV-1a hash of its caption is
// divisible by `mod` (mod 0 holds nothing out). Stable across platforms.
bool is_heldout(const SceneSpec& spec, int mod);
// Canonical specs that are held out, in all_canonical_specs() order.
std::vector<SceneSpec> heldout_specs(int mod);
// gen_dataset that redraws held-out specs; mod 0 equals gen_dataset.
std::vector<Example> gen_dataset(int n, std::uint64_t seed, int holdout_mod);

// Prompt benchmark file.
struct PromptRecord {
  std::string prompt;
  std::string category;
  std::string challenge;
};
const std::vector<std::string>& prompt_categories();
const std::vector<std::string>& prompt_challenges();
// UTF-8 TSV: prompt<TAB>category<TAB>challenge per line, optional header
// "Prompt<TAB>Category<TAB>Challenge" (either capitalisation). Throws DataError
// naming the line for bad column counts or unknown labels.
std::vector<PromptRecord> load_prompts(const std::filesystem::path& path);
std::vector<PromptRecord> parse_prompts(const std::string& text, const std::string& source = "<memory>");

}  // namespace arimg
