#include <gtest/gtest.h>

#include <array>
#include <set>

#include "arimg/data.hpp"

using namespace arimg;

namespace {

int non_white(const Image& img, int r0, int c0, int size) {
  int n = 0;
  for (int y = r0; y < r0 + size; ++y) {
    for (int x = c0; x < c0 + size; ++x) {
      const float* p = img.at(y, x);
      if (p[0] != 1.0f || p[1] != 1.0f || p[2] != 1.0f) ++n;
    }
  }
  return n;
}

}  // namespace

TEST(GenDataset, SameSeedIsBitIdentical) {
  const auto a = gen_dataset(64, 11);
  const auto b = gen_dataset(64, 11);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].caption, b[i].caption);
    EXPECT_EQ(a[i].spec, b[i].spec);
  }
  const auto c = gen_dataset(64, 12);
  int same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a[i].caption == c[i].caption;
  EXPECT_LT(same, 32);
}

TEST(GenDataset, AllSpecsValidAndConsistent) {
  for (const auto& ex : gen_dataset(1000, 3)) {
    EXPECT_NO_THROW(validate_spec(ex.spec));
    EXPECT_EQ(ex.caption, caption(ex.spec));
    EXPECT_EQ(ex.image, render(ex.spec));
    EXPECT_EQ(ex.image.height, 32);
    EXPECT_EQ(ex.image.width, 32);
  }
}

TEST(GenDataset, ShapeDistributionNearUniform) {
  std::array<int, kNumShapes> counts{};
  int total = 0;
  for (const auto& ex : gen_dataset(10000, 5)) {
    for (const auto& o : ex.spec.objects) {
      ++counts[static_cast<std::size_t>(o.shape)];
      ++total;
    }
  }
  for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / total, 1.0 / kNumShapes, 0.05);
}

TEST(GenDataset, RejectsNonPositiveCount) { EXPECT_THROW(gen_dataset(0, 1), ContractError); }

TEST(Render, SingleRedCircleTopLeft) {
  const auto spec = make_spec({{ShapeKind::kCircle, 0}}, Relation::kNone);
  const Image img = render(spec);
  const Rgb8 red = palette()[0];
  int red_px = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const float* p = img.at(y, x);
      if (p[0] == red.r / 255.0f && p[1] == red.g / 255.0f && p[2] == red.b / 255.0f) ++red_px;
    }
  }
  EXPECT_GT(red_px, 100);
  EXPECT_EQ(non_white(img, 0, 16, 16), 0);
  EXPECT_EQ(non_white(img, 16, 0, 16), 0);
  EXPECT_EQ(non_white(img, 16, 16, 16), 0);
  // centre pixel of the cell is inside, corner is not
  EXPECT_EQ(img.at(8, 8)[0], red.r / 255.0f);
  EXPECT_EQ(img.at(0, 0)[0], 1.0f);
}

TEST(Render, RoundTripsThroughBytesExactly) {
  for (const auto& ex : gen_dataset(50, 9)) {
    const auto bytes = to_rgb8(ex.image);
    EXPECT_EQ(from_rgb8(32, 32, bytes), ex.image);
  }
}

TEST(Render, TwoObjectSpecsFillBothCells) {
  for (const auto& spec : all_canonical_specs()) {
    if (spec.objects.size() != 2) continue;
    const Image img = render(spec);
    for (const auto& o : spec.objects) EXPECT_GT(non_white(img, o.row * 16, o.col * 16, 16), 40);
  }
}

TEST(Render, InvalidSpecThrows) {
  SceneSpec s;
  EXPECT_THROW(render(s), ContractError);
  s.objects = {{ShapeKind::kSquare, 1, 0, 0}, {ShapeKind::kSquare, 2, 0, 0}};
  EXPECT_THROW(render(s), ContractError);
  s.objects[1].col = 1;
  s.relation = Relation::kAbove;
  EXPECT_THROW(render(s), ContractError);
  s.objects = {{ShapeKind::kSquare, 9, 0, 0}};
  s.relation = Relation::kNone;
  EXPECT_THROW(render(s), ContractError);
}

TEST(Palette, EntriesAreDistinct) {
  std::set<std::array<int, 3>> seen;
  for (const auto& c : palette()) seen.insert({c.r, c.g, c.b});
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(kNumColors));
}

TEST(Caption, SingleObjectRoundTripExhaustive) {
  int n = 0;
  for (int s = 0; s < kNumShapes; ++s) {
    for (int c = 0; c < kNumColors; ++c) {
      const auto spec = make_spec({{static_cast<ShapeKind>(s), c}}, Relation::kNone);
      EXPECT_EQ(parse_caption(caption(spec)), spec);
      ++n;
    }
  }
  EXPECT_EQ(n, 24);
}

TEST(Caption, AllCanonicalSpecsRoundTrip) {
  const auto specs = all_canonical_specs();
  EXPECT_EQ(specs.size(), 24u + 3u * 24u * 24u);
  std::set<std::string> caps;
  for (const auto& spec : specs) {
    const auto text = caption(spec);
    caps.insert(text);
    EXPECT_EQ(parse_caption(text), spec) << text;
  }
  EXPECT_EQ(caps.size(), specs.size());
}

TEST(Caption, LeftOfExample) {
  const auto spec = parse_caption("a red circle to the left of a blue square");
  ASSERT_EQ(spec.objects.size(), 2u);
  EXPECT_EQ(spec.relation, Relation::kLeftOf);
  EXPECT_EQ(spec.objects[0].shape, ShapeKind::kCircle);
  EXPECT_EQ(spec.objects[0].color, 0);
  EXPECT_EQ(spec.objects[1].shape, ShapeKind::kSquare);
  EXPECT_EQ(spec.objects[1].color, 2);
  EXPECT_EQ(spec.objects[0].row, 0);
  EXPECT_EQ(spec.objects[0].col, 0);
  EXPECT_EQ(spec.objects[1].row, 0);
  EXPECT_EQ(spec.objects[1].col, 1);
}

TEST(Caption, AboveAndNextTo) {
  EXPECT_EQ(parse_caption("a cyan triangle above a black circle").relation, Relation::kAbove);
  const auto s = parse_caption("a cyan triangle next to a black circle");
  EXPECT_EQ(s.relation, Relation::kNone);
  EXPECT_EQ(s.objects[1].row, 1);
  EXPECT_EQ(s.objects[1].col, 1);
}

TEST(Caption, OutOfGrammarThrows) {
  for (const char* bad : {"hello", "", "a red", "a red circle ", " a red circle", "a  red circle", "a purple circle",
                          "a red hexagon", "A red circle", "a red circle above", "a red circle beside a blue square",
                          "a red circle above a blue square and", "the red circle"}) {
    EXPECT_THROW(parse_caption(bad), DataError) << '"' << bad << '"';
  }
}

TEST(Prompts, TwoLineFile) {
  const auto recs = parse_prompts("a cat\tAnimals\tBasic\nfive apples\tProduce & Plants\tQuantity\n");
  ASSERT_EQ(recs.size(), 2u);
  EXPECT_EQ(recs[0].prompt, "a cat");
  EXPECT_EQ(recs[1].category, "Produce & Plants");
  EXPECT_EQ(recs[1].challenge, "Quantity");
}

TEST(Prompts, HeaderCrlfAndTrailingBlankAccepted) {
  const auto recs = parse_prompts("Prompt\tCategory\tChallenge\r\nseven owls\tAnimals\tQuantity\r\n\r\n");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].category, "Animals");
  EXPECT_EQ(parse_prompts("prompt\tcategory\tchallenge\nx\tArts\tBasic\n").size(), 1u);
}

TEST(Prompts, UnknownLabelRejectedWithLine) {
  try {
    parse_prompts("a\tAnimals\tBasic\nb\tFoo\tBasic\n", "f.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("f.tsv:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("Foo"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_prompts("a\tAnimals\tFoo\n"), DataError);
}

TEST(Prompts, BadColumnCountRejectedWithLine) {
  try {
    parse_prompts("a\tAnimals\tBasic\na\tb\tc\nonly two\tAnimals\n", "g.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("g.tsv:2"), std::string::npos) << e.what();
  }
  try {
    parse_prompts("only two\tAnimals\n", "g.tsv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("g.tsv:1"), std::string::npos) << e.what();
  }
}

TEST(Prompts, VocabularySizes) {
  EXPECT_EQ(prompt_categories().size(), 12u);
  EXPECT_EQ(prompt_challenges().size(), 11u);
}

TEST(Prompts, FixtureCoversAllLabels) {
  const auto recs = load_prompts(ARIMG_DATA_DIR "/prompts_sample.tsv");
  EXPECT_EQ(recs.size(), 30u);
  std::set<std::string> cats, chals;
  for (const auto& r : recs) {
    cats.insert(r.category);
    chals.insert(r.challenge);
  }
  EXPECT_EQ(cats.size(), 12u);
  EXPECT_EQ(chals.size(), 11u);
}

TEST(Prompts, MissingFileThrows) { EXPECT_THROW(load_prompts("/nonexistent/p.tsv"), DataError); }

TEST(Holdout, SplitIsDisjointAndLargeEnough) {
  const auto held = heldout_specs(8);
  EXPECT_GE(held.size(), 200u);
  EXPECT_LT(held.size(), all_canonical_specs().size() / 4);
  std::set<std::string> caps;
  for (const auto& s : held) caps.insert(caption(s));
  EXPECT_EQ(caps.size(), held.size());
  for (const auto& e : gen_dataset(3000, 5, 8)) EXPECT_FALSE(caps.contains(e.caption)) << e.caption;
}

TEST(Holdout, ZeroModMatchesPlainGenerator) {
  const auto a = gen_dataset(50, 9);
  const auto b = gen_dataset(50, 9, 0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].caption, b[i].caption);
  EXPECT_TRUE(heldout_specs(0).empty());
  EXPECT_THROW(gen_dataset(5, 1, 1), ContractError);
}
