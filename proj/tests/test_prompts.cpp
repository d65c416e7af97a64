#include <gtest/gtest.h>

#include "slim/error.hpp"
#include "slim/hashing.hpp"
#include "slim/prompts.hpp"
#include "temp_dir.hpp"

using namespace slim;

namespace {

ItemTable games() {
  return ItemTable({{"g1", "Mario Kart", std::string("Video Games"), std::string("Nintendo")},
                    {"g2", "Zelda", std::string("Video Games"), std::nullopt},
                    {"g3", "Plain", std::nullopt, std::nullopt}});
}

std::size_t count(const std::string& hay, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = hay.find(needle); p != std::string::npos; p = hay.find(needle, p + 1)) ++n;
  return n;
}

std::string random_body(Rng& rng) {
  static const std::string alphabet = "abcdefg XYZ,.;-!?\n\t*";
  std::string out;
  const auto len = 1 + uniform_index(rng, 40);
  for (std::size_t i = 0; i < len; ++i) out.push_back(alphabet[uniform_index(rng, alphabet.size())]);
  return out;
}

}  // namespace

TEST(RenderPrompt, TitlesInOrderWithThreeSteps) {
  const auto p = render_teacher_prompt({"u", {"g1", "g2"}}, games());
  const auto a = p.text.find("Mario Kart");
  const auto b = p.text.find("Zelda");
  ASSERT_NE(a, std::string::npos);
  ASSERT_NE(b, std::string::npos);
  EXPECT_LT(a, b);
  EXPECT_EQ(count(p.text, "Mario Kart"), 1u);
  EXPECT_EQ(count(p.text, "Zelda"), 1u);
  for (const char* label : {"Step 1.", "Step 2.", "Step 3."}) EXPECT_EQ(count(p.text, label), 1u) << label;
  EXPECT_EQ(p.user, "u");
  EXPECT_EQ(p.template_kind, TemplateKind::Teacher);
}

TEST(RenderPrompt, CategoryAndBrandDecorations) {
  const auto listing = render_item_listing(PromptTemplate::default_teacher(), {"g1", "g2", "g3"}, games());
  EXPECT_EQ(listing,
            "1. Mario Kart (category: Video Games) (brand: Nintendo)\n"
            "2. Zelda (category: Video Games)\n"
            "3. Plain");
}

TEST(RenderPrompt, EmptySequenceRejected) {
  EXPECT_THROW(render_teacher_prompt({"u", {}}, games()), PreconditionError);
  EXPECT_THROW(render_student_prompt({"u", {}}, games()), PreconditionError);
}

TEST(RenderPrompt, UnknownItemIsLookupError) {
  EXPECT_THROW(render_teacher_prompt({"u", {"nope"}}, games()), ReferenceError);
}

TEST(RenderPrompt, StudentIsShorterWithSameListing) {
  const BehaviorSequence seq{"u", {"g1", "g2"}};
  const auto t = render_teacher_prompt(seq, games());
  const auto s = render_student_prompt(seq, games());
  EXPECT_LT(s.text.size(), t.text.size());
  EXPECT_LT(PromptTemplate::default_student().header().size(), PromptTemplate::default_teacher().header().size());
  const auto listing = render_item_listing(PromptTemplate::default_teacher(), seq.items, games());
  EXPECT_NE(t.text.find(listing), std::string::npos);
  EXPECT_NE(s.text.find(listing), std::string::npos);
  EXPECT_EQ(s.template_kind, TemplateKind::Student);
}

TEST(RenderPrompt, PureFunction) {
  const BehaviorSequence seq{"u", {"g2", "g3", "g1"}};
  EXPECT_EQ(render_teacher_prompt(seq, games()).text, render_teacher_prompt(seq, games()).text);
}

TEST(RenderPrompt, TitleWithPlaceholderIsNotExpanded) {
  const ItemTable t({{"x", "Odd {brand} title", std::nullopt, std::string("B")}});
  EXPECT_EQ(render_item_listing(PromptTemplate::default_student(), {"x"}, t), "1. Odd {brand} title (brand: B)");
}

TEST(TemplateFile, OverridesBody) {
  slim::testing::TempDir dir;
  slim::testing::write_file(dir / "t.txt", "History:\n{items}\n1) {step1}\n");
  const auto tpl = PromptTemplate::from_file(TemplateKind::Student, dir / "t.txt");
  const auto p = render_prompt(tpl, {"u", {"g3"}}, games());
  EXPECT_EQ(p.text, "History:\n1. Plain\n1) " + PromptTemplate::default_student().step_instructions[0] + "\n");
  slim::testing::write_file(dir / "bad.txt", "no listing here");
  EXPECT_THROW(PromptTemplate::from_file(TemplateKind::Teacher, dir / "bad.txt"), InputError);
  EXPECT_THROW(PromptTemplate::from_file(TemplateKind::Teacher, dir / "missing.txt"), InputError);
}

TEST(ParseRationale, ThreeSteps) {
  const auto r = parse_rationale("u", "Step 1: likes RPGs\nStep 2: Action RPG\nStep 3: Elden Ring");
  EXPECT_EQ(r.step1, "likes RPGs");
  EXPECT_EQ(r.step2, "Action RPG");
  EXPECT_EQ(r.step3, "Elden Ring");
  EXPECT_EQ(r.user, "u");
}

TEST(ParseRationale, MissingStepTwo) {
  try {
    parse_rationale("u", "Step 1: a\nStep 3: c");
    FAIL();
  } catch (const RationaleParseError& e) {
    EXPECT_EQ(e.step(), 2);
  }
}

TEST(ParseRationale, OrderViolation) {
  EXPECT_THROW(parse_rationale("u", "Step 2: b\nStep 1: a\nStep 3: c"), RationaleParseError);
}

TEST(ParseRationale, EmptyBody) {
  try {
    parse_rationale("u", "Step 1: a\nStep 2:   \nStep 3: c");
    FAIL();
  } catch (const RationaleParseError& e) {
    EXPECT_EQ(e.step(), 2);
  }
}

TEST(ParseRationale, MarkdownAndCaseTolerated) {
  const auto r = parse_rationale("u", "Sure!\n**Step 1:** loves puzzles\n\n**STEP 2**: Puzzle\nstep 3: Tetris;\nPortal");
  EXPECT_EQ(r.step1, "loves puzzles");
  EXPECT_EQ(r.step2, "Puzzle");
  EXPECT_EQ(r.step3, "Tetris;\nPortal");
}

TEST(ParseRationale, RoundTripProperty) {
  Rng rng(42);
  for (int i = 0; i < 500; ++i) {
    std::string b[3];
    for (auto& s : b) {
      do {
        s = random_body(rng);
      } while (std::string(s).find_first_not_of(" \t\n*") == std::string::npos);
      // Canonical bodies carry no surrounding whitespace or emphasis.
      while (!s.empty() && std::string(" \t\n*").find(s.front()) != std::string::npos) s.erase(0, 1);
      while (!s.empty() && std::string(" \t\n*").find(s.back()) != std::string::npos) s.pop_back();
      if (s.empty()) s = "x";
    }
    const auto text = format_rationale(b[0], b[1], b[2]);
    const auto r = parse_rationale("u", text);
    EXPECT_EQ(r.step1, b[0]);
    EXPECT_EQ(r.step2, b[1]);
    EXPECT_EQ(r.step3, b[2]);
    EXPECT_EQ(r.raw, text);
  }
}

TEST(StepText, Selection) {
  const Rationale r{"u", "likes RPGs", "Action RPG", "Elden Ring", ""};
  EXPECT_EQ(rationale_step_text(r, StepSelector::Step3), "Elden Ring");
  EXPECT_EQ(rationale_step_text(r, StepSelector::Step1), "likes RPGs");
  EXPECT_EQ(rationale_step_text(r, StepSelector::All), "likes RPGs\nAction RPG\nElden Ring");
  EXPECT_EQ(parse_step_selector("all"), StepSelector::All);
  EXPECT_EQ(parse_step_selector("2"), StepSelector::Step2);
  EXPECT_THROW(parse_step_selector("4"), InputError);
}
