#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "slim/dataset.hpp"
#include "slim/error.hpp"

namespace slim {

enum class TemplateKind { Teacher, Student };

std::string_view to_string(TemplateKind kind);

/// A prompt template. `body` carries the `{items}` and `{step1}`..`{step3}`
/// placeholders; item lines are produced from `item_line_format`, which accepts
/// `{index}`, `{title}`, `{category}` and `{brand}` (the last two expand to
/// " (category: X)" / " (brand: Y)" or nothing).
struct PromptTemplate {
  TemplateKind kind = TemplateKind::Teacher;
  std::string body;
  std::array<std::string, 3> step_instructions;
  std::string item_line_format = "{index}. {title}{category}{brand}";

  static PromptTemplate default_teacher();
  static PromptTemplate default_student();

  /// Same step instructions and item format as the default for `kind`, body read from file.
  static PromptTemplate from_file(TemplateKind kind, const std::filesystem::path& path);

  /// Text preceding `{items}`.
  std::string_view header() const;
};

struct RenderedPrompt {
  std::string user;
  std::string text;
  TemplateKind template_kind = TemplateKind::Teacher;
};

struct Rationale {
  std::string user;
  std::string step1;
  std::string step2;
  std::string step3;
  std::string raw;

  bool operator==(const Rationale&) const = default;
};

/// The item listing shared by teacher and student prompts.
std::string render_item_listing(const PromptTemplate& tpl, const std::vector<std::string>& items,
                                const ItemTable& table);

RenderedPrompt render_prompt(const PromptTemplate& tpl, const BehaviorSequence& seq,
                             const ItemTable& table);

RenderedPrompt render_teacher_prompt(const BehaviorSequence& seq, const ItemTable& table);
RenderedPrompt render_student_prompt(const BehaviorSequence& seq, const ItemTable& table);

/// Thrown by parse_rationale; `step()` is the first offending step (1..3).
class RationaleParseError : public Error {
 public:
  RationaleParseError(int step, const std::string& what) : Error(what), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Splits generated text on the `Step 1:`/`Step 2:`/`Step 3:` labels.
/// Labels match case-insensitively and may be wrapped in markdown emphasis.
Rationale parse_rationale(const std::string& user, const std::string& raw);

/// Canonical text form "Step 1: a\nStep 2: b\nStep 3: c".
std::string format_rationale(const std::string& step1, const std::string& step2,
                             const std::string& step3);

enum class StepSelector { Step1 = 1, Step2 = 2, Step3 = 3, All = 0 };

StepSelector parse_step_selector(std::string_view s);
std::string_view to_string(StepSelector step);

std::string rationale_step_text(const Rationale& r, StepSelector step);

}  // namespace slim
