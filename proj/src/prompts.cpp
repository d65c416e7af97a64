#include "slim/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <sstream>

namespace slim {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

bool is_markup(char c) { return c == '*' || c == '_' || c == '#'; }

std::string_view strip_markup(std::string_view s) {
  s = trim(s);
  while (!s.empty() && is_markup(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_markup(s.back())) s.remove_suffix(1);
  return trim(s);
}

struct LabelMatch {
  int step;
  std::size_t begin;
  std::size_t end;  // one past the colon (and any trailing markup)
};

// Finds "step<ws>*N<markup>*<ws>*:" case-insensitively.
std::vector<LabelMatch> find_labels(std::string_view text) {
  std::vector<LabelMatch> out;
  const auto n = text.size();
  for (std::size_t i = 0; i + 4 < n; ++i) {
    if (std::tolower(static_cast<unsigned char>(text[i])) != 's') continue;
    if (i > 0 && std::isalnum(static_cast<unsigned char>(text[i - 1]))) continue;
    std::string word;
    for (std::size_t j = 0; j < 4; ++j) word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[i + j]))));
    if (word != "step") continue;
    std::size_t j = i + 4;
    while (j < n && (text[j] == ' ' || text[j] == '\t')) ++j;
    if (j >= n || text[j] < '1' || text[j] > '3') continue;
    const int step = text[j] - '0';
    ++j;
    if (j < n && std::isdigit(static_cast<unsigned char>(text[j]))) continue;
    while (j < n && (is_markup(text[j]) || text[j] == ' ' || text[j] == '\t')) ++j;
    if (j >= n || text[j] != ':') continue;
    ++j;
    out.push_back({step, i, j});
    i = j - 1;
  }
  return out;
}

}  // namespace

std::string_view to_string(TemplateKind kind) {
  return kind == TemplateKind::Teacher ? "teacher" : "student";
}

PromptTemplate PromptTemplate::default_teacher() {
  PromptTemplate t;
  t.kind = TemplateKind::Teacher;
  t.body =
      "You are an experienced shopping assistant with broad knowledge of products and brands.\n"
      "Below is the purchase history of a user, oldest first:\n"
      "{items}\n"
      "Reason about this user step by step, moving from general interests to concrete products.\n"
      "Step 1. {step1}\n"
      "Step 2. {step2}\n"
      "Step 3. {step3}\n"
      "Write your answer as three sections labeled \"Step 1:\", \"Step 2:\" and \"Step 3:\".\n";
  t.step_instructions = {
      "Summarize the preferences this user shows across the purchase history.",
      "Based on that summary, suggest product categories or brands the user is likely to want.",
      "Suggest specific products that fit the categories or brands from the previous step."};
  return t;
}

PromptTemplate PromptTemplate::default_student() {
  PromptTemplate t;
  t.kind = TemplateKind::Student;
  t.body =
      "Purchase history:\n"
      "{items}\n"
      "Step 1. {step1}\n"
      "Step 2. {step2}\n"
      "Step 3. {step3}\n"
      "Answer with \"Step 1:\", \"Step 2:\", \"Step 3:\".\n";
  t.step_instructions = {"Summarize the user's preferences.", "Suggest categories or brands.",
                         "Suggest specific products."};
  return t;
}

PromptTemplate PromptTemplate::from_file(TemplateKind kind, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open template " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto t = kind == TemplateKind::Teacher ? default_teacher() : default_student();
  t.body = ss.str();
  if (t.body.find("{items}") == std::string::npos) {
    throw InputError("template " + path.string() + " has no {items} placeholder");
  }
  return t;
}

std::string_view PromptTemplate::header() const {
  std::string_view b = body;
  return b.substr(0, b.find("{items}"));
}

std::string render_item_listing(const PromptTemplate& tpl, const std::vector<std::string>& items,
                                const ItemTable& table) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& item = table.at(items[i]);
    std::string line = tpl.item_line_format;
    replace_all(line, "{index}", std::to_string(i + 1));
    replace_all(line, "{category}", item.category ? " (category: " + *item.category + ")" : "");
    replace_all(line, "{brand}", item.brand ? " (brand: " + *item.brand + ")" : "");
    // Title last so titles containing braces are not expanded.
    replace_all(line, "{title}", item.title);
    if (i) out.push_back('\n');
    out += line;
  }
  return out;
}

RenderedPrompt render_prompt(const PromptTemplate& tpl, const BehaviorSequence& seq,
                             const ItemTable& table) {
  if (seq.items.empty()) {
    throw PreconditionError("cannot render a prompt for user '" + seq.user + "': empty sequence");
  }
  const auto listing = render_item_listing(tpl, seq.items, table);
  std::string text = tpl.body;
  replace_all(text, "{step1}", tpl.step_instructions[0]);
  replace_all(text, "{step2}", tpl.step_instructions[1]);
  replace_all(text, "{step3}", tpl.step_instructions[2]);
  const auto pos = text.find("{items}");
  if (pos != std::string::npos) text.replace(pos, 7, listing);
  return {seq.user, std::move(text), tpl.kind};
}

RenderedPrompt render_teacher_prompt(const BehaviorSequence& seq, const ItemTable& table) {
  static const auto tpl = PromptTemplate::default_teacher();
  return render_prompt(tpl, seq, table);
}

RenderedPrompt render_student_prompt(const BehaviorSequence& seq, const ItemTable& table) {
  static const auto tpl = PromptTemplate::default_student();
  return render_prompt(tpl, seq, table);
}

Rationale parse_rationale(const std::string& user, const std::string& raw) {
  if (trim(raw).empty()) throw RationaleParseError(1, "empty rationale text");
  const auto labels = find_labels(raw);
  std::array<std::optional<std::size_t>, 4> first;  // index into labels
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& slot = first[static_cast<std::size_t>(labels[i].step)];
    if (!slot) slot = i;
  }
  for (int s = 1; s <= 3; ++s) {
    if (!first[static_cast<std::size_t>(s)]) {
      throw RationaleParseError(s, "missing label 'Step " + std::to_string(s) + ":'");
    }
  }
  for (int s = 2; s <= 3; ++s) {
    if (*first[static_cast<std::size_t>(s)] < *first[static_cast<std::size_t>(s - 1)]) {
      throw RationaleParseError(s, "label 'Step " + std::to_string(s) + ":' appears out of order");
    }
  }
  std::array<std::string, 3> bodies;
  const std::string_view text = raw;
  for (int s = 1; s <= 3; ++s) {
    const auto idx = *first[static_cast<std::size_t>(s)];
    const auto begin = labels[idx].end;
    const auto end = idx + 1 < labels.size() ? labels[idx + 1].begin : text.size();
    bodies[static_cast<std::size_t>(s - 1)] = std::string(strip_markup(text.substr(begin, end - begin)));
    if (bodies[static_cast<std::size_t>(s - 1)].empty()) {
      throw RationaleParseError(s, "empty body for 'Step " + std::to_string(s) + ":'");
    }
  }
  return {user, bodies[0], bodies[1], bodies[2], raw};
}

std::string format_rationale(const std::string& step1, const std::string& step2,
                             const std::string& step3) {
  return "Step 1: " + step1 + "\nStep 2: " + step2 + "\nStep 3: " + step3;
}

StepSelector parse_step_selector(std::string_view s) {
  if (s == "1") return StepSelector::Step1;
  if (s == "2") return StepSelector::Step2;
  if (s == "3") return StepSelector::Step3;
  if (s == "all") return StepSelector::All;
  throw InputError("invalid step selector '" + std::string(s) + "' (expected 1, 2, 3 or all)");
}

std::string_view to_string(StepSelector step) {
  switch (step) {
    case StepSelector::Step1: return "1";
    case StepSelector::Step2: return "2";
    case StepSelector::Step3: return "3";
    case StepSelector::All: return "all";
  }
  return "all";
}

std::string rationale_step_text(const Rationale& r, StepSelector step) {
  switch (step) {
    case StepSelector::Step1: return r.step1;
    case StepSelector::Step2: return r.step2;
    case StepSelector::Step3: return r.step3;
    case StepSelector::All: return r.step1 + "\n" + r.step2 + "\n" + r.step3;
  }
  return {};
}

}  // namespace slim
