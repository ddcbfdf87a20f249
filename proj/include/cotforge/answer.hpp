#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace cotforge {

// Contents of the last \boxed{...} (brace-balanced), if any.
std::optional<std::string> extract_boxed(std::string_view text);

// Unwraps \boxed{}, strips $ delimiters, whitespace and a trailing period, lowercases,
// and collapses internal whitespace runs.
std::string normalize_answer(std::string_view answer);

// Parses integers, decimals, scientific notation, a/b fractions, \frac{a}{b} and
// thousands separators. Returns nullopt for anything else.
std::optional<double> parse_numeric_answer(std::string_view answer);

// Relative tolerance comparison used by the verifier.
bool numerically_equal(double a, double b, double rel_tol = 1e-9);

struct TeacherOutput {
  std::string reasoning;
  std::string final_answer;
};

// Splits a teacher reply into reasoning and final answer. Reasoning is the <think> block
// when present, otherwise the whole reply. The final answer is the last \boxed{} after the
// reasoning, else the text after a trailing "Final Answer:" marker, else the last line.
TeacherOutput split_teacher_output(std::string_view reply);

}  // namespace cotforge
