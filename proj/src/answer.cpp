#include "cotforge/answer.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <regex>

namespace cotforge {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Reads a brace-balanced group starting at s[pos] == '{'. Returns the inner text and
// advances pos past the closing brace.
std::optional<std::string> read_group(std::string_view s, std::size_t& pos) {
  if (pos >= s.size() || s[pos] != '{') return std::nullopt;
  int depth = 0;
  for (std::size_t i = pos; i < s.size(); ++i) {
    if (s[i] == '{') {
      ++depth;
    } else if (s[i] == '}') {
      if (--depth == 0) {
        std::string inner(s.substr(pos + 1, i - pos - 1));
        pos = i + 1;
        return inner;
      }
    }
  }
  return std::nullopt;
}

std::optional<double> parse_plain_number(std::string_view s) {
  static const std::regex pattern(R"(^[+-]?((\d{1,3}(,\d{3})+)|\d+)?(\.\d+)?([eE][+-]?\d+)?$)");
  if (s.empty() || !std::regex_match(s.begin(), s.end(), pattern)) return std::nullopt;
  if (std::none_of(s.begin(), s.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    return std::nullopt;
  }
  std::string cleaned;
  for (char c : s) {
    if (c != ',' && c != '+') cleaned.push_back(c);
  }
  // "-.5" and ".5" are accepted by the pattern but not by from_chars in all forms.
  if (cleaned.starts_with("-.")) cleaned.insert(1, "0");
  if (cleaned.starts_with(".")) cleaned.insert(0, "0");
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(cleaned.data(), cleaned.data() + cleaned.size(), v);
  if (ec != std::errc{} || ptr != cleaned.data() + cleaned.size()) return std::nullopt;
  return v;
}

}  // namespace

std::optional<std::string> extract_boxed(std::string_view text) {
  static constexpr std::string_view marker = "\\boxed";
  auto at = text.rfind(marker);
  while (at != std::string_view::npos) {
    std::size_t pos = at + marker.size();
    while (pos < text.size() && text[pos] == ' ') ++pos;
    if (auto inner = read_group(text, pos)) return std::string(trim(*inner));
    if (at == 0) break;
    at = text.rfind(marker, at - 1);
  }
  return std::nullopt;
}

std::string normalize_answer(std::string_view answer) {
  std::string s(trim(answer));
  if (auto boxed = extract_boxed(s)) s = *boxed;
  std::string_view v = trim(s);
  while (v.size() >= 2 && v.front() == '$' && v.back() == '$') v = trim(v.substr(1, v.size() - 2));
  while (!v.empty() && v.back() == '.') v = trim(v.substr(0, v.size() - 1));
  std::string out;
  bool pending_space = false;
  for (char c : v) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.empty()) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::optional<double> parse_numeric_answer(std::string_view answer) {
  std::string s = normalize_answer(answer);
  std::erase(s, ' ');
  if (s.empty()) return std::nullopt;

  std::string_view latex = s;
  bool negative = false;
  if (latex.starts_with('-')) {
    negative = true;
    latex.remove_prefix(1);
  }
  for (std::string_view cmd : {"\\frac", "\\dfrac", "\\tfrac"}) {
    if (!latex.starts_with(cmd)) continue;
    std::size_t pos = cmd.size();
    auto num = read_group(latex, pos);
    auto den = read_group(latex, pos);
    if (!num || !den || pos != latex.size()) return std::nullopt;
    auto n = parse_numeric_answer(*num);
    auto d = parse_numeric_answer(*den);
    if (!n || !d || *d == 0.0) return std::nullopt;
    return (negative ? -1.0 : 1.0) * (*n / *d);
  }

  if (auto slash = s.find('/'); slash != std::string::npos) {
    auto n = parse_plain_number(std::string_view(s).substr(0, slash));
    auto d = parse_plain_number(std::string_view(s).substr(slash + 1));
    if (!n || !d || *d == 0.0) return std::nullopt;
    return *n / *d;
  }
  return parse_plain_number(s);
}

bool numerically_equal(double a, double b, double rel_tol) {
  if (a == b) return true;
  if (!std::isfinite(a) || !std::isfinite(b)) return false;
  return std::fabs(a - b) <= rel_tol * std::max(std::fabs(a), std::fabs(b));
}

TeacherOutput split_teacher_output(std::string_view reply) {
  TeacherOutput out;
  std::string_view tail = reply;
  if (auto close = reply.find("</think>"); close != std::string_view::npos) {
    auto open = reply.find("<think>");
    std::size_t begin = (open != std::string_view::npos && open < close) ? open + 7 : 0;
    out.reasoning = std::string(trim(reply.substr(begin, close - begin)));
    tail = reply.substr(close + 8);
  } else {
    out.reasoning = std::string(trim(reply));
  }
  if (trim(tail).empty()) tail = reply;

  if (auto boxed = extract_boxed(tail)) {
    out.final_answer = *boxed;
    return out;
  }
  std::string lowered = to_lower(tail);
  if (auto at = lowered.rfind("final answer:"); at != std::string::npos) {
    std::string_view rest = tail.substr(at + 13);
    out.final_answer = std::string(trim(rest.substr(0, rest.find('\n'))));
    return out;
  }
  std::string_view body = trim(tail);
  auto nl = body.rfind('\n');
  out.final_answer = std::string(trim(nl == std::string_view::npos ? body : body.substr(nl + 1)));
  return out;
}

}  // namespace cotforge
