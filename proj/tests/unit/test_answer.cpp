#include <doctest.h>

#include <numeric>

#include "cotforge/answer.hpp"

using namespace cotforge;

namespace {

// Independent oracle: exact rational value of "p/q" compared by cross-multiplication.
bool fraction_equals_decimal(long long p, long long q, long long num, long long den) {
  return p * den == num * q;
}

}  // namespace

TEST_CASE("extract_boxed takes the last balanced box") {
  CHECK(extract_boxed("so \\boxed{42}.") == "42");
  CHECK(extract_boxed("\\boxed{1} then \\boxed{\\frac{1}{2}}") == "\\frac{1}{2}");
  CHECK_FALSE(extract_boxed("no box here"));
  CHECK_FALSE(extract_boxed("\\boxed{unclosed"));
  CHECK(extract_boxed("\\boxed{}") == "");
}

TEST_CASE("normalize_answer") {
  CHECK(normalize_answer("  42. ") == "42");
  CHECK(normalize_answer("\\boxed{ X  +  Y }") == "x + y");
  CHECK(normalize_answer("$7$") == "7");
  CHECK(normalize_answer("Paris") == normalize_answer("paris"));
}

TEST_CASE("numeric parsing") {
  CHECK(parse_numeric_answer("42") == 42.0);
  CHECK(parse_numeric_answer("-3.5") == -3.5);
  CHECK(parse_numeric_answer("1,234") == 1234.0);
  CHECK(parse_numeric_answer("2.5e3") == 2500.0);
  CHECK(parse_numeric_answer("1/4") == 0.25);
  CHECK(parse_numeric_answer("\\frac{3}{4}") == 0.75);
  CHECK(parse_numeric_answer("-\\dfrac{1}{2}") == -0.5);
  CHECK(parse_numeric_answer("\\boxed{1/2}") == 0.5);
  CHECK_FALSE(parse_numeric_answer("x + 1"));
  CHECK_FALSE(parse_numeric_answer("1/0"));
  CHECK_FALSE(parse_numeric_answer(""));
}

TEST_CASE("fraction against decimal matches a rational oracle") {
  // "\boxed{1/2}" vs "0.5": 1/2 == 5/10 exactly.
  REQUIRE(fraction_equals_decimal(1, 2, 5, 10));
  CHECK(numerically_equal(*parse_numeric_answer("\\boxed{1/2}"), *parse_numeric_answer("0.5")));
  for (long long q = 1; q <= 16; ++q) {
    for (long long p = 0; p <= q; ++p) {
      const long long den = 1'000'000;
      const long long num = p * den / q;
      const bool exact = fraction_equals_decimal(p, q, num, den);
      const std::string decimal = std::to_string(num / den) + "." + [&] {
        auto s = std::to_string(num % den);
        return std::string(6 - s.size(), '0') + s;
      }();
      const bool equal = numerically_equal(*parse_numeric_answer(std::to_string(p) + "/" + std::to_string(q)),
                                           *parse_numeric_answer(decimal));
      CHECK_MESSAGE(equal == exact, p, "/", q, " vs ", decimal);
    }
  }
}

TEST_CASE("numerically_equal uses relative tolerance") {
  CHECK(numerically_equal(1e12, 1e12 + 1));
  CHECK_FALSE(numerically_equal(41, 42));
  CHECK(numerically_equal(0.0, 0.0));
  CHECK_FALSE(numerically_equal(0.0, 1e-6));
}

TEST_CASE("split_teacher_output") {
  auto a = split_teacher_output("<think>\nadd them\n</think>\n\nSo \\boxed{4}.");
  CHECK(a.reasoning == "add them");
  CHECK(a.final_answer == "4");
  auto b = split_teacher_output("We add.\nFinal answer: 12");
  CHECK(b.reasoning == "We add.\nFinal answer: 12");
  CHECK(b.final_answer == "12");
  auto c = split_teacher_output("line one\nline two");
  CHECK(c.final_answer == "line two");
}
