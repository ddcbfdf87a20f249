#include "cotforge/reward.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <string>

#include "cotforge/answer.hpp"

namespace cotforge::reward {

namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

void require_score(double v, const char* name) {
  require(std::isfinite(v) && v >= 0.0 && v <= 1.0, std::string(name) + " must lie in [0,1]");
}

}  // namespace

void RewardConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(in_unit(low_rv) && in_unit(high_rv) && in_unit(low_cd) && in_unit(high_cd),
          "reward interval bounds must lie in [0,1]");
  require(low_rv <= high_rv, "L_rv must not exceed H_rv");
  require(low_cd <= high_cd, "L_cd must not exceed H_cd");
  require(lambda_rv >= 0.0 && lambda_cd >= 0.0, "reward weights must be >= 0");
}

double clip(double v, double lo, double hi) {
  require(lo <= hi, "clip requires lo <= hi");
  return std::min(std::max(v, lo), hi);
}

// Bounds and scores are usually short decimals (0.3, 7/9); rounding the distance to 15
// significant digits drops the binary representation error, so 0.9 - 0.7 yields 0.2.
double interval_penalty(double score, double lo, double hi) {
  const double d = std::fabs(score - clip(score, lo, hi));
  if (d == 0.0) return 0.0;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.15g", d);
  return -std::strtod(buf, nullptr);
}

double reward_rv(double f_rv, double lo, double hi) {
  require_score(f_rv, "f_rv");
  return interval_penalty(f_rv, lo, hi);
}

double reward_cd(double f_cd, double lo, double hi) {
  require_score(f_cd, "f_cd");
  return interval_penalty(f_cd, lo, hi);
}

RewardBreakdown total_reward(double r_fmt, double r_acc, double f_rv, double f_cd,
                             const RewardConfig& cfg) {
  cfg.validate();
  RewardBreakdown b;
  b.r_fmt = r_fmt;
  b.r_acc = r_acc;
  b.r_rv = reward_rv(f_rv, cfg.low_rv, cfg.high_rv);
  b.r_cd = reward_cd(f_cd, cfg.low_cd, cfg.high_cd);
  b.total = r_fmt + r_acc + cfg.lambda_rv * b.r_rv + cfg.lambda_cd * b.r_cd;
  return b;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  require(rewards.size() >= 2, "group_advantages requires at least 2 rewards");
  require(std::all_of(rewards.begin(), rewards.end(), [](double r) { return std::isfinite(r); }),
          "group_advantages requires finite rewards");
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) {
    return out;
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double stddev = std::sqrt(ss / n);
  if (stddev == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / stddev;
  return out;
}

double pass_at_k(long long n, long long c, long long k) {
  require(0 <= c && c <= n, "pass_at_k requires 0 <= c <= n");
  require(1 <= k && k <= n, "pass_at_k requires 1 <= k <= n");
  if (n - c < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k / i)
  double miss = 1.0;
  for (long long i = n - c + 1; i <= n; ++i) {
    miss *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  }
  return 1.0 - miss;
}

double format_reward(std::string_view completion) {
  std::size_t count = 0;
  for (auto pos = completion.find("\\boxed{"); pos != std::string_view::npos;
       pos = completion.find("\\boxed{", pos + 1)) {
    ++count;
  }
  if (count != 1) return 0.0;
  auto boxed = extract_boxed(completion);
  return boxed && !boxed->empty() ? 1.0 : 0.0;
}

double accuracy_reward(std::string_view answer, std::string_view reference) {
  return normalize_answer(answer) == normalize_answer(reference) ? 1.0 : 0.0;
}

}  // namespace cotforge::reward
