#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "cotforge/errors.hpp"

namespace cotforge::reward {

// Score intervals and weights for the shaped GRPO reward.
struct RewardConfig {
  double low_rv = 0.0;
  double high_rv = 1.0;
  double low_cd = 0.0;
  double high_cd = 1.0;
  double lambda_rv = 1.0;
  double lambda_cd = 1.0;

  void validate() const;
};

struct RewardBreakdown {
  double r_fmt = 0.0;
  double r_acc = 0.0;
  double r_rv = 0.0;
  double r_cd = 0.0;
  double total = 0.0;
};

double clip(double v, double lo, double hi);

// Interval penalty: 0 inside [lo, hi], minus the distance to the nearest bound outside.
double interval_penalty(double score, double lo, double hi);
double reward_rv(double f_rv, double lo, double hi);
double reward_cd(double f_cd, double lo, double hi);

RewardBreakdown total_reward(double r_fmt, double r_acc, double f_rv, double f_cd,
                             const RewardConfig& cfg);

// (r - mean) / population std; all zeros when the group has no spread.
std::vector<double> group_advantages(std::span<const double> rewards);

// Unbiased pass@k estimator 1 - C(n-c, k) / C(n, k).
double pass_at_k(long long n, long long c, long long k);

// 1 when the completion carries exactly one non-empty \boxed{...} answer.
double format_reward(std::string_view completion);
// 1 when the normalized answer equals the normalized reference.
double accuracy_reward(std::string_view answer, std::string_view reference);

}  // namespace cotforge::reward
