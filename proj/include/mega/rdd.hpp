#pragma once

// Sharp regression discontinuity in month of birth around a school-entry
// cutoff: Y = t0 + t1 Treat + t2 MoB + t3 Treat*MoB + W'mu + v, fitted by OLS
// with HC1 standard errors on a symmetric window of months.

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mega/cohort_data.hpp"
#include "mega/inference.hpp"

namespace mega {

// Calendar month (1-12) to months since the cutoff, in [-6, 5]. The cutoff
// month maps to 0 and is treated.
int normalize_running(int month, int cutoff_month = 9);
inline bool is_treated(int mob) { return mob >= 0; }
// Window of `bandwidth` months on each side: MoB in [-bandwidth, bandwidth - 1].
inline bool in_window(int mob, int bandwidth) { return mob >= -bandwidth && mob <= bandwidth - 1; }
std::string month_name(int month);
// "May - December" for bandwidth 4 around September.
std::string window_label(int bandwidth, int cutoff_month = 9);

inline constexpr const char* kTreatName = "treat";
inline constexpr const char* kMobName = "mob";
inline constexpr const char* kInteractionName = "treat_x_mob";

struct RddSpec {
  std::string outcome;
  std::string month_column = "birth_month";  // calendar month 1-12
  int cutoff_month = 9;
  int bandwidth = 4;
  std::vector<std::string> controls;
};

struct ClassEffect {
  std::string level;
  double estimate = 0.0;
  double std_error = 0.0;
  double t_stat = 0.0;
  double p_value = 1.0;
  Eigen::Index n_treated = 0;
  Eigen::Index n_control = 0;
};

struct RddFit {
  RddSpec spec;
  RegressionFit regression;
  Eigen::Index n = 0;
  Eigen::Index n_treated = 0;
  Eigen::Index n_control = 0;
  bool placebo = false;
  std::string class_column;
  std::vector<ClassEffect> classes;
  std::optional<WaldTest> equality;  // all class effects equal
  std::vector<std::string> notes;

  double treat() const { return regression.coef(kTreatName); }
  double treat_se() const { return regression.se(kTreatName); }
  double treat_p() const { return regression.p(kTreatName); }
};

RddFit rdd_fit(const RddSpec& spec, const CohortTable& data);

// One pooled regression with class dummies fully interacted with Treat, MoB
// and Treat*MoB; per-class effects are linear combinations with delta-method
// standard errors. `split` instead fits each class separately.
RddFit rdd_heterogeneity(const RddSpec& spec, const CohortTable& data, std::string_view class_column,
                         bool split = false);

// Same estimator on an outcome fixed before treatment; flagged as placebo.
RddFit placebo_outcome(const RddSpec& spec, const CohortTable& data, std::string_view placebo_column);

struct RddColumn {
  std::string label;
  std::vector<RddFit> panels;  // one per bandwidth, widest first
};

// Three-panel layout: Treat / MoB / Treat * MoB rows, N and adjusted R2 per panel.
std::string rdd_table_text(std::span<const RddColumn> columns, std::string_view title = {},
                           std::string_view notes = {});
std::string rdd_table_csv(std::span<const RddColumn> columns);

struct LabeledRdd {
  std::string label;
  RddFit fit;
};
// Per-class effect with confidence interval for plotting.
std::string class_effects_csv(std::span<const LabeledRdd> fits, double level = 0.90);

}  // namespace mega
