#pragma once

// Least squares with classical and HC1 standard errors, age-acceleration
// residuals, the outcome/exposure regression specifications and the stacked
// GLS system that the weighted index collapses.

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mega/cohort_data.hpp"

namespace mega {

enum class SeType { Classical, HC1 };
std::string_view to_string(SeType t);

inline constexpr const char* kInterceptName = "_cons";

struct LinearModelSpec {
  std::string outcome;
  std::vector<std::string> regressors;  // categorical columns expand to dummies
  bool intercept = true;
  SeType se_type = SeType::Classical;
  // Row filter applied before listwise deletion; empty keeps every row.
  std::function<bool(const CohortTable&, std::size_t)> filter;
};

struct RegressionFit {
  std::vector<std::string> names;
  Eigen::VectorXd coefficients;
  Eigen::VectorXd std_errors;
  Eigen::VectorXd t_stats;
  Eigen::VectorXd p_values;  // two-sided, Student t with df_resid
  Eigen::MatrixXd covariance;
  Eigen::VectorXd residuals;
  Eigen::Index n = 0;
  Eigen::Index df_resid = 0;
  double r2 = 0.0;
  double adj_r2 = 0.0;
  SeType se_type = SeType::Classical;
  std::vector<std::string> warnings;

  Eigen::Index index_of(std::string_view name) const;
  double coef(std::string_view name) const { return coefficients(index_of(name)); }
  double se(std::string_view name) const { return std_errors(index_of(name)); }
  double p(std::string_view name) const { return p_values(index_of(name)); }
};

struct Design {
  Eigen::MatrixXd x;
  std::vector<std::string> names;
};

// Regressor columns for the given rows; categorical columns contribute one
// dummy per level except the first level present ("name=level").
Design build_design(const CohortTable& table, std::span<const std::string> regressors,
                    std::span<const std::size_t> rows, bool intercept);

// Core solver on matrices. Rank is checked by column-pivoted Householder QR
// with threshold 1e-10 * ||X||; a deficient design names a collinear column.
RegressionFit ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<std::string> names,
                  SeType se_type = SeType::Classical, bool has_intercept = true);

RegressionFit ols_fit(const LinearModelSpec& spec, const CohortTable& data);

// Two-sided p-value of a t statistic (normal when df <= 0).
double t_p_value(double t, double df);
double t_critical(double level, double df);
// Wald test of R b = 0 as an F statistic.
struct WaldTest {
  double statistic = 0.0;
  int df1 = 0;
  double df2 = 0.0;
  double p_value = 1.0;
};
WaldTest wald_test(const RegressionFit& fit, const Eigen::MatrixXd& restriction);

Eigen::VectorXd age_acceleration(const Eigen::VectorXd& scores, const Eigen::VectorXd& age_years);

enum class GlsCovariance { Clocks, Residuals };

// Stacks C_k = X b + e_k for every clock with Var(e) = M (x) I_N and a common
// b, and solves the full generalized least squares system.
RegressionFit constrained_sur_gls(const Eigen::MatrixXd& clocks, const Eigen::MatrixXd& x,
                                  std::vector<std::string> names,
                                  GlsCovariance covariance = GlsCovariance::Clocks);

struct OutcomeModelColumns {
  std::string outcome;  // binary adult outcome (linear probability)
  std::string mega;
  std::vector<std::string> health;    // BMI, smoker, drinker
  std::vector<std::string> controls;  // demographic block
  bool include_health = true;
};

LinearModelSpec build_outcome_model(const CohortTable& table, const OutcomeModelColumns& columns);

struct ExposureModelColumns {
  std::string mega;
  // Either {0-10, 11-18} or {cruelty 0-10, sex 0-10, cruelty 11-18, sex 11-18}.
  std::vector<std::string> exposures;
  std::vector<std::string> controls;
  std::vector<std::string> extra;  // e.g. cell-count covariates
};

LinearModelSpec build_exposure_model(const CohortTable& table, const ExposureModelColumns& columns);

// "0.539** (0.251)" with * p<0.1, ** p<0.05, *** p<0.01.
std::string stars(double p);
std::string coefficient_cell(double b, double se, double p, int decimals = 3);

struct TableColumn {
  std::string label;
  RegressionFit fit;
};

struct TableRow {
  std::string regressor;
  std::string label;
};

// Aligned text and CSV in the coefficient (SE) layout with N and adjusted R2.
std::string regression_table_text(std::span<const TableColumn> columns,
                                  std::span<const TableRow> rows, std::string_view title = {},
                                  std::string_view notes = {});
std::string regression_table_csv(std::span<const TableColumn> columns,
                                 std::span<const TableRow> rows);

// Point estimate and confidence interval per (column, regressor), for plots.
std::string effect_plot_csv(std::span<const TableColumn> columns, std::span<const TableRow> rows,
                            double level = 0.90);

}  // namespace mega
