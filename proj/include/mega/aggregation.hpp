#pragma once

// Weighted-index and factor-analytic aggregation of several clocks into one
// score expressed in years.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mega/cohort_data.hpp"

namespace mega {

struct ClockPanel {
  std::vector<std::string> clock_names;
  Eigen::MatrixXd readings;  // N x K, years
  Eigen::VectorXd age_years;  // N, or empty when not supplied
  std::vector<std::string> subject_ids;

  ClockPanel() = default;
  // Checks K >= 2, N > K, no missing readings and aligned dimensions.
  ClockPanel(std::vector<std::string> names, Eigen::MatrixXd readings, Eigen::VectorXd age = {},
             std::vector<std::string> ids = {});

  static ClockPanel from_table(const CohortTable& table, std::span<const std::string> clocks,
                               std::string_view age_column = "age_years");

  Eigen::Index n() const { return readings.rows(); }
  Eigen::Index k() const { return readings.cols(); }
  std::size_t index_of(std::string_view clock) const;
  ClockPanel without(std::string_view clock) const;
};

enum class Denominator { Unbiased, MaximumLikelihood };

struct CovarianceEstimate {
  Eigen::MatrixXd matrix;  // years^2
  std::vector<std::string> clock_names;
  Eigen::Index n = 0;
  Denominator denominator = Denominator::Unbiased;
  double min_eigenvalue = 0.0;
  double condition_number = 0.0;  // +inf when not positive definite
  bool positive_definite = false;
};

CovarianceEstimate sample_covariance(const ClockPanel& panel,
                                     Denominator denominator = Denominator::Unbiased);

inline constexpr double kMaxConditionNumber = 1e12;

enum class MegaMethod { Wgt, Fa };
std::string_view to_string(MegaMethod m);

struct MegaWeights {
  MegaMethod method = MegaMethod::Wgt;
  std::vector<std::string> clock_names;
  Eigen::VectorXd raw_weights;         // M^-1 1 (WGT) or M^-1 L (FA)
  Eigen::VectorXd normalized_weights;  // raw / sum(raw)
  std::optional<Eigen::VectorXd> loadings_used;
  std::vector<std::string> excluded_clocks;
  double condition_number = 0.0;
};

MegaWeights weighted_index_weights(const CovarianceEstimate& cov);

// Weighted average of the clocks in their natural units.
Eigen::VectorXd apply_weights(const ClockPanel& panel, const MegaWeights& weights);

Eigen::VectorXd mega_wgt(const ClockPanel& panel, const MegaWeights& weights);

enum class Extraction { PrincipalFactor, PrincipalComponent };
enum class KaiserBasis { Correlation, Reduced };

struct EfaOptions {
  Extraction extraction = Extraction::PrincipalFactor;
  KaiserBasis kaiser = KaiserBasis::Correlation;
  double tolerance = 1e-6;
  int max_iterations = 100;
};

struct FactorSolution {
  std::vector<std::string> clock_names;
  Eigen::VectorXd eigenvalues;          // correlation matrix, descending
  Eigen::VectorXd reduced_eigenvalues;  // SMC-reduced correlation matrix, descending
  int n_retained = 0;
  Eigen::VectorXd loadings;  // first factor, sum > 0
  Eigen::VectorXd communality;
  Eigen::VectorXd uniqueness;
  Extraction extraction = Extraction::PrincipalFactor;
  KaiserBasis kaiser = KaiserBasis::Correlation;
  int iterations = 0;
  bool heywood = false;
};

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& data);

FactorSolution efa(const ClockPanel& panel, const EfaOptions& options = {});
FactorSolution efa_correlation(const Eigen::MatrixXd& correlation,
                               std::vector<std::string> names, const EfaOptions& options = {});

// u = M^-1 L, normalized. Requires exactly one retained factor.
MegaWeights fa_weights(const FactorSolution& solution, const CovarianceEstimate& cov);

Eigen::VectorXd mega_fa(const ClockPanel& panel, const FactorSolution& solution,
                        const CovarianceEstimate& cov);

struct LeaveOneOut {
  std::string excluded;
  Eigen::VectorXd scores;
  MegaWeights weights;
  std::optional<FactorSolution> factors;
};

LeaveOneOut leave_one_out(const ClockPanel& panel, std::string_view exclude, MegaMethod method,
                          const EfaOptions& options = {});

// Factor diagnostics laid out like a loadings/uniqueness table.
std::string factor_table_text(const FactorSolution& solution);
std::string factor_table_csv(const FactorSolution& solution);
std::string weights_csv(std::span<const MegaWeights> weights);

}  // namespace mega
