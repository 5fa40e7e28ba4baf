#pragma once

// MIMIC structural equation models fitted by Gaussian maximum likelihood:
//   indicators  z = nu + lambda * eta + eps
//   latents     eta = Gamma x + omega
//   outcomes    y = alpha + D eta + Theta h + u   (outcome-on-latent config)
// Intercepts are concentrated out, so the likelihood depends on the
// conditional covariance Sigma = L Phi L' + Psi and the reduced-form slopes
// B = L Gamma + C only.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mega/cohort_data.hpp"

namespace mega {

struct MeasurementBlock {
  std::string latent;
  std::vector<std::string> indicators;
  std::string reference;  // loading fixed at 1
};

enum class StructuralConfig { LatentOnCovariates, OutcomeOnLatent };
std::string_view to_string(StructuralConfig c);
StructuralConfig parse_structural_config(std::string_view s);

struct MimicSpec {
  std::vector<MeasurementBlock> blocks;
  std::vector<std::string> covariates;  // regressors of the latents
  std::vector<std::string> outcomes;    // outcome-on-latent only
  std::vector<std::string> controls;    // regressors of the outcomes
  StructuralConfig config = StructuralConfig::LatentOnCovariates;
};

// Plain-text model file:
//   latent EA = horvath hannum phenoage grimage
//   reference EA = grimage            (default: first indicator)
//   covariates = female mother_age
//   outcomes = neet
//   controls = bmi smoker
//   structure = latent-on-covariates | outcome-on-latent
MimicSpec parse_model_spec(std::string_view text);

struct ParameterCounts {
  int loadings = 0;
  int gamma = 0;
  int outcome_loadings = 0;  // D
  int theta = 0;
  int latent_variances = 0;
  int latent_covariances = 0;
  int error_variances = 0;  // indicators and outcomes
  int intercepts = 0;
  int total() const {
    return loadings + gamma + outcome_loadings + theta + latent_variances + latent_covariances +
           error_variances + intercepts;
  }
};

struct SemModel {
  MimicSpec spec;
  // Observed endogenous variables: indicators block by block, then outcomes.
  std::vector<std::string> endogenous;
  // Source columns of the exogenous design (categorical ones expand to dummies).
  std::vector<std::string> exogenous;
  // Exogenous design column names after expansion, fixed at build time.
  std::vector<std::string> exogenous_design;
  std::vector<bool> design_is_covariate;  // regressor of the latents
  std::vector<bool> design_is_control;    // regressor of the outcomes
  ParameterCounts counts;
  int observed_moments = 0;
  int degrees_of_freedom = 0;

  int n_latents() const { return static_cast<int>(spec.blocks.size()); }
  int n_endogenous() const { return static_cast<int>(endogenous.size()); }
  int n_exogenous() const { return static_cast<int>(exogenous_design.size()); }
  int latent_index(std::string_view name) const;
};

// Validates the model against the table and counts degrees of freedom:
// observed moments p(p+1)/2 + p(1+P) minus free parameters.
SemModel build_mimic(const MimicSpec& spec, const CohortTable& table);

// Parameter vector layout (intercepts excluded):
//   free loadings (non-reference indicators, block order), D (outcome x latent),
//   Gamma (latent x covariate design columns), Theta (outcome x control design
//   columns), Phi lower triangle (row-major), Psi diagonal.
struct ParameterInfo {
  std::string name;
  std::string kind;  // loading, gamma, outcome_loading, theta, phi, psi
  std::string lhs;
  std::string rhs;
  bool variance = false;  // bounded below by 0
};

struct MimicMatrices {
  Eigen::MatrixXd loadings;  // p x J (indicator rows then outcome rows)
  Eigen::MatrixXd gamma;     // J x P (zero outside covariate columns)
  Eigen::MatrixXd direct;    // p x P (Theta on outcome rows)
  Eigen::MatrixXd phi;       // J x J
  Eigen::VectorXd psi;       // p
  Eigen::MatrixXd sigma;     // L Phi L' + Psi
  Eigen::MatrixXd slopes;    // B = L Gamma + C
};

struct SufficientStats {
  Eigen::Index n = 0;
  Eigen::VectorXd z_mean;
  Eigen::VectorXd x_mean;
  Eigen::MatrixXd szz;  // centered, divided by n
  Eigen::MatrixXd szx;
  Eigen::MatrixXd sxx;
};

// Complete-case data for a model: rows used, endogenous matrix, exogenous design.
struct ModelData {
  std::vector<std::size_t> rows;
  Eigen::MatrixXd z;
  Eigen::MatrixXd x;
  std::size_t dropped = 0;
};

ModelData model_data(const SemModel& model, const CohortTable& table);
SufficientStats sufficient_stats(const ModelData& data);

class MimicLikelihood {
 public:
  MimicLikelihood(const SemModel& model, SufficientStats stats);

  Eigen::Index n_params() const { return static_cast<Eigen::Index>(info_.size()); }
  const std::vector<ParameterInfo>& info() const { return info_; }
  const SemModel& model() const { return model_; }
  const SufficientStats& stats() const { return stats_; }
  Eigen::VectorXd lower_bounds() const;

  MimicMatrices unpack(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd pack(const MimicMatrices& m) const;

  // Mean log-likelihood (total / n); -inf when Sigma is not positive definite.
  double mean_loglik(const Eigen::VectorXd& theta) const;
  double loglik(const Eigen::VectorXd& theta) const {
    return mean_loglik(theta) * static_cast<double>(stats_.n);
  }
  // Analytic gradient of the mean log-likelihood.
  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const;
  Eigen::VectorXd central_difference_gradient(const Eigen::VectorXd& theta,
                                              double step = 1e-5) const;
  // Central differences of the analytic gradient, symmetrized.
  Eigen::MatrixXd hessian(const Eigen::VectorXd& theta) const;

  // Maps derivatives with respect to Sigma and B to the parameter vector.
  Eigen::VectorXd chain(const MimicMatrices& m, const Eigen::MatrixXd& d_sigma,
                        const Eigen::MatrixXd& d_slopes) const;

 private:
  SemModel model_;
  SufficientStats stats_;
  std::vector<ParameterInfo> info_;
  // Positions of the free loadings in L.
  std::vector<std::pair<int, int>> loading_pos_;
  std::vector<std::pair<int, int>> gamma_pos_;
  std::vector<std::pair<int, int>> theta_pos_;
};

// Largest elementwise |analytic - central difference| / max(1, |central difference|).
double gradient_discrepancy(const MimicLikelihood& lik, const Eigen::VectorXd& theta);

enum class SemSe { ObservedInformation, Sandwich };

struct SemOptions {
  std::uint64_t seed = 1;
  int random_restarts = 3;
  int max_iterations = 2000;
  double step_tolerance = 1e-8;
  double gradient_tolerance = 1e-6;  // on the mean log-likelihood scale
  SemSe se = SemSe::ObservedInformation;
};

struct StartRecord {
  std::string label;  // "efa" or "random-1", ...
  double loglik = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
  bool converged = false;
  std::vector<double> trace;  // log-likelihood after each accepted step
};

struct SemParameter {
  ParameterInfo info;
  double estimate = 0.0;
  double std_error = 0.0;
  bool fixed = false;
  bool boundary = false;
};

struct SemFit {
  SemModel model;
  std::vector<ParameterInfo> info;
  Eigen::VectorXd theta;
  Eigen::VectorXd std_errors;  // NaN for boundary or degenerate parameters
  Eigen::MatrixXd covariance;
  Eigen::VectorXd intercepts;  // per endogenous variable
  Eigen::VectorXd intercept_std_errors;
  MimicMatrices matrices;
  SufficientStats stats;
  Eigen::Index n = 0;
  std::size_t dropped = 0;
  double loglik = 0.0;  // +inf for an exact (singular) fit
  int degrees_of_freedom = 0;

  bool converged = false;
  int iterations = 0;
  double gradient_norm = 0.0;
  double max_step = 0.0;
  double gradient_check = 0.0;
  std::vector<StartRecord> starts;
  int best_start = 0;
  bool exact_fit = false;
  std::vector<std::string> boundary;  // parameters pinned at 0
  std::vector<std::string> warnings;
  SemSe se_type = SemSe::ObservedInformation;

  Eigen::Index index_of(std::string_view name) const;
  double estimate(std::string_view name) const { return theta(index_of(name)); }
  double se(std::string_view name) const { return std_errors(index_of(name)); }
  // Loading of an indicator, 1 for a reference.
  double loading(std::string_view indicator) const;
  std::vector<SemParameter> parameters() const;
};

SemFit fit_sem(const SemModel& model, const CohortTable& data, const SemOptions& options = {});

enum class ScoreMode { LinearPrediction, RegressionScore };
ScoreMode parse_score_mode(std::string_view s);

// Scores for every table row (missing where a model column is missing), in
// the units of the latent's reference indicator.
Eigen::VectorXd latent_scores(const SemFit& fit, const CohortTable& data, ScoreMode mode,
                              std::string_view latent = {});

// Reparameterizes so that `indicator` becomes the reference of its latent.
SemFit rescale_reference(const SemFit& fit, std::string_view indicator);

std::string sem_parameters_csv(const SemFit& fit);
std::string sem_convergence_log(const SemFit& fit);
std::string sem_summary_text(const SemFit& fit);

}  // namespace mega
