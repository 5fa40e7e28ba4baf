#pragma once

// Seeded synthetic cohorts with known truth: clock panels driven by one
// latent epigenetic age, abuse cohorts with noisy rater reports, and school
// entry designs with a jump at the cutoff month.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mega/cohort_data.hpp"

namespace mega {

enum class SimKind { ClockPanel, Abuse, Rdd };
std::string_view to_string(SimKind k);

struct SimConfig {
  SimKind kind = SimKind::ClockPanel;
  std::optional<std::uint64_t> seed;  // required before generating
  std::size_t n = 448;

  // Clocks: C_k = a_k + lambda_k EA* + e_k, EA* = age_slope * age + X'gamma + effects + omega.
  std::vector<std::string> clocks{"horvath", "hannum", "phenoage", "grimage"};
  std::vector<double> loadings{0.9, 0.7, 0.85, 0.8};
  std::vector<double> intercepts{0.0, 0.0, 0.0, 0.0};
  std::vector<double> error_sd{2.0, 2.0, 3.0, 2.5};
  double age_mean = 17.2;
  double age_sd = 0.5;
  double age_slope = 1.0;
  double omega_sd = 1.5;
  // Standard normal covariates with their effects on EA* (clock panel only).
  std::vector<std::string> covariates;
  std::vector<double> covariate_effects;

  // Abuse cohort.
  double p_cruelty_early = 0.15;
  double p_sex_early = 0.05;
  double persistence = 0.47;  // P(abuse 11-18 | abuse 0-10), per kind
  double p_cruelty_late_new = 0.05;
  double p_sex_late_new = 0.03;
  double miss_mother = 0.0;
  double miss_partner = 0.0;
  double miss_child = 0.0;
  double effect_early = 0.5;
  double effect_late = 0.0;
  bool mediators = false;
  double mediator_shift = 0.5;   // abuse 0-10 -> each cell-count proxy (SD units)
  double mediator_effect = 0.2;  // each proxy -> EA*
  double outcome_slope = 0.02;   // NEET probability per year of EA* deviation

  // School-entry design.
  int cutoff_month = 9;
  std::vector<double> month_weights = std::vector<double>(12, 1.0);
  double tau = 0.5;
  double rdd_slope = 0.0;
  double rdd_interaction = 0.0;
  double outcome_sd = 1.0;
  std::vector<std::string> class_levels{"non_manual", "manual"};
  std::vector<double> class_probs{0.6, 0.4};
  std::map<std::string, double> class_jumps;  // extra jump per class level
  bool rdd_clocks = false;

  // Throws InputError naming the first violated constraint.
  void validate() const;
};

// key=value settings; lists are comma separated, class_jumps as level:value.
SimConfig parse_sim_config(const std::map<std::string, std::string>& kv);
std::string sim_config_text(const SimConfig& config);

// One generator per named column: adding a column leaves the others' draws unchanged.
class RandomStreams {
 public:
  explicit RandomStreams(std::uint64_t seed) : seed_(seed) {}
  std::mt19937_64 stream(std::string_view name) const;

 private:
  std::uint64_t seed_;
};

CohortTable simulate_clock_panel(const SimConfig& config);
CohortTable simulate_abuse_cohort(const SimConfig& config);
CohortTable simulate_rdd_cohort(const SimConfig& config);
CohortTable simulate(const SimConfig& config);

// Single-factor panel with standardized clocks: clock k = l_k F + sqrt(1 - l_k^2) e_k.
CohortTable simulate_standardized_factor(std::span<const double> loadings, std::size_t n,
                                         std::uint64_t seed);

struct MomentCheck {
  std::string column;
  std::string moment;  // "mean" or "sd"
  double expected = 0.0;
  double observed = 0.0;
  double tolerance = 0.0;
  bool pass = true;
};

// Compares generated means and SDs with their population values (4 standard
// errors) for every column whose distribution follows from the config.
std::vector<MomentCheck> moment_self_test(const CohortTable& table, const SimConfig& config);

}  // namespace mega
