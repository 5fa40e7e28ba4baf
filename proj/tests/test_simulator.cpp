#include <doctest.h>

#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"
#include "mega/simulator.hpp"
#include "support.hpp"

using namespace mega;
using namespace mega::testing;

namespace {

double mean_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double share(const CohortTable& t, const std::string& col) {
  double n = 0, k = 0;
  for (double v : t.values(col))
    if (!is_missing(v)) { ++n; k += v; }
  return k / n;
}

}  // namespace

TEST_CASE("seed is mandatory and configs validate") {
  SimConfig c;
  CHECK_THROWS_AS(simulate(c), InputError);
  c.seed = 1;
  c.error_sd = {1, -1, 1, 1};
  CHECK_THROWS_AS(simulate(c), InputError);
  CHECK_THROWS_AS(parse_sim_config({{"bogus", "1"}}), InputError);
  auto bad = parse_sim_config({{"persistence", "1.5"}, {"kind", "abuse"}});
  bad.seed = 1;
  CHECK_THROWS_AS(simulate(bad), InputError);
}

TEST_CASE("configs round-trip through text") {
  auto c = parse_sim_config({{"kind", "rdd"}, {"n", "700"}, {"class_jumps", "manual:1.5"}, {"tau", "0.3"}});
  std::istringstream in(sim_config_text(c));
  auto kv = parse_key_values(in);
  kv.erase("seed");
  auto back = parse_sim_config(kv);
  CHECK(sim_config_text(back) == sim_config_text(c));
  CHECK(back.class_jumps.at("manual") == 1.5);
}

TEST_CASE("same seed gives identical tables; a new seed differs") {
  for (auto kind : {SimKind::ClockPanel, SimKind::Abuse, SimKind::Rdd}) {
    SimConfig c;
    c.kind = kind;
    c.seed = 99;
    auto a = table_to_csv(simulate(c), true);
    CHECK(a == table_to_csv(simulate(c), true));
    c.seed = 100;
    CHECK(a != table_to_csv(simulate(c), true));
  }
}

TEST_CASE("named substreams keep existing columns fixed") {
  SimConfig c;
  c.seed = 5;
  auto a = simulate_clock_panel(c);
  c.covariates = {"ses"};
  c.covariate_effects = {0.0};
  auto b = simulate_clock_panel(c);
  CHECK(std::vector<double>(a.values("age_years").begin(), a.values("age_years").end()) ==
        std::vector<double>(b.values("age_years").begin(), b.values("age_years").end()));
}

TEST_CASE("zero clock noise makes clocks affine in the latent") {
  SimConfig c;
  c.seed = 6;
  c.error_sd = {0, 0, 0, 0};
  c.intercepts = {1, 2, 3, 4};
  auto t = simulate_clock_panel(c);
  auto ea = t.values("ea_true");
  for (std::size_t k = 0; k < c.clocks.size(); ++k) {
    auto v = t.values(c.clocks[k]);
    for (std::size_t i = 0; i < t.rows(); ++i)
      CHECK(v[i] == doctest::Approx(c.intercepts[k] + c.loadings[k] * ea[i]).epsilon(1e-12));
  }
}

TEST_CASE("truth columns are flagged") {
  SimConfig c;
  c.seed = 7;
  c.kind = SimKind::Abuse;
  auto t = simulate(c);
  CHECK(t.column("omega_true").truth);
  CHECK(table_to_csv(t).find("omega_true") == std::string::npos);
  CHECK(truth_to_csv(t).find("omega_true") != std::string::npos);
}

TEST_CASE("moment self-test passes on every generator") {
  for (auto kind : {SimKind::ClockPanel, SimKind::Abuse, SimKind::Rdd}) {
    SimConfig c;
    c.kind = kind;
    c.seed = 8;
    c.n = 3000;
    auto checks = moment_self_test(simulate(c), c);
    CHECK(!checks.empty());
    int failed = 0;
    for (const auto& m : checks) failed += m.pass ? 0 : 1;
    // 4-SE bands: a single failure among dozens of checks is already rare.
    CHECK(failed <= 1);
  }
}

TEST_CASE("full persistence duplicates the period indicators") {
  SimConfig c;
  c.kind = SimKind::Abuse;
  c.seed = 9;
  c.persistence = 1.0;
  c.p_cruelty_late_new = 0.0;
  c.p_sex_late_new = 0.0;
  auto t = simulate(c);
  auto a = t.values("cruelty_true_0_10");
  auto b = t.values("cruelty_true_11_18");
  CHECK(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_CASE("without missed reports the combined indicator equals the truth") {
  SimConfig c;
  c.kind = SimKind::Abuse;
  c.seed = 10;
  auto t = simulate(c);
  auto obs = t.values("abuse_0_10");
  auto truth = t.values("abuse_true_0_10");
  CHECK(std::equal(obs.begin(), obs.end(), truth.begin()));
}

TEST_CASE("missed reports: the combined prevalence exceeds each rater's") {
  SimConfig c;
  c.kind = SimKind::Abuse;
  c.seed = 11;
  c.n = 5000;
  c.miss_child = 0.5;
  c.miss_mother = 0.7;
  c.miss_partner = 0.7;
  auto t = simulate(c);
  double combined = share(t, "abuse_0_10");
  for (const char* col : {"cruelty_m_0_10", "cruelty_p_0_10", "cruelty_c_0_10"}) CHECK(combined > share(t, col));
}

TEST_CASE("discontinuity at the cutoff") {
  auto big = [](double tau) {
    SimConfig c;
    c.kind = SimKind::Rdd;
    c.seed = 12;
    c.n = 100000;
    c.tau = tau;
    c.class_jumps.clear();
    return simulate(c);
  };
  // No running slope in these designs, so the side means differ by the jump.
  auto gap = [](const CohortTable& t) {
    double s1 = 0, s0 = 0, n1 = 0, n0 = 0;
    auto mob = t.values("mob");
    auto y = t.values("outcome");
    for (std::size_t i = 0; i < t.rows(); ++i) {
      if (mob[i] >= 0) { s1 += y[i]; ++n1; }
      else { s0 += y[i]; ++n0; }
    }
    return std::pair{s1 / n1 - s0 / n0, std::sqrt(1.0 / n1 + 1.0 / n0)};
  };
  auto [d0, se0] = gap(big(0.0));
  CHECK(std::abs(d0) < 3.0 * se0);
  auto [d5, se5] = gap(big(0.5));
  CHECK(std::abs(d5 - 0.5) < 0.02);
  CHECK(std::abs(d5 - 0.5) < 4.0 * se5);
}

TEST_CASE("standardized factor panel") {
  std::vector<double> l{0.4, 0.66, 0.65, 0.62};
  auto t = simulate_standardized_factor(l, 20000, 13);
  CHECK(t.column("factor_true").truth);
  CHECK(std::abs(mean_of(t.values("clock1"))) < 0.05);
}
