// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: acceptance --cli <path to mega> --work <scratch directory>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mega/aggregation.hpp"
#include "mega/inference.hpp"
#include "mega/io.hpp"
#include "mega/rdd.hpp"
#include "mega/sem.hpp"
#include "mega/simulator.hpp"
#include "properties.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace mega;
using namespace mega::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Runs body(i) for i in [0, n) on all cores; results stay in index order.
template <class T>
std::vector<T> parallel_map(int n, const std::function<T(int)>& body) {
  std::vector<T> out(static_cast<std::size_t>(n));
  const int workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) out[static_cast<std::size_t>(i)] = body(i);
    });
  for (auto& t : pool) t.join();
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sd(const std::vector<double>& v) {
  double m = mean(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double rmse(const std::vector<double>& v, double truth) {
  double s = 0;
  for (double x : v) s += (x - truth) * (x - truth);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double mean_abs_error(const std::vector<double>& v, double truth) {
  double s = 0;
  for (double x : v) s += std::abs(x - truth);
  return s / static_cast<double>(v.size());
}

std::vector<std::string> names_for(Eigen::Index p) {
  std::vector<std::string> n{"_cons"};
  for (Eigen::Index j = 1; j < p; ++j) n.push_back("x" + std::to_string(j));
  return n;
}

const std::vector<std::string> kClocks{"horvath", "hannum", "phenoage", "grimage"};

// 1. OLS of the weighted index equals the common-coefficient stacked GLS.
Outcome gls_identity() {
  auto t0 = Clock::now();
  Gen g(20240101);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Eigen::Index n = g.integer(30, 200), k = g.integer(2, 4), p = g.integer(1, 5);
    Eigen::MatrixXd x(n, p + 1);
    x.col(0).setOnes();
    x.rightCols(p) = g.normal_matrix(n, p);
    Eigen::MatrixXd c = g.clock_readings(n, k);
    auto gls = constrained_sur_gls(c, x, names_for(p + 1));
    auto panel = make_panel(c);
    Eigen::VectorXd wgt = mega_wgt(panel, weighted_index_weights(sample_covariance(panel)));
    auto o = ols(x, wgt, names_for(p + 1));
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      worst = std::max(worst, std::abs(o.coefficients(j) - gls.coefficients(j)) /
                                  std::max(std::abs(gls.coefficients(j)), 1e-12));
  }
  double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 10.0,
          "100 instances, max relative gap " + fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

// 2. Principal-factor recovery of a known single factor.
Outcome efa_recovery() {
  const std::vector<double> loadings{0.40, 0.66, 0.65, 0.62};
  auto ok = parallel_map<int>(200, [&](int i) {
    auto t = simulate_standardized_factor(loadings, 5000, 5000 + static_cast<std::uint64_t>(i));
    auto panel = ClockPanel::from_table(t, clock_names(4), "");
    try {
      auto f = efa(panel);
      bool pass = f.n_retained == 1 && f.reduced_eigenvalues(1) < 0.5;
      for (int k = 0; k < 4; ++k) pass = pass && std::abs(f.loadings(k) - loadings[static_cast<std::size_t>(k)]) < 0.05;
      return pass ? 1 : 0;
    } catch (const std::exception&) {
      return 0;
    }
  });
  int passed = 0;
  for (int v : ok) passed += v;
  return {passed >= 190, std::to_string(passed) + "/200 seeds recover loadings, one factor, second eigenvalue < 0.5"};
}

// 3. MIMIC recovery, interval coverage and gradient agreement.
CohortTable mimic_sample(std::uint64_t seed, Eigen::Index n) {
  const double lambda[4] = {1.0, 0.8, 1.2, 0.9};
  Gen g(seed);
  Eigen::MatrixXd data(n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    double x1 = g.normal(), x2 = g.normal();
    double eta = 0.5 * x1 - 0.3 * x2 + g.normal();
    for (int k = 0; k < 4; ++k) data(i, k) = lambda[k] * eta + g.normal();
    data(i, 4) = x1;
    data(i, 5) = x2;
  }
  return table_from({"y1", "y2", "y3", "y4", "x1", "x2"}, data);
}

Outcome sem_recovery() {
  auto t0 = Clock::now();
  const std::map<std::string, double> truth{
      {"lambda:y2", 0.8}, {"lambda:y3", 1.2}, {"lambda:y4", 0.9}, {"gamma:ea:x1", 0.5}, {"gamma:ea:x2", -0.3},
      {"phi:ea", 1.0},    {"psi:y1", 1.0},    {"psi:y2", 1.0},    {"psi:y3", 1.0},      {"psi:y4", 1.0}};
  MimicSpec spec;
  spec.blocks.push_back({"ea", {"y1", "y2", "y3", "y4"}, "y1"});
  spec.covariates = {"x1", "x2"};
  struct Rep {
    int covered = 0;
    int within3 = 0;
    int params = 0;
    double grad = 0.0;
    bool ok = false;
  };
  auto reps = parallel_map<Rep>(200, [&](int i) {
    Rep r;
    try {
      auto table = mimic_sample(30000 + static_cast<std::uint64_t>(i), 20000);
      SemOptions o;
      o.seed = 7 + static_cast<std::uint64_t>(i);
      auto fit = fit_sem(build_mimic(spec, table), table, o);
      r.ok = fit.converged;
      r.grad = fit.gradient_check;
      for (const auto& [name, value] : truth) {
        double est = fit.estimate(name), se = fit.se(name);
        double z = std::abs(est - value) / se;
        ++r.params;
        if (std::isfinite(z) && z <= 1.959963984540054) ++r.covered;
        if (std::isfinite(z) && z <= 3.0) ++r.within3;
      }
    } catch (const std::exception&) {
      r.ok = false;
    }
    return r;
  });
  int covered = 0, total = 0, failed = 0;
  double worst_grad = 0.0;
  for (const auto& r : reps) {
    covered += r.covered;
    total += r.params;
    if (!r.ok) ++failed;
    worst_grad = std::max(worst_grad, r.grad);
  }
  double coverage = total > 0 ? static_cast<double>(covered) / total : 0.0;
  double secs = seconds_since(t0);
  bool first = reps[0].ok && reps[0].within3 == reps[0].params && reps[0].params == 10;
  bool pass = first && failed == 0 && coverage >= 0.92 && coverage <= 0.98 && worst_grad < 1e-5 && secs < 300;
  return {pass, std::string("first seed ") + (first ? "all" : "not all") + " parameters within 3 SE, coverage " +
                    fmt("%.3f", coverage) + " over 200 seeds, max gradient gap " + fmt("%.1e", worst_grad) +
                    ", " + std::to_string(failed) + " failed fits, " + fmt("%.0f", secs) + " s"};
}

// 4 and 5 share one abuse Monte Carlo.
struct AbuseRep {
  std::vector<double> clock_est, clock_se;
  double oracle = 0.0;
  std::map<std::string, double> mega_est, mega_se;
  bool ok = true;
};

std::vector<AbuseRep> abuse_monte_carlo() {
  const std::vector<std::string> regressors{"abuse_0_10", "abuse_11_18", "age_years", "female"};
  return parallel_map<AbuseRep>(500, [&](int i) {
    AbuseRep r;
    SimConfig c;
    c.kind = SimKind::Abuse;
    c.n = 448;
    c.effect_early = 0.5;
    c.seed = 60000 + static_cast<std::uint64_t>(i);
    auto t = simulate(c);
    auto reg = [&](const std::string& outcome) {
      LinearModelSpec s;
      s.outcome = outcome;
      s.regressors = regressors;
      s.se_type = SeType::HC1;
      auto f = ols_fit(s, t);
      return std::pair{f.coef("abuse_0_10"), f.se("abuse_0_10")};
    };
    for (const auto& k : kClocks) {
      auto [b, se] = reg(k);
      r.clock_est.push_back(b);
      r.clock_se.push_back(se);
    }
    r.oracle = reg("ea_true").first;
    try {
      auto panel = ClockPanel::from_table(t, kClocks);
      auto cov = sample_covariance(panel);
      auto add = [&](const std::string& name, const Eigen::VectorXd& v) {
        t.add_column(Column{name, ColumnType::Continuous, std::vector<double>(v.data(), v.data() + v.size()), {}, false});
        auto [b, se] = reg(name);
        r.mega_est[name] = b;
        r.mega_se[name] = se;
      };
      add("mega_wgt", mega_wgt(panel, weighted_index_weights(cov)));
      auto f = efa(panel);
      if (f.n_retained != 1) r.ok = false;
      add("mega_fa", mega_fa(panel, f, cov));
      MimicSpec spec;
      spec.blocks.push_back({"ea", kClocks, "horvath"});
      spec.covariates = regressors;
      SemOptions o;
      o.seed = 90000 + static_cast<std::uint64_t>(i);
      auto fit = fit_sem(build_mimic(spec, t), t, o);
      if (!fit.converged) r.ok = false;
      r.mega_est["mega_sem"] = fit.estimate("gamma:ea:abuse_0_10");
      r.mega_se["mega_sem"] = fit.se("gamma:ea:abuse_0_10");
    } catch (const std::exception&) {
      r.ok = false;
    }
    return r;
  });
}

const std::vector<std::string> kMega{"mega_wgt", "mega_fa", "mega_sem"};

Outcome efficiency(const std::vector<AbuseRep>& reps) {
  std::map<std::string, int> smaller;
  std::map<std::string, std::vector<double>> est;
  std::vector<std::vector<double>> clock_est(4);
  for (const auto& r : reps) {
    double mean_se = mean(r.clock_se);
    for (int k = 0; k < 4; ++k) clock_est[static_cast<std::size_t>(k)].push_back(r.clock_est[static_cast<std::size_t>(k)]);
    for (const auto& m : kMega) {
      if (!r.ok) continue;
      if (r.mega_se.at(m) < mean_se) ++smaller[m];
      est[m].push_back(r.mega_est.at(m));
    }
  }
  double best_clock = 1e300;
  for (const auto& v : clock_est) best_clock = std::min(best_clock, rmse(v, 0.5));
  bool pass = true;
  std::string detail;
  for (const auto& m : kMega) {
    double share = smaller[m] / 500.0;
    double r = est[m].empty() ? 1e300 : rmse(est[m], 0.5);
    pass = pass && share >= 0.90 && r < best_clock;
    detail += m + " smaller SE " + fmt("%.3f", share) + " RMSE " + fmt("%.3f", r) + "; ";
  }
  return {pass, detail + "best single-clock RMSE " + fmt("%.3f", best_clock)};
}

Outcome attenuation(const std::vector<AbuseRep>& reps) {
  std::vector<double> oracle;
  std::vector<std::vector<double>> clock_est(4);
  std::map<std::string, std::vector<double>> est;
  for (const auto& r : reps) {
    oracle.push_back(r.oracle);
    for (int k = 0; k < 4; ++k) clock_est[static_cast<std::size_t>(k)].push_back(r.clock_est[static_cast<std::size_t>(k)]);
    if (r.ok)
      for (const auto& m : kMega) est[m].push_back(r.mega_est.at(m));
  }
  const double oracle_mean = mean(oracle);
  bool pass = true;
  double worst_bias = 0.0, worst_mae = 0.0;
  for (const auto& v : clock_est) {
    pass = pass && mean(v) < oracle_mean;
    worst_bias = std::max(worst_bias, std::abs(mean(v) - 0.5));
    worst_mae = std::max(worst_mae, mean_abs_error(v, 0.5));
  }
  const double oracle_bias = std::abs(oracle_mean - 0.5), oracle_mae = mean_abs_error(oracle, 0.5);
  std::string detail = "oracle mean " + fmt("%.3f", oracle_mean) + ", clock means";
  for (const auto& v : clock_est) detail += " " + fmt("%.3f", mean(v));
  detail += "; bias oracle " + fmt("%.3f", oracle_bias) + " worst clock " + fmt("%.3f", worst_bias);
  for (const auto& m : kMega) {
    double b = std::abs(mean(est[m]) - 0.5), e = mean_abs_error(est[m], 0.5);
    pass = pass && b > oracle_bias && b < worst_bias && e > oracle_mae && e < worst_mae;
    detail += " " + m + " " + fmt("%.3f", b);
  }
  return {pass, detail};
}

// 6. Sharp design calibration.
SimConfig rdd_config(std::uint64_t seed, double tau) {
  SimConfig c;
  c.kind = SimKind::Rdd;
  c.seed = seed;
  c.n = 900;
  c.tau = tau;
  c.age_mean = 7.45;
  c.age_sd = 0.15;
  return c;
}

Outcome rdd_calibration() {
  struct Rep {
    double est = 0.0, se4 = 0.0, se2 = 0.0;
  };
  auto reps = parallel_map<Rep>(500, [](int i) {
    Rep r;
    RddSpec s;
    s.outcome = "outcome";
    auto t = simulate_rdd_cohort(rdd_config(70000 + static_cast<std::uint64_t>(i), 0.5));
    auto f4 = rdd_fit(s, t);
    r.est = f4.treat();
    r.se4 = f4.treat_se();
    s.bandwidth = 2;
    r.se2 = rdd_fit(s, t).treat_se();
    return r;
  });
  // The size band is +-1.5 points; 5000 null draws put it about 5 Monte Carlo
  // SEs from nominal, where 500 would leave it at 1.5.
  const int null_reps = 5000;
  auto null_reject = parallel_map<int>(null_reps, [](int i) {
    RddSpec s;
    s.outcome = "outcome";
    return rdd_fit(s, simulate_rdd_cohort(rdd_config(80000 + static_cast<std::uint64_t>(i), 0.0))).treat_p() < 0.05
               ? 1
               : 0;
  });
  std::vector<double> est, se4, se2;
  for (const auto& r : reps) {
    est.push_back(r.est);
    se4.push_back(r.se4);
    se2.push_back(r.se2);
  }
  int rejected = 0, rejected_500 = 0;
  for (int i = 0; i < null_reps; ++i) {
    rejected += null_reject[static_cast<std::size_t>(i)];
    if (i < 500) rejected_500 += null_reject[static_cast<std::size_t>(i)];
  }
  double mc_se = sd(est) / std::sqrt(500.0);
  double bias = mean(est) - 0.5, rate = static_cast<double>(rejected) / null_reps, ratio = mean(se2) / mean(se4);
  bool pass = std::abs(bias) < 2 * mc_se && rate >= 0.035 && rate <= 0.065 && ratio >= 1.6 && ratio <= 2.4;
  return {pass, "bias " + fmt("%.4f", bias) + " (MC SE " + fmt("%.4f", mc_se) + ") over 500 seeds, null rejection " +
                    fmt("%.4f", rate) + " over 5000 (first 500: " + fmt("%.3f", rejected_500 / 500.0) +
                    "), SE ratio 2/4 months " + fmt("%.2f", ratio)};
}

// 7. A jump confined to one class.
Outcome rdd_heterogeneity_detection() {
  struct Rep {
    bool manual = false, other = false;
  };
  auto reps = parallel_map<Rep>(500, [](int i) {
    auto c = rdd_config(90000 + static_cast<std::uint64_t>(i), 0.0);
    c.class_jumps = {{"manual", 1.2}};
    auto t = simulate_rdd_cohort(c);
    RddSpec s;
    s.outcome = "outcome";
    auto f = rdd_heterogeneity(s, t, "father_class");
    Rep r;
    for (const auto& k : f.classes) {
      if (k.level == "manual") r.manual = k.p_value < 0.10;
      else r.other = k.p_value < 0.10;
    }
    return r;
  });
  int manual = 0, other = 0;
  for (const auto& r : reps) {
    manual += r.manual;
    other += r.other;
  }
  double power = manual / 500.0, size = other / 500.0;
  return {power >= 0.80 && size >= 0.06 && size <= 0.14,
          "manual detected " + fmt("%.3f", power) + ", non_manual rejection " + fmt("%.3f", size) + " at 10%"};
}

// 8. Randomized invariants.
Outcome invariants() {
  auto results = parallel_map<PropertyResult>(5, [](int i) {
    switch (i) {
      case 0: return affine_equivariance_wgt(1000, 801);
      case 1: return affine_equivariance_fa(1000, 805);
      case 2: return reference_invariance(1000, 802);
      case 3: return residual_orthogonality(1000, 803);
      default: return hc1_equality(1000, 804);
    }
  });
  bool pass = true;
  std::string detail;
  for (const auto& r : results) {
    pass = pass && r.pass() && r.cases >= 1000;
    detail += r.name + " " + std::to_string(r.cases - r.failures) + "/" + std::to_string(r.cases) + " (worst " +
              fmt("%.1e", r.worst) + " vs " + fmt("%.0e", r.tolerance) +
              (r.skipped ? ", " + std::to_string(r.skipped) + " non-converged draws replaced" : "") + "); ";
  }
  return {pass, detail};
}

// 9. Same seed, same bytes.
class Cli {
 public:
  Cli(fs::path exe, fs::path work) : exe_(std::move(exe)), work_(std::move(work)) {}

  bool run(const std::string& name, const std::string& args) {
    fs::path out = work_ / name;
    fs::remove_all(out);
    std::string cmd = "'" + exe_.string() + "' --out-dir '" + out.string() + "' " + args + " 2>'" +
                      (work_ / "stderr.txt").string() + "'";
    return std::system(cmd.c_str()) == 0;
  }

  std::map<std::string, std::string> snapshot(const std::string& name) const {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(work_ / name)) {
      std::string text = read_file(e.path());
      if (e.path().filename() == "manifest.txt") {
        std::istringstream in(text);
        std::string line, kept;
        while (std::getline(in, line))
          if (line.rfind("started=", 0) != 0 && line.rfind("finished=", 0) != 0) kept += line + "\n";
        text = kept;
      }
      out[e.path().filename().string()] = text;
    }
    return out;
  }

  fs::path path(const std::string& name) const { return work_ / name; }

 private:
  fs::path exe_, work_;
};

Outcome determinism(const fs::path& exe, const fs::path& work) {
  fs::create_directories(work);
  Cli cli(exe, work);
  std::ofstream(work / "mc.cfg") << "kind=clock-panel\nn=800\n";
  std::ofstream(work / "rdd.cfg") << "age_mean=7.45\nage_sd=0.15\nclass_jumps=manual:1.0\n";
  std::vector<std::pair<std::string, std::string>> jobs;
  for (const char* kind : {"clock-panel", "abuse", "rdd"}) {
    std::string cfg = std::string(kind) == "rdd" ? " --config '" + (work / "rdd.cfg").string() + "'" : "";
    jobs.push_back({std::string("sim_") + kind, "--seed 17" + cfg + " simulate --kind " + kind + " --n 900"});
  }
  const std::string abuse = " --input '" + (work / "sim_abuse_a" / "cohort.csv").string() + "'";
  const std::string rdd = " --input '" + (work / "sim_rdd_a" / "cohort.csv").string() + "'";
  const std::string clocks = " --clocks horvath,hannum,phenoage,grimage";
  std::vector<std::pair<std::string, std::string>> analyses{
      {"aggregate", abuse + " aggregate" + clocks},
      {"efa", abuse + " efa" + clocks},
      {"sem", abuse + " --seed 23 sem" + clocks + " --covariates abuse_0_10,abuse_11_18,age_years --restarts 3"
                                                  " --references horvath,hannum,phenoage,grimage"},
      {"sem_mc", " --seed 29 sem --mc 20 --sim-config '" + (work / "mc.cfg").string() + "'"},
      {"regress", abuse + " regress --outcomes horvath,grimage --regressors abuse_0_10,abuse_11_18 --se hc1"},
      {"rdd", rdd + " rdd --outcomes outcome --by father_class --placebo placebo_birth"},
  };
  int compared = 0;
  std::vector<std::string> broken;
  auto twice = [&](const std::string& name, const std::string& args) {
    bool ok = cli.run(name + "_a", args) && cli.run(name + "_b", "--jobs 4 " + args);
    if (!ok || cli.snapshot(name + "_a") != cli.snapshot(name + "_b")) broken.push_back(name);
    else ++compared;
  };
  for (const auto& [name, args] : jobs) twice(name, args);
  for (const auto& [name, args] : analyses) twice(name, args);

  // In-process generators agree cell for cell as well.
  for (SimKind kind : {SimKind::ClockPanel, SimKind::Abuse, SimKind::Rdd}) {
    SimConfig c;
    c.kind = kind;
    c.seed = 31;
    auto a = simulate(c), b = simulate(c);
    bool same = a.rows() == b.rows() && a.columns().size() == b.columns().size();
    for (std::size_t j = 0; same && j < a.columns().size(); ++j) {
      const auto &x = a.columns()[j].values, &y = b.columns()[j].values;
      same = std::equal(x.begin(), x.end(), y.begin(), y.end(),
                        [](double u, double v) { return u == v || (std::isnan(u) && std::isnan(v)); });
    }
    if (same) ++compared;
    else broken.push_back("simulate(" + std::string(to_string(kind)) + ")");
  }
  std::string detail = std::to_string(compared) + " pipelines byte-identical on rerun";
  if (!broken.empty()) {
    detail += "; differing:";
    for (const auto& b : broken) detail += " " + b;
  }
  return {broken.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path cli, work = fs::temp_directory_path() / "mega_acceptance";
  for (int i = 1; i + 1 < argc; i += 2) {
    std::string a = argv[i];
    if (a == "--cli") cli = argv[i + 1];
    else if (a == "--work") work = argv[i + 1];
  }
  if (cli.empty()) {
    std::cerr << "usage: acceptance --cli <mega executable> [--work <dir>]\n";
    return 2;
  }

  int failures = 0;
  auto report = [&](int id, const std::string& title, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << o.detail
              << std::endl;
  };

  report(1, "GLS identity", gls_identity);
  report(2, "EFA recovery", efa_recovery);
  report(3, "SEM recovery and coverage", sem_recovery);
  std::vector<AbuseRep> abuse;
  try {
    abuse = abuse_monte_carlo();
  } catch (const std::exception& e) {
    std::cerr << "abuse Monte Carlo failed: " << e.what() << "\n";
  }
  report(4, "efficiency", [&] { return abuse.size() == 500 ? efficiency(abuse) : Outcome{false, "no replications"}; });
  report(5, "attenuation", [&] { return abuse.size() == 500 ? attenuation(abuse) : Outcome{false, "no replications"}; });
  report(6, "RDD calibration", rdd_calibration);
  report(7, "class heterogeneity", rdd_heterogeneity_detection);
  report(8, "exact invariants", invariants);
  report(9, "determinism", [&] { return determinism(cli, work); });
  return failures == 0 ? 0 : 1;
}
