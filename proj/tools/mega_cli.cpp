// Command-line front end: mega <subcommand> [options].
//
// Exit status: 0 success, 2 input error, 3 numerical failure, 4 internal error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "mega/aggregation.hpp"
#include "mega/cohort_data.hpp"
#include "mega/error.hpp"
#include "mega/inference.hpp"
#include "mega/io.hpp"
#include "mega/rdd.hpp"
#include "mega/sem.hpp"
#include "mega/simulator.hpp"
#include "mega/version.hpp"

namespace fs = std::filesystem;
using namespace mega;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitInternal = 4;

struct Globals {
  std::string input;
  std::string config;
  std::string schema;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  int jobs = 1;
  CLI::Option* seed_opt = nullptr;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    auto e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads; results are written by
// index so the outcome does not depend on scheduling.
void parallel_for(int jobs, std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Per-invocation state: resolved settings, inputs and the outputs to commit.
class Run {
 public:
  Run(std::string subcommand, const Globals& g) : sub_(std::move(subcommand)), g_(g) {
    started_ = utc_now();
    if (!g_.config.empty()) {
      cfg_ = read_key_values(g_.config);
      inputs_.emplace_back(g_.config, hex(fnv1a(read_file(g_.config))));
    }
  }

  const Globals& globals() const { return g_; }
  const std::map<std::string, std::string>& config() const { return cfg_; }

  // Flag value when given, else the config file entry, else the default.
  std::string get(const CLI::Option* opt, const std::string& value, const std::string& key,
                  const std::string& fallback = {}) {
    std::string v = fallback;
    if (opt && opt->count() > 0)
      v = value;
    else if (auto it = cfg_.find(key); it != cfg_.end())
      v = it->second;
    settings_[key] = v;
    return v;
  }

  std::vector<std::string> list(const CLI::Option* opt, const std::string& value,
                                const std::string& key, const std::string& fallback = {}) {
    return split_list(get(opt, value, key, fallback));
  }

  bool flag(const CLI::Option* opt, const std::string& key) {
    std::string v = get(opt, opt && opt->count() ? "1" : "", key, "0");
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no" || v.empty()) return false;
    throw InputError("setting '" + key + "' must be a boolean");
  }

  int integer(const CLI::Option* opt, const std::string& value, const std::string& key, int fallback) {
    std::string v = get(opt, value, key, std::to_string(fallback));
    try {
      std::size_t pos = 0;
      int r = std::stoi(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return r;
    } catch (const std::exception&) {
      throw InputError("setting '" + key + "' must be an integer, got '" + v + "'");
    }
  }

  std::uint64_t seed() {
    if (!g_.seed_opt || g_.seed_opt->count() == 0)
      throw InputError("--seed is required for " + sub_);
    settings_["seed"] = std::to_string(g_.seed);
    return g_.seed;
  }

  CohortTable load() {
    if (g_.input.empty()) throw InputError("--input is required for " + sub_);
    Schema schema = infer_schema(g_.input);
    if (!g_.schema.empty()) {
      auto types = read_key_values(g_.schema);
      inputs_.emplace_back(g_.schema, hex(fnv1a(read_file(g_.schema))));
      for (const auto& [name, type] : types) {
        auto it = std::find_if(schema.begin(), schema.end(), [&](const ColumnSpec& c) { return c.name == name; });
        if (it == schema.end()) throw InputError("schema names unknown column '" + name + "'");
        it->type = parse_column_type(type);
      }
    }
    LoadedCohort loaded = load_cohort(g_.input, schema);
    inputs_.emplace_back(g_.input, hex(fnv1a(read_file(g_.input))));
    for (const auto& w : loaded.report.warnings) std::cerr << "mega: warning: " << w << "\n";
    return std::move(loaded.table);
  }

  void note_input(const std::string& path) { inputs_.emplace_back(path, hex(fnv1a(read_file(path)))); }
  void add(std::string name, std::string content) { outputs_.add(std::move(name), std::move(content)); }

  void commit() {
    std::string settings;
    for (const auto& [k, v] : settings_) settings += k + "=" + v + "\n";
    std::ostringstream m;
    m << "subcommand=" << sub_ << "\n";
    m << "version=mega " << kVersion << "\n";
    m << "modules=cohort_data " << kVersion << ", aggregation " << kVersion << ", sem " << kVersion
      << ", inference " << kVersion << ", rdd " << kVersion << ", simulator " << kVersion << "\n";
    for (std::size_t i = 0; i < inputs_.size(); ++i)
      m << "input" << i + 1 << "=" << inputs_[i].first << "\ninput" << i + 1 << "_hash=" << inputs_[i].second << "\n";
    m << "config_hash=" << hex(fnv1a(settings)) << "\n";
    if (auto it = settings_.find("seed"); it != settings_.end()) m << "seed=" << it->second << "\n";
    for (const auto& [k, v] : settings_) m << "setting." << k << "=" << v << "\n";
    std::string files;
    for (const auto& [name, content] : outputs_.files()) files += (files.empty() ? "" : ",") + name;
    m << "outputs=" << files << "\n";
    m << "started=" << started_ << "\nfinished=" << utc_now() << "\n";
    outputs_.add("manifest.txt", m.str());
    outputs_.commit(g_.out_dir);
  }

 private:
  std::string sub_;
  Globals g_;
  std::map<std::string, std::string> cfg_;
  std::map<std::string, std::string> settings_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  OutputSet outputs_;
  std::string started_;
};

// Full-length score columns with missing cells for rows that were dropped.
std::string scores_csv(const std::vector<std::string>& ids, const std::vector<std::string>& names,
                       const std::vector<std::vector<double>>& cols) {
  CsvRow header{"subject_id"};
  header.insert(header.end(), names.begin(), names.end());
  std::string out = csv_line(header);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    CsvRow row{ids[i]};
    for (const auto& c : cols) row.push_back(format_number(c[i]));
    out += csv_line(row);
  }
  return out;
}

std::vector<double> spread(const Eigen::VectorXd& v, const std::vector<std::size_t>& rows, std::size_t n) {
  std::vector<double> out(n, kMissing);
  for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i]] = v(static_cast<Eigen::Index>(i));
  return out;
}

std::vector<std::size_t> complete_rows(const CohortTable& t, const std::vector<std::string>& cols) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    bool ok = true;
    for (const auto& c : cols) ok = ok && !is_missing(t.column(c).values[i]);
    if (ok) rows.push_back(i);
  }
  return rows;
}

EfaOptions efa_options(Run& run, const CLI::Option* ex_opt, const std::string& ex,
                       const CLI::Option* k_opt, const std::string& kaiser) {
  EfaOptions o;
  std::string e = run.get(ex_opt, ex, "extraction", "pf");
  if (e == "pf") o.extraction = Extraction::PrincipalFactor;
  else if (e == "pc") o.extraction = Extraction::PrincipalComponent;
  else throw InputError("extraction must be pf or pc");
  std::string k = run.get(k_opt, kaiser, "kaiser", "correlation");
  if (k == "correlation") o.kaiser = KaiserBasis::Correlation;
  else if (k == "reduced") o.kaiser = KaiserBasis::Reduced;
  else throw InputError("kaiser must be correlation or reduced");
  return o;
}

// ---------------------------------------------------------------- aggregate

struct AggregateArgs {
  std::string clocks, methods, age_column, extraction, kaiser;
  CLI::Option *clocks_opt, *methods_opt, *age_opt, *no_loo_opt, *ex_opt, *k_opt;
};

void cmd_aggregate(const Globals& g, const AggregateArgs& a) {
  Run run("aggregate", g);
  auto clocks = run.list(a.clocks_opt, a.clocks, "clocks");
  if (clocks.empty()) throw InputError("--clocks is required");
  auto methods = run.list(a.methods_opt, a.methods, "methods", "wgt,fa");
  for (const auto& m : methods)
    if (m != "wgt" && m != "fa") throw InputError("unknown method '" + m + "' (expected wgt or fa)");
  bool loo = !run.flag(a.no_loo_opt, "no_loo");
  std::string age_col = run.get(a.age_opt, a.age_column, "age_column", "age_years");
  EfaOptions eo = efa_options(run, a.ex_opt, a.extraction, a.k_opt, a.kaiser);

  CohortTable table = run.load();
  auto rows = complete_rows(table, clocks);
  if (rows.size() < table.rows())
    std::cerr << "mega: warning: " << table.rows() - rows.size() << " rows with missing clocks dropped\n";
  ClockPanel panel = ClockPanel::from_table(table.select_rows(rows), clocks, age_col);
  CovarianceEstimate cov = sample_covariance(panel);

  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;
  std::vector<MegaWeights> weights;
  for (const auto& m : methods) {
    if (m == "wgt") {
      MegaWeights w = weighted_index_weights(cov);
      names.push_back("mega_wgt");
      cols.push_back(spread(mega_wgt(panel, w), rows, table.rows()));
      weights.push_back(w);
    } else {
      FactorSolution sol = efa(panel, eo);
      MegaWeights w = fa_weights(sol, cov);
      names.push_back("mega_fa");
      cols.push_back(spread(mega_fa(panel, sol, cov), rows, table.rows()));
      weights.push_back(w);
      run.add("factors.txt", factor_table_text(sol));
      run.add("factors.csv", factor_table_csv(sol));
    }
  }
  if (loo) {
    std::vector<std::pair<MegaMethod, std::string>> tasks;
    for (const auto& m : methods)
      for (const auto& c : clocks) tasks.emplace_back(m == "wgt" ? MegaMethod::Wgt : MegaMethod::Fa, c);
    std::vector<LeaveOneOut> results(tasks.size());
    parallel_for(g.jobs, tasks.size(), [&](std::size_t i) {
      results[i] = leave_one_out(panel, tasks[i].second, tasks[i].first, eo);
    });
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      names.push_back("mega_" + std::string(to_string(tasks[i].first)) + "_loo_" + tasks[i].second);
      cols.push_back(spread(results[i].scores, rows, table.rows()));
      weights.push_back(results[i].weights);
    }
  }
  run.add("scores.csv", scores_csv(table.ids(), names, cols));
  run.add("weights.csv", weights_csv(weights));
  CohortTable with = table;
  for (std::size_t i = 0; i < names.size(); ++i)
    with.add_column(Column{names[i], ColumnType::Continuous, cols[i], {}, false});
  run.add("cohort_with_scores.csv", table_to_csv(with));
  run.commit();
}

// ---------------------------------------------------------------------- efa

struct EfaArgs {
  std::string clocks, extraction, kaiser;
  CLI::Option *clocks_opt, *ex_opt, *k_opt;
};

void cmd_efa(const Globals& g, const EfaArgs& a) {
  Run run("efa", g);
  auto clocks = run.list(a.clocks_opt, a.clocks, "clocks");
  if (clocks.empty()) throw InputError("--clocks is required");
  EfaOptions eo = efa_options(run, a.ex_opt, a.extraction, a.k_opt, a.kaiser);
  CohortTable table = run.load();
  auto rows = complete_rows(table, clocks);
  ClockPanel panel = ClockPanel::from_table(table.select_rows(rows), clocks, "");
  FactorSolution sol = efa(panel, eo);
  run.add("factors.txt", factor_table_text(sol));
  run.add("factors.csv", factor_table_csv(sol));
  Eigen::MatrixXd r = correlation_matrix(panel.readings);
  CsvRow header{"clock"};
  header.insert(header.end(), clocks.begin(), clocks.end());
  std::string corr = csv_line(header);
  for (std::size_t i = 0; i < clocks.size(); ++i) {
    CsvRow row{clocks[i]};
    for (std::size_t j = 0; j < clocks.size(); ++j)
      row.push_back(format_number(r(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));
    corr += csv_line(row);
  }
  run.add("correlation.csv", corr);
  run.commit();
}

// ---------------------------------------------------------------------- sem

struct SemArgs {
  std::string model, clocks, covariates, references, score_mode, se, sim_config;
  int restarts = 3, mc = 0;
  CLI::Option *model_opt, *clocks_opt, *cov_opt, *ref_opt, *mode_opt, *se_opt, *restarts_opt,
      *mc_opt, *sim_opt;
};

std::string mc_summary(Run& run, const Globals& g, const SemArgs& a, const SemOptions& base) {
  std::string path = run.get(a.sim_opt, a.sim_config, "sim_config");
  if (path.empty()) throw InputError("--mc needs --sim-config (a clock-panel simulation config)");
  run.note_input(path);
  SimConfig sc = parse_sim_config(read_key_values(path));
  if (sc.kind != SimKind::ClockPanel) throw InputError("--mc supports clock-panel simulations only");
  const std::uint64_t seed = run.seed();
  const int reps = a.mc;
  if (reps < 1) throw InputError("--mc must be positive");

  MimicSpec spec;
  std::vector<std::string> refs = run.list(a.ref_opt, a.references, "references");
  std::string ref = refs.empty() ? sc.clocks.front() : refs.front();
  spec.blocks.push_back({"EA", sc.clocks, ref});
  if (sc.age_sd > 0) spec.covariates.push_back("age_years");
  spec.covariates.insert(spec.covariates.end(), sc.covariates.begin(), sc.covariates.end());
  auto ref_index = static_cast<std::size_t>(std::find(sc.clocks.begin(), sc.clocks.end(), ref) - sc.clocks.begin());
  if (ref_index >= sc.clocks.size()) throw InputError("reference '" + ref + "' is not a simulated clock");
  const double lr = sc.loadings[ref_index];
  std::map<std::string, double> truth;
  for (std::size_t k = 0; k < sc.clocks.size(); ++k) {
    if (k != ref_index) truth["lambda:" + sc.clocks[k]] = sc.loadings[k] / lr;
    truth["psi:" + sc.clocks[k]] = sc.error_sd[k] * sc.error_sd[k];
  }
  if (sc.age_sd > 0) truth["gamma:EA:age_years"] = lr * sc.age_slope;
  for (std::size_t j = 0; j < sc.covariates.size(); ++j)
    truth["gamma:EA:" + sc.covariates[j]] = lr * sc.covariate_effects[j];
  truth["phi:EA"] = lr * lr * sc.omega_sd * sc.omega_sd;

  struct Rep {
    std::map<std::string, std::pair<double, double>> est;  // estimate, se
    bool ok = false;
    double gradient_check = 0.0;
  };
  std::vector<Rep> out(static_cast<std::size_t>(reps));
  parallel_for(g.jobs, out.size(), [&](std::size_t r) {
    SimConfig c = sc;
    c.seed = seed + r;
    CohortTable t = simulate_clock_panel(c);
    SemModel model = build_mimic(spec, t);
    SemOptions o = base;
    o.seed = seed + r;
    try {
      SemFit f = fit_sem(model, t, o);
      for (std::size_t i = 0; i < f.info.size(); ++i)
        out[r].est[f.info[i].name] = {f.theta(static_cast<Eigen::Index>(i)), f.std_errors(static_cast<Eigen::Index>(i))};
      out[r].ok = true;
      out[r].gradient_check = f.gradient_check;
    } catch (const NumericalError&) {
      out[r].ok = false;
    }
  });

  std::string csv = csv_line({"parameter", "truth", "mean_estimate", "sd_estimate", "mean_se",
                              "coverage95", "replications"});
  int failures = 0;
  double worst_grad = 0.0;
  for (const auto& r : out) {
    if (!r.ok) ++failures;
    worst_grad = std::max(worst_grad, r.gradient_check);
  }
  for (const auto& [name, value] : truth) {
    double sum = 0, sum2 = 0, se_sum = 0;
    int covered = 0, count = 0;
    for (const auto& r : out) {
      if (!r.ok) continue;
      auto it = r.est.find(name);
      if (it == r.est.end()) continue;
      auto [est, se] = it->second;
      sum += est;
      sum2 += est * est;
      se_sum += se;
      if (std::abs(est - value) <= 1.959963984540054 * se) ++covered;
      ++count;
    }
    double mean = count ? sum / count : kMissing;
    double sd = count > 1 ? std::sqrt(std::max(sum2 / count - mean * mean, 0.0) * count / (count - 1)) : kMissing;
    csv += csv_line({name, format_number(value), format_number(mean), format_number(sd),
                     format_number(count ? se_sum / count : kMissing),
                     format_number(count ? static_cast<double>(covered) / count : kMissing),
                     std::to_string(count)});
  }
  run.add("sem_mc.csv", csv);
  std::ostringstream txt;
  txt << "Monte Carlo replications: " << reps << " (failed fits: " << failures << ")\n"
      << "largest gradient discrepancy at an optimum: " << format_number(worst_grad) << "\n";
  return txt.str();
}

void cmd_sem(const Globals& g, const SemArgs& a) {
  Run run("sem", g);
  SemOptions opt;
  opt.random_restarts = run.integer(a.restarts_opt, std::to_string(a.restarts), "restarts", 3);
  if (opt.random_restarts < 0) throw InputError("--restarts must be >= 0");
  std::string se = run.get(a.se_opt, a.se, "se", "oim");
  if (se == "oim") opt.se = SemSe::ObservedInformation;
  else if (se == "sandwich") opt.se = SemSe::Sandwich;
  else throw InputError("--se must be oim or sandwich");
  if (opt.random_restarts > 0 || a.mc_opt->count() > 0) opt.seed = run.seed();

  if (a.mc_opt->count() > 0) {
    run.add("sem_mc.txt", mc_summary(run, g, a, opt));
    run.commit();
    return;
  }

  MimicSpec spec;
  std::string model_path = run.get(a.model_opt, a.model, "model");
  if (!model_path.empty()) {
    run.note_input(model_path);
    spec = parse_model_spec(read_file(model_path));
  } else {
    auto clocks = run.list(a.clocks_opt, a.clocks, "clocks");
    if (clocks.empty()) throw InputError("--model or --clocks is required");
    spec.blocks.push_back({"EA", clocks, clocks.front()});
    spec.covariates = run.list(a.cov_opt, a.covariates, "covariates");
  }
  CohortTable table = run.load();
  SemModel model = build_mimic(spec, table);
  SemFit fit = fit_sem(model, table, opt);
  for (const auto& w : fit.warnings) std::cerr << "mega: warning: " << w << "\n";

  std::string mode_text = run.get(a.mode_opt, a.score_mode, "score_mode",
                                  spec.config == StructuralConfig::LatentOnCovariates ? "linear-prediction"
                                                                                      : "regression-score");
  ScoreMode mode = parse_score_mode(mode_text);
  auto refs = run.list(a.ref_opt, a.references, "references", model.spec.blocks.front().reference);
  std::vector<std::string> names;
  std::vector<std::vector<double>> cols;
  std::string ref_csv = csv_line({"reference", "loglik", "latent_variance", "score_sd"});
  const std::string& latent = model.spec.blocks.front().latent;
  for (const auto& r : refs) {
    SemFit scaled = rescale_reference(fit, r);
    Eigen::VectorXd s = latent_scores(scaled, table, mode, latent);
    std::vector<double> v(s.data(), s.data() + s.size());
    double mean = 0, ss = 0;
    int cnt = 0;
    for (double x : v)
      if (!is_missing(x)) { mean += x; ++cnt; }
    mean /= std::max(cnt, 1);
    for (double x : v)
      if (!is_missing(x)) ss += (x - mean) * (x - mean);
    names.push_back("mega_sem_" + r);
    cols.push_back(std::move(v));
    ref_csv += csv_line({r, format_number(scaled.loglik), format_number(scaled.matrices.phi(0, 0)),
                         format_number(cnt > 1 ? std::sqrt(ss / (cnt - 1)) : kMissing)});
  }
  run.add("sem_parameters.csv", sem_parameters_csv(fit));
  run.add("sem_convergence.log", sem_convergence_log(fit));
  run.add("sem_summary.txt", sem_summary_text(fit));
  run.add("sem_scores.csv", scores_csv(table.ids(), names, cols));
  run.add("sem_references.csv", ref_csv);
  run.commit();
}

// ------------------------------------------------------------------ regress

struct RegressArgs {
  std::string outcomes, regressors, labels, se, show, residualize, title;
  CLI::Option *outcomes_opt, *regressors_opt, *labels_opt, *se_opt, *show_opt, *resid_opt, *title_opt;
};

void cmd_regress(const Globals& g, const RegressArgs& a) {
  Run run("regress", g);
  auto outcomes = run.list(a.outcomes_opt, a.outcomes, "outcomes");
  auto regressors = run.list(a.regressors_opt, a.regressors, "regressors");
  if (outcomes.empty()) throw InputError("--outcomes is required");
  if (regressors.empty()) throw InputError("--regressors is required");
  auto labels = run.list(a.labels_opt, a.labels, "labels");
  if (labels.empty()) labels = outcomes;
  if (labels.size() != outcomes.size()) throw InputError("--labels must match --outcomes");
  std::string se = run.get(a.se_opt, a.se, "se", "classical");
  SeType se_type;
  if (se == "classical") se_type = SeType::Classical;
  else if (se == "hc1") se_type = SeType::HC1;
  else throw InputError("--se must be classical or hc1");
  std::string age_col = run.get(a.resid_opt, a.residualize, "residualize_age");
  std::string title = run.get(a.title_opt, a.title, "title");

  CohortTable table = run.load();
  std::vector<TableColumn> columns;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    LinearModelSpec spec;
    spec.outcome = outcomes[i];
    spec.regressors = regressors;
    spec.se_type = se_type;
    if (!age_col.empty()) {
      auto rows = complete_rows(table, {outcomes[i], age_col});
      Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size())), age(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        y(static_cast<Eigen::Index>(r)) = table.column(outcomes[i]).values[rows[r]];
        age(static_cast<Eigen::Index>(r)) = table.column(age_col).values[rows[r]];
      }
      std::string name = "aa_" + outcomes[i];
      table.replace_column(Column{name, ColumnType::Continuous, spread(age_acceleration(y, age), rows, table.rows()), {}, false});
      spec.outcome = name;
    }
    RegressionFit fit = ols_fit(spec, table);
    for (const auto& w : fit.warnings) std::cerr << "mega: warning: " << outcomes[i] << ": " << w << "\n";
    columns.push_back({labels[i], std::move(fit)});
  }
  auto show = run.list(a.show_opt, a.show, "show");
  std::vector<TableRow> rows;
  for (const auto& name : columns.front().fit.names) {
    if (name == kInterceptName) continue;
    if (!show.empty() && std::find(show.begin(), show.end(), name) == show.end()) continue;
    rows.push_back({name, name});
  }
  std::string notes = std::string(se_type == SeType::HC1 ? "Robust standard errors" : "Standard errors") +
                      " in parentheses. * p < 0.1, ** p < 0.05, *** p < 0.01.";
  run.add("regression.txt", regression_table_text(columns, rows, title, notes));
  run.add("regression.csv", regression_table_csv(columns, rows));
  run.add("effects.csv", effect_plot_csv(columns, rows, 0.90));
  run.commit();
}

// ---------------------------------------------------------------------- rdd

struct RddArgs {
  std::string outcomes, labels, bandwidths, controls, month_column, by, placebo;
  int cutoff = 9;
  CLI::Option *outcomes_opt, *labels_opt, *bw_opt, *controls_opt, *month_opt, *by_opt, *placebo_opt,
      *cutoff_opt, *split_opt;
};

void cmd_rdd(const Globals& g, const RddArgs& a) {
  Run run("rdd", g);
  auto outcomes = run.list(a.outcomes_opt, a.outcomes, "outcomes");
  if (outcomes.empty()) throw InputError("--outcomes is required");
  auto labels = run.list(a.labels_opt, a.labels, "labels");
  if (labels.empty()) labels = outcomes;
  if (labels.size() != outcomes.size()) throw InputError("--labels must match --outcomes");
  std::vector<int> bandwidths;
  for (const auto& b : run.list(a.bw_opt, a.bandwidths, "bandwidths", "4,3,2")) {
    try {
      bandwidths.push_back(std::stoi(b));
    } catch (const std::exception&) {
      throw InputError("bandwidth '" + b + "' is not an integer");
    }
  }
  RddSpec base;
  base.controls = run.list(a.controls_opt, a.controls, "controls");
  base.month_column = run.get(a.month_opt, a.month_column, "month_column", "birth_month");
  base.cutoff_month = run.integer(a.cutoff_opt, std::to_string(a.cutoff), "cutoff_month", 9);
  std::string by = run.get(a.by_opt, a.by, "by");
  std::string placebo = run.get(a.placebo_opt, a.placebo, "placebo");
  bool split = run.flag(a.split_opt, "split");

  CohortTable table = run.load();
  std::vector<RddColumn> columns;
  std::vector<LabeledRdd> classes;
  std::string tests = csv_line({"outcome", "bandwidth", "wald_f", "df1", "df2", "p_value"});
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    RddColumn col{labels[i], {}};
    for (int b : bandwidths) {
      RddSpec s = base;
      s.outcome = outcomes[i];
      s.bandwidth = b;
      col.panels.push_back(rdd_fit(s, table));
    }
    if (!by.empty()) {
      RddSpec s = base;
      s.outcome = outcomes[i];
      s.bandwidth = bandwidths.front();
      RddFit h = rdd_heterogeneity(s, table, by, split);
      if (h.equality)
        tests += csv_line({labels[i], std::to_string(s.bandwidth), format_number(h.equality->statistic),
                           std::to_string(h.equality->df1), format_number(h.equality->df2),
                           format_number(h.equality->p_value)});
      classes.push_back({labels[i], std::move(h)});
    }
    columns.push_back(std::move(col));
  }
  const std::string notes =
      "Robust standard errors in parentheses. * p < 0.1, ** p < 0.05, *** p < 0.01.";
  run.add("rdd_table.txt", rdd_table_text(columns, {}, notes));
  run.add("rdd_table.csv", rdd_table_csv(columns));
  if (!by.empty()) {
    run.add("class_effects.csv", class_effects_csv(classes, 0.90));
    if (!split) run.add("class_tests.csv", tests);
  }
  if (!placebo.empty()) {
    RddColumn col{"placebo: " + placebo, {}};
    for (int b : bandwidths) {
      RddSpec s = base;
      s.bandwidth = b;
      col.panels.push_back(placebo_outcome(s, table, placebo));
    }
    std::vector<RddColumn> pc{std::move(col)};
    run.add("placebo.txt", rdd_table_text(pc, "Placebo outcome (fixed before school entry; null expected)", notes));
    run.add("placebo.csv", rdd_table_csv(pc));
  }
  run.commit();
}

// ----------------------------------------------------------------- simulate

struct SimulateArgs {
  std::string kind;
  std::size_t n = 0;
  CLI::Option *kind_opt, *n_opt, *unsafe_opt;
};

void cmd_simulate(const Globals& g, const SimulateArgs& a) {
  Run run("simulate", g);
  std::map<std::string, std::string> kv = run.config();
  kv.erase("seed");
  if (a.kind_opt->count()) kv["kind"] = a.kind;
  if (a.n_opt->count()) kv["n"] = std::to_string(a.n);
  SimConfig c = parse_sim_config(kv);
  c.seed = run.seed();
  bool unsafe = run.flag(a.unsafe_opt, "unsafe_export_truth");
  CohortTable t = simulate(c);
  auto checks = moment_self_test(t, c);
  std::string moments = csv_line({"column", "moment", "expected", "observed", "tolerance", "pass"});
  for (const auto& m : checks) {
    moments += csv_line({m.column, m.moment, format_number(m.expected), format_number(m.observed),
                         format_number(m.tolerance), m.pass ? "1" : "0"});
    if (!m.pass)
      std::cerr << "mega: warning: moment self-test: " << m.column << " " << m.moment << " off by "
                << format_number(std::abs(m.observed - m.expected)) << "\n";
  }
  run.add("cohort.csv", table_to_csv(t, unsafe));
  run.add("truth.csv", truth_to_csv(t));
  run.add("sim_config.txt", sim_config_text(c));
  run.add("moments.csv", moments);
  run.commit();
}

// ------------------------------------------------------------------- report

void cmd_report(const Globals& g) {
  Run run("report", g);
  if (g.input.empty()) throw InputError("--input must name an output directory");
  fs::path dir = g.input;
  if (!fs::is_directory(dir)) throw InputError("'" + g.input + "' is not a directory");
  std::vector<fs::path> texts;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".txt" && e.path().filename() != "manifest.txt")
      texts.push_back(e.path());
  std::sort(texts.begin(), texts.end());
  std::ostringstream os;
  fs::path manifest = dir / "manifest.txt";
  if (fs::exists(manifest)) {
    auto m = read_key_values(manifest);
    os << "Run: " << m["subcommand"] << " (" << m["version"] << ")\n";
    if (m.count("seed")) os << "Seed: " << m["seed"] << "\n";
    os << "Outputs: " << m["outputs"] << "\n\n";
  }
  for (const auto& p : texts) {
    os << "== " << p.filename().string() << " ==\n" << read_file(p) << "\n";
    run.note_input(p.string());
  }
  run.add("report.txt", os.str());
  run.commit();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mega: aggregate epigenetic clocks and estimate their associations"};
  app.set_version_flag("--version", std::string("mega ") + kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--input", g.input, "Input cohort CSV (or output directory for report)");
  app.add_option("--config", g.config, "key=value settings file (flags take precedence)");
  app.add_option("--schema", g.schema, "key=value column types overriding inference");
  g.seed_opt = app.add_option("--seed", g.seed, "Random seed (required for stochastic commands)");
  app.add_option("--jobs", g.jobs, "Worker threads for replications and leave-one-out fits")
      ->check(CLI::PositiveNumber);
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

  AggregateArgs ag;
  auto* agg = app.add_subcommand("aggregate", "MEGA weighted-index and factor scores");
  ag.clocks_opt = agg->add_option("--clocks", ag.clocks, "Comma-separated clock columns");
  ag.methods_opt = agg->add_option("--methods", ag.methods, "wgt,fa (default both)");
  ag.no_loo_opt = agg->add_flag("--no-loo", "Skip leave-one-out variants");
  ag.age_opt = agg->add_option("--age-column", ag.age_column, "Chronological age column");
  ag.ex_opt = agg->add_option("--extraction", ag.extraction, "pf (principal factor) or pc");
  ag.k_opt = agg->add_option("--kaiser", ag.kaiser, "Kaiser basis: correlation or reduced");

  EfaArgs ea;
  auto* efa_cmd = app.add_subcommand("efa", "Exploratory factor analysis of the clocks");
  ea.clocks_opt = efa_cmd->add_option("--clocks", ea.clocks, "Comma-separated clock columns");
  ea.ex_opt = efa_cmd->add_option("--extraction", ea.extraction, "pf or pc");
  ea.k_opt = efa_cmd->add_option("--kaiser", ea.kaiser, "correlation or reduced");

  SemArgs sa;
  auto* sem = app.add_subcommand("sem", "MIMIC model by maximum likelihood");
  sa.model_opt = sem->add_option("--model", sa.model, "Model specification file");
  sa.clocks_opt = sem->add_option("--clocks", sa.clocks, "Indicators of a single latent (without --model)");
  sa.cov_opt = sem->add_option("--covariates", sa.covariates, "Latent covariates (without --model)");
  sa.ref_opt = sem->add_option("--references", sa.references, "Reference scalings for the score columns");
  sa.mode_opt = sem->add_option("--score-mode", sa.score_mode, "linear-prediction or regression-score");
  sa.se_opt = sem->add_option("--se", sa.se, "oim or sandwich");
  sa.restarts_opt = sem->add_option("--restarts", sa.restarts, "Random restarts besides the EFA start");
  sa.mc_opt = sem->add_option("--mc", sa.mc, "Monte Carlo replications on simulated panels");
  sa.sim_opt = sem->add_option("--sim-config", sa.sim_config, "Simulation config for --mc");

  RegressArgs ra;
  auto* reg = app.add_subcommand("regress", "OLS tables with classical or HC1 errors");
  ra.outcomes_opt = reg->add_option("--outcomes", ra.outcomes, "Outcome columns, one table column each");
  ra.regressors_opt = reg->add_option("--regressors", ra.regressors, "Regressors (categoricals expand)");
  ra.labels_opt = reg->add_option("--labels", ra.labels, "Column labels");
  ra.se_opt = reg->add_option("--se", ra.se, "classical or hc1");
  ra.show_opt = reg->add_option("--show", ra.show, "Coefficients to display (default all)");
  ra.resid_opt = reg->add_option("--residualize-age", ra.residualize, "Residualize outcomes on this age column");
  ra.title_opt = reg->add_option("--title", ra.title, "Table title");

  RddArgs da;
  auto* rdd = app.add_subcommand("rdd", "School-entry regression discontinuity");
  da.outcomes_opt = rdd->add_option("--outcomes", da.outcomes, "Outcome columns");
  da.labels_opt = rdd->add_option("--labels", da.labels, "Column labels");
  da.bw_opt = rdd->add_option("--bandwidths", da.bandwidths, "Months each side, e.g. 4,3,2");
  da.controls_opt = rdd->add_option("--controls", da.controls, "Control columns");
  da.month_opt = rdd->add_option("--month-column", da.month_column, "Calendar birth month column");
  da.cutoff_opt = rdd->add_option("--cutoff", da.cutoff, "Cutoff month (treated side)");
  da.by_opt = rdd->add_option("--by", da.by, "Class column for heterogeneity");
  da.split_opt = rdd->add_flag("--split", "Separate regressions per class");
  da.placebo_opt = rdd->add_option("--placebo", da.placebo, "Pre-treatment placebo outcome");

  SimulateArgs si;
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic cohort");
  si.kind_opt = sim->add_option("--kind", si.kind, "clock-panel, abuse or rdd");
  si.n_opt = sim->add_option("--n", si.n, "Number of subjects");
  si.unsafe_opt = sim->add_flag("--unsafe-export-truth", "Include truth columns in cohort.csv");

  auto* report = app.add_subcommand("report", "Collect the text tables of an output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mega: input error: " << e.what() << "\n";
    return kExitInput;
  }

  try {
    if (agg->parsed()) cmd_aggregate(g, ag);
    else if (efa_cmd->parsed()) cmd_efa(g, ea);
    else if (sem->parsed()) cmd_sem(g, sa);
    else if (reg->parsed()) cmd_regress(g, ra);
    else if (rdd->parsed()) cmd_rdd(g, da);
    else if (sim->parsed()) cmd_simulate(g, si);
    else if (report->parsed()) cmd_report(g);
  } catch (const InputError& e) {
    std::string msg = e.what();
    std::cerr << "mega: input error: " << msg.substr(0, msg.find('\n')) << "\n";
    return kExitInput;
  } catch (const NumericalError& e) {
    std::string msg = e.what();
    std::cerr << "mega: numerical error: " << msg.substr(0, msg.find('\n')) << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "mega: internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}
