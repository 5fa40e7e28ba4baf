#include "mega/simulator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"
#include "mega/rdd.hpp"

namespace mega {

std::string_view to_string(SimKind k) {
  switch (k) {
    case SimKind::ClockPanel: return "clock-panel";
    case SimKind::Abuse: return "abuse";
    case SimKind::Rdd: return "rdd";
  }
  return "clock-panel";
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw InputError("invalid simulation config: " + what);
}

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    auto b = cur.find_first_not_of(" \t");
    auto e = cur.find_last_not_of(" \t");
    if (b == std::string::npos) throw InputError("empty item in list '" + s + "'");
    out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw InputError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw InputError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw InputError("config key '" + key + "': '" + v + "' is out of range");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw InputError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
  return s;
}

}  // namespace

void SimConfig::validate() const {
  require(seed.has_value(), "seed is mandatory");
  require(n > 0, "n must be positive");
  require(!clocks.empty(), "at least one clock");
  require(loadings.size() == clocks.size(), "loadings must match the number of clocks");
  require(intercepts.size() == clocks.size(), "intercepts must match the number of clocks");
  require(error_sd.size() == clocks.size(), "error_sd must match the number of clocks");
  for (double s : error_sd) require(s >= 0.0, "error SDs must be >= 0");
  require(age_sd >= 0.0 && omega_sd >= 0.0 && outcome_sd >= 0.0, "SDs must be >= 0");
  require(covariates.size() == covariate_effects.size(),
          "covariate_effects must match covariates");
  for (double p : {p_cruelty_early, p_sex_early, persistence, p_cruelty_late_new, p_sex_late_new,
                   miss_mother, miss_partner, miss_child})
    require(is_probability(p), "probabilities must lie in [0, 1]");
  require(cutoff_month >= 1 && cutoff_month <= 12, "cutoff_month must be 1-12");
  require(month_weights.size() == 12, "month_weights needs 12 entries");
  double treated = 0.0, control = 0.0;
  for (int m = 1; m <= 12; ++m) {
    double w = month_weights[static_cast<std::size_t>(m - 1)];
    require(w >= 0.0, "month weights must be >= 0");
    (is_treated(normalize_running(m, cutoff_month)) ? treated : control) += w;
  }
  if (kind == SimKind::Rdd) {
    require(treated > 0.0 && control > 0.0, "empty month support on one side of the cutoff");
    require(!class_levels.empty() && class_levels.size() == class_probs.size(),
            "class_probs must match class_levels");
    double total = 0.0;
    for (double p : class_probs) {
      require(p >= 0.0, "class probabilities must be >= 0");
      total += p;
    }
    require(total > 0.0, "class probabilities sum to zero");
    for (const auto& [level, jump] : class_jumps)
      require(std::find(class_levels.begin(), class_levels.end(), level) != class_levels.end(),
              "class_jumps names unknown level '" + level + "'");
  }
  if (kind == SimKind::ClockPanel) require(n > clocks.size(), "N must exceed the number of clocks");
}

SimConfig parse_sim_config(const std::map<std::string, std::string>& kv) {
  SimConfig c;
  for (const auto& [key, v] : kv) {
    if (key == "kind") {
      if (v == "clock-panel") c.kind = SimKind::ClockPanel;
      else if (v == "abuse") c.kind = SimKind::Abuse;
      else if (v == "rdd") c.kind = SimKind::Rdd;
      else throw InputError("config key 'kind': unknown generator '" + v + "'");
    } else if (key == "seed") c.seed = parse_uint(key, v);
    else if (key == "n") c.n = static_cast<std::size_t>(parse_uint(key, v));
    else if (key == "clocks") c.clocks = split_list(v);
    else if (key == "loadings") c.loadings = parse_doubles(key, v);
    else if (key == "intercepts") c.intercepts = parse_doubles(key, v);
    else if (key == "error_sd") c.error_sd = parse_doubles(key, v);
    else if (key == "age_mean") c.age_mean = parse_double(key, v);
    else if (key == "age_sd") c.age_sd = parse_double(key, v);
    else if (key == "age_slope") c.age_slope = parse_double(key, v);
    else if (key == "omega_sd") c.omega_sd = parse_double(key, v);
    else if (key == "covariates") c.covariates = split_list(v);
    else if (key == "covariate_effects") c.covariate_effects = parse_doubles(key, v);
    else if (key == "p_cruelty_early") c.p_cruelty_early = parse_double(key, v);
    else if (key == "p_sex_early") c.p_sex_early = parse_double(key, v);
    else if (key == "persistence") c.persistence = parse_double(key, v);
    else if (key == "p_cruelty_late_new") c.p_cruelty_late_new = parse_double(key, v);
    else if (key == "p_sex_late_new") c.p_sex_late_new = parse_double(key, v);
    else if (key == "miss_mother") c.miss_mother = parse_double(key, v);
    else if (key == "miss_partner") c.miss_partner = parse_double(key, v);
    else if (key == "miss_child") c.miss_child = parse_double(key, v);
    else if (key == "effect_early") c.effect_early = parse_double(key, v);
    else if (key == "effect_late") c.effect_late = parse_double(key, v);
    else if (key == "mediators") c.mediators = parse_bool(key, v);
    else if (key == "mediator_shift") c.mediator_shift = parse_double(key, v);
    else if (key == "mediator_effect") c.mediator_effect = parse_double(key, v);
    else if (key == "outcome_slope") c.outcome_slope = parse_double(key, v);
    else if (key == "cutoff_month") c.cutoff_month = static_cast<int>(parse_uint(key, v));
    else if (key == "month_weights") c.month_weights = parse_doubles(key, v);
    else if (key == "tau") c.tau = parse_double(key, v);
    else if (key == "rdd_slope") c.rdd_slope = parse_double(key, v);
    else if (key == "rdd_interaction") c.rdd_interaction = parse_double(key, v);
    else if (key == "outcome_sd") c.outcome_sd = parse_double(key, v);
    else if (key == "class_levels") c.class_levels = split_list(v);
    else if (key == "class_probs") c.class_probs = parse_doubles(key, v);
    else if (key == "class_jumps") {
      c.class_jumps.clear();
      for (const auto& item : split_list(v)) {
        auto colon = item.find(':');
        if (colon == std::string::npos) throw InputError("class_jumps items must be level:value");
        c.class_jumps[item.substr(0, colon)] = parse_double(key, item.substr(colon + 1));
      }
    } else if (key == "rdd_clocks") c.rdd_clocks = parse_bool(key, v);
    else throw InputError("unknown config key '" + key + "'");
  }
  return c;
}

std::string sim_config_text(const SimConfig& c) {
  std::ostringstream os;
  os << "kind=" << to_string(c.kind) << "\n";
  if (c.seed) os << "seed=" << *c.seed << "\n";
  os << "n=" << c.n << "\nclocks=" << join(c.clocks) << "\nloadings=" << join(c.loadings)
     << "\nintercepts=" << join(c.intercepts) << "\nerror_sd=" << join(c.error_sd)
     << "\nage_mean=" << format_number(c.age_mean) << "\nage_sd=" << format_number(c.age_sd)
     << "\nage_slope=" << format_number(c.age_slope) << "\nomega_sd=" << format_number(c.omega_sd)
     << "\n";
  if (!c.covariates.empty())
    os << "covariates=" << join(c.covariates) << "\ncovariate_effects=" << join(c.covariate_effects) << "\n";
  if (c.kind == SimKind::Abuse) {
    os << "p_cruelty_early=" << format_number(c.p_cruelty_early)
       << "\np_sex_early=" << format_number(c.p_sex_early)
       << "\npersistence=" << format_number(c.persistence)
       << "\np_cruelty_late_new=" << format_number(c.p_cruelty_late_new)
       << "\np_sex_late_new=" << format_number(c.p_sex_late_new)
       << "\nmiss_mother=" << format_number(c.miss_mother)
       << "\nmiss_partner=" << format_number(c.miss_partner)
       << "\nmiss_child=" << format_number(c.miss_child)
       << "\neffect_early=" << format_number(c.effect_early)
       << "\neffect_late=" << format_number(c.effect_late) << "\nmediators=" << (c.mediators ? 1 : 0)
       << "\nmediator_shift=" << format_number(c.mediator_shift)
       << "\nmediator_effect=" << format_number(c.mediator_effect)
       << "\noutcome_slope=" << format_number(c.outcome_slope) << "\n";
  }
  if (c.kind == SimKind::Rdd) {
    os << "cutoff_month=" << c.cutoff_month << "\nmonth_weights=" << join(c.month_weights)
       << "\ntau=" << format_number(c.tau) << "\nrdd_slope=" << format_number(c.rdd_slope)
       << "\nrdd_interaction=" << format_number(c.rdd_interaction)
       << "\noutcome_sd=" << format_number(c.outcome_sd) << "\nclass_levels=" << join(c.class_levels)
       << "\nclass_probs=" << join(c.class_probs) << "\n";
    if (!c.class_jumps.empty()) {
      os << "class_jumps=";
      bool first = true;
      for (const auto& [level, jump] : c.class_jumps) {
        os << (first ? "" : ",") << level << ":" << format_number(jump);
        first = false;
      }
      os << "\n";
    }
    os << "rdd_clocks=" << (c.rdd_clocks ? 1 : 0) << "\n";
  }
  return os.str();
}

std::mt19937_64 RandomStreams::stream(std::string_view name) const {
  // splitmix64 finalizer over seed and name hash
  std::uint64_t z = seed_ ^ fnv1a(name);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  return std::mt19937_64(z);
}

namespace {

std::vector<std::string> subject_ids(std::size_t n) {
  std::vector<std::string> ids;
  ids.reserve(n);
  const int width = static_cast<int>(std::to_string(n).size());
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "S%0*zu", width, i + 1);
    ids.emplace_back(buf);
  }
  return ids;
}

std::vector<double> normals(const RandomStreams& rs, std::string_view name, std::size_t n,
                            double mean, double sd) {
  auto eng = rs.stream(name);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = mean + sd * d(eng);
  return v;
}

std::vector<double> bernoullis(const RandomStreams& rs, std::string_view name, std::size_t n, double p) {
  auto eng = rs.stream(name);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(eng) < p ? 1.0 : 0.0;
  return v;
}

std::vector<double> categories(const RandomStreams& rs, std::string_view name, std::size_t n,
                               const std::vector<double>& probs) {
  auto eng = rs.stream(name);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double total = std::accumulate(probs.begin(), probs.end(), 0.0);
  std::vector<double> v(n);
  for (auto& x : v) {
    double r = u(eng) * total, acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < probs.size(); ++k) {
      acc += probs[k];
      if (r < acc) break;
    }
    x = static_cast<double>(k);
  }
  return v;
}

Column make(std::string name, ColumnType type, std::vector<double> values, bool truth = false,
            std::vector<std::string> levels = {}) {
  Column c;
  c.name = std::move(name);
  c.type = type;
  c.values = std::move(values);
  c.levels = std::move(levels);
  c.truth = truth;
  return c;
}

// Adds clock columns C_k = a_k + lambda_k EA* + e_k and the truth column.
void add_clocks(CohortTable& t, const SimConfig& c, const RandomStreams& rs,
                const std::vector<double>& ea) {
  t.add_column(make("ea_true", ColumnType::Continuous, ea, true));
  for (std::size_t k = 0; k < c.clocks.size(); ++k) {
    auto e = normals(rs, "error:" + c.clocks[k], ea.size(), 0.0, c.error_sd[k]);
    std::vector<double> v(ea.size());
    for (std::size_t i = 0; i < ea.size(); ++i) v[i] = c.intercepts[k] + c.loadings[k] * ea[i] + e[i];
    t.add_column(make(c.clocks[k], ColumnType::Continuous, std::move(v)));
  }
}

// Reported indicator: the truth unless this rater misses it.
std::vector<double> report(const RandomStreams& rs, const std::string& name,
                           const std::vector<double>& truth, double miss) {
  auto missed = bernoullis(rs, "miss:" + name, truth.size(), miss);
  std::vector<double> v(truth.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = truth[i] * (1.0 - missed[i]);
  return v;
}

// Period-2 draws given period-1 status.
std::vector<double> persistent(const RandomStreams& rs, const std::string& name,
                               const std::vector<double>& early, double persistence, double fresh) {
  auto eng = rs.stream(name);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(early.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = u(eng) < (early[i] > 0 ? persistence : fresh) ? 1.0 : 0.0;
  return v;
}

std::vector<double> either(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (a[i] > 0 || b[i] > 0) ? 1.0 : 0.0;
  return v;
}

}  // namespace

CohortTable simulate_clock_panel(const SimConfig& config) {
  SimConfig c = config;
  c.kind = SimKind::ClockPanel;
  c.validate();
  RandomStreams rs(*c.seed);
  CohortTable t(subject_ids(c.n));
  auto age = normals(rs, "age_years", c.n, c.age_mean, c.age_sd);
  auto omega = normals(rs, "omega", c.n, 0.0, c.omega_sd);
  std::vector<double> ea(c.n);
  for (std::size_t i = 0; i < c.n; ++i) ea[i] = c.age_slope * age[i] + omega[i];
  t.add_column(make("age_years", ColumnType::Continuous, age));
  for (std::size_t j = 0; j < c.covariates.size(); ++j) {
    auto x = normals(rs, c.covariates[j], c.n, 0.0, 1.0);
    for (std::size_t i = 0; i < c.n; ++i) ea[i] += c.covariate_effects[j] * x[i];
    t.add_column(make(c.covariates[j], ColumnType::Continuous, std::move(x)));
  }
  add_clocks(t, c, rs, ea);
  t.add_column(make("omega_true", ColumnType::Continuous, omega, true));
  return t;
}

CohortTable simulate_abuse_cohort(const SimConfig& config) {
  SimConfig c = config;
  c.kind = SimKind::Abuse;
  c.validate();
  RandomStreams rs(*c.seed);
  const std::size_t n = c.n;
  CohortTable t(subject_ids(n));
  auto age = normals(rs, "age_years", n, c.age_mean, c.age_sd);
  t.add_column(make("age_years", ColumnType::Continuous, age));
  t.add_column(make("female", ColumnType::Binary, bernoullis(rs, "female", n, 0.5)));
  t.add_column(make("mother_age", ColumnType::Continuous, normals(rs, "mother_age", n, 28.0, 5.0)));
  t.add_column(make("mother_edu", ColumnType::Categorical, categories(rs, "mother_edu", n, {0.4, 0.4, 0.2}),
                    false, {"low", "middle", "high"}));
  t.add_column(make("father_class", ColumnType::Categorical,
                    categories(rs, "father_class", n, {0.3, 0.4, 0.3}), false,
                    {"professional", "non_manual", "manual"}));
  t.add_column(make("birth_year", ColumnType::Categorical, categories(rs, "birth_year", n, {0.5, 0.5}),
                    false, {"1991", "1992"}));
  t.add_column(make("first_born", ColumnType::Binary, bernoullis(rs, "first_born", n, 0.45)));

  auto cruelty_early = bernoullis(rs, "cruelty_true_0_10", n, c.p_cruelty_early);
  auto sex_early = bernoullis(rs, "sexabuse_true_0_10", n, c.p_sex_early);
  auto cruelty_late = persistent(rs, "cruelty_true_11_18", cruelty_early, c.persistence, c.p_cruelty_late_new);
  auto sex_late = persistent(rs, "sexabuse_true_11_18", sex_early, c.persistence, c.p_sex_late_new);
  auto any_early = either(cruelty_early, sex_early);
  auto any_late = either(cruelty_late, sex_late);

  const std::vector<std::pair<std::string, double>> raters{
      {"m", c.miss_mother}, {"p", c.miss_partner}, {"c", c.miss_child}};
  std::vector<double> reported_early(n, 0.0), reported_late(n, 0.0);
  for (const auto& [code, miss] : raters) {
    auto e = report(rs, "cruelty_" + code + "_0_10", cruelty_early, miss);
    auto l = report(rs, "cruelty_" + code + "_11_18", cruelty_late, miss);
    reported_early = either(reported_early, e);
    reported_late = either(reported_late, l);
    t.add_column(make("cruelty_" + code + "_0_10", ColumnType::Binary, std::move(e)));
    t.add_column(make("cruelty_" + code + "_11_18", ColumnType::Binary, std::move(l)));
  }
  auto sex_e = report(rs, "sexabuse_c_0_10", sex_early, c.miss_child);
  auto sex_l = report(rs, "sexabuse_c_11_18", sex_late, c.miss_child);
  reported_early = either(reported_early, sex_e);
  reported_late = either(reported_late, sex_l);
  t.add_column(make("sexabuse_c_0_10", ColumnType::Binary, std::move(sex_e)));
  t.add_column(make("sexabuse_c_11_18", ColumnType::Binary, std::move(sex_l)));
  t.add_column(make("abuse_0_10", ColumnType::Binary, reported_early));
  t.add_column(make("abuse_11_18", ColumnType::Binary, reported_late));

  auto omega = normals(rs, "omega", n, 0.0, c.omega_sd);
  std::vector<double> ea(n);
  for (std::size_t i = 0; i < n; ++i)
    ea[i] = c.age_slope * age[i] + c.effect_early * any_early[i] + c.effect_late * any_late[i] + omega[i];
  if (c.mediators) {
    for (const char* name : {"cd8t", "gran"}) {
      auto noise = normals(rs, name, n, 0.0, 1.0);
      std::vector<double> cell(n);
      for (std::size_t i = 0; i < n; ++i) {
        cell[i] = c.mediator_shift * any_early[i] + noise[i];
        ea[i] += c.mediator_effect * cell[i];
      }
      t.add_column(make(name, ColumnType::Continuous, std::move(cell)));
    }
  }
  add_clocks(t, c, rs, ea);

  const double ea_mean = std::accumulate(ea.begin(), ea.end(), 0.0) / static_cast<double>(n);
  t.add_column(make("bmi", ColumnType::Continuous, normals(rs, "bmi", n, 23.0, 4.0)));
  t.add_column(make("smoker", ColumnType::Binary, bernoullis(rs, "smoker", n, 0.2)));
  t.add_column(make("drinker", ColumnType::Binary, bernoullis(rs, "drinker", n, 0.5)));
  {
    auto eng = rs.stream("neet");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      double p = std::clamp(0.1 + c.outcome_slope * (ea[i] - ea_mean), 0.0, 1.0);
      v[i] = u(eng) < p ? 1.0 : 0.0;
    }
    t.add_column(make("neet", ColumnType::Binary, std::move(v)));
  }

  t.add_column(make("omega_true", ColumnType::Continuous, omega, true));
  t.add_column(make("cruelty_true_0_10", ColumnType::Binary, cruelty_early, true));
  t.add_column(make("cruelty_true_11_18", ColumnType::Binary, cruelty_late, true));
  t.add_column(make("sexabuse_true_0_10", ColumnType::Binary, sex_early, true));
  t.add_column(make("sexabuse_true_11_18", ColumnType::Binary, sex_late, true));
  t.add_column(make("abuse_true_0_10", ColumnType::Binary, any_early, true));
  t.add_column(make("abuse_true_11_18", ColumnType::Binary, any_late, true));
  return t;
}

CohortTable simulate_rdd_cohort(const SimConfig& config) {
  SimConfig c = config;
  c.kind = SimKind::Rdd;
  c.validate();
  RandomStreams rs(*c.seed);
  const std::size_t n = c.n;
  CohortTable t(subject_ids(n));
  auto months = categories(rs, "birth_month", n, c.month_weights);
  std::vector<double> month(n), mob(n), treat(n);
  for (std::size_t i = 0; i < n; ++i) {
    month[i] = months[i] + 1.0;
    int m = normalize_running(static_cast<int>(month[i]), c.cutoff_month);
    mob[i] = m;
    treat[i] = is_treated(m) ? 1.0 : 0.0;
  }
  t.add_column(make("birth_month", ColumnType::Continuous, month));
  t.add_column(make("mob", ColumnType::Continuous, mob));
  t.add_column(make("treat", ColumnType::Binary, treat));
  t.add_column(make("female", ColumnType::Binary, bernoullis(rs, "female", n, 0.5)));
  auto age = normals(rs, "age_years", n, c.age_mean, c.age_sd);
  t.add_column(make("age_years", ColumnType::Continuous, age));
  t.add_column(make("birth_year", ColumnType::Categorical, categories(rs, "birth_year", n, {0.5, 0.5}),
                    false, {"1991", "1992"}));
  auto cls = categories(rs, "father_class", n, c.class_probs);
  t.add_column(make("father_class", ColumnType::Categorical, cls, false, c.class_levels));

  auto noise = normals(rs, "outcome_noise", n, 0.0, c.outcome_sd);
  std::vector<double> y(n), effect(n);
  for (std::size_t i = 0; i < n; ++i) {
    double jump = c.tau;
    auto it = c.class_jumps.find(c.class_levels[static_cast<std::size_t>(cls[i])]);
    if (it != c.class_jumps.end()) jump += it->second;
    effect[i] = jump * treat[i];
    y[i] = effect[i] + c.rdd_slope * mob[i] + c.rdd_interaction * treat[i] * mob[i] + noise[i];
  }
  t.add_column(make("outcome", ColumnType::Continuous, y));
  t.add_column(make("placebo_birth", ColumnType::Continuous, normals(rs, "placebo_birth", n, 3.4, 0.5)));
  if (c.rdd_clocks) {
    std::vector<double> ea(n);
    for (std::size_t i = 0; i < n; ++i) ea[i] = c.age_slope * age[i] + y[i];
    add_clocks(t, c, rs, ea);
  }
  t.add_column(make("effect_true", ColumnType::Continuous, effect, true));
  return t;
}

CohortTable simulate(const SimConfig& config) {
  switch (config.kind) {
    case SimKind::ClockPanel: return simulate_clock_panel(config);
    case SimKind::Abuse: return simulate_abuse_cohort(config);
    case SimKind::Rdd: return simulate_rdd_cohort(config);
  }
  throw InputError("unknown generator");
}

CohortTable simulate_standardized_factor(std::span<const double> loadings, std::size_t n,
                                         std::uint64_t seed) {
  for (double l : loadings)
    if (!(std::abs(l) <= 1.0)) throw InputError("standardized loadings must lie in [-1, 1]");
  if (n <= loadings.size()) throw InputError("N must exceed the number of clocks");
  RandomStreams rs(seed);
  CohortTable t(subject_ids(n));
  auto f = normals(rs, "factor", n, 0.0, 1.0);
  for (std::size_t k = 0; k < loadings.size(); ++k) {
    std::string name = "clock" + std::to_string(k + 1);
    auto e = normals(rs, "error:" + name, n, 0.0, 1.0);
    double u = std::sqrt(1.0 - loadings[k] * loadings[k]);
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = loadings[k] * f[i] + u * e[i];
    t.add_column(make(name, ColumnType::Continuous, std::move(v)));
  }
  t.add_column(make("factor_true", ColumnType::Continuous, f, true));
  return t;
}

namespace {

struct Moments {
  double mean;
  double sd;
  bool binary = false;
};

// Joint distribution of (period 1, period 2) for one abuse kind.
std::array<double, 4> chain(double p1, double persist, double fresh) {
  return {(1 - p1) * (1 - fresh), (1 - p1) * fresh, p1 * (1 - persist), p1 * persist};  // 00 01 10 11
}

void check(std::vector<MomentCheck>& out, const CohortTable& t, const std::string& name, Moments m) {
  if (!t.has(name)) return;
  auto v = t.values(name);
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  double sd = std::sqrt(ss / (n - 1.0));
  MomentCheck mc{name, "mean", m.mean, mean, 4.0 * m.sd / std::sqrt(n), true};
  mc.tolerance = std::max(mc.tolerance, 1e-12 * std::max(1.0, std::abs(m.mean)));
  mc.pass = std::abs(mean - m.mean) <= mc.tolerance;
  out.push_back(mc);
  if (!m.binary) {
    MomentCheck sc{name, "sd", m.sd, sd, 4.0 * m.sd / std::sqrt(2.0 * n), true};
    sc.tolerance = std::max(sc.tolerance, 1e-12 * std::max(1.0, m.sd));
    sc.pass = std::abs(sd - m.sd) <= sc.tolerance;
    out.push_back(sc);
  }
}

Moments bern(double p) { return {p, std::sqrt(p * (1 - p)), true}; }

void check_clocks(std::vector<MomentCheck>& out, const CohortTable& t, const SimConfig& c,
                  double ea_mean, double ea_var) {
  for (std::size_t k = 0; k < c.clocks.size(); ++k) {
    double l = c.loadings[k];
    check(out, t, c.clocks[k],
          {c.intercepts[k] + l * ea_mean, std::sqrt(l * l * ea_var + c.error_sd[k] * c.error_sd[k])});
  }
}

}  // namespace

std::vector<MomentCheck> moment_self_test(const CohortTable& t, const SimConfig& c) {
  std::vector<MomentCheck> out;
  const double age_var = c.age_sd * c.age_sd;
  check(out, t, "age_years", {c.age_mean, c.age_sd});
  if (c.kind == SimKind::ClockPanel) {
    double var = c.age_slope * c.age_slope * age_var + c.omega_sd * c.omega_sd;
    for (std::size_t j = 0; j < c.covariates.size(); ++j) {
      check(out, t, c.covariates[j], {0.0, 1.0});
      var += c.covariate_effects[j] * c.covariate_effects[j];
    }
    check_clocks(out, t, c, c.age_slope * c.age_mean, var);
  } else if (c.kind == SimKind::Abuse) {
    check(out, t, "female", bern(0.5));
    check(out, t, "mother_age", {28.0, 5.0});
    check(out, t, "first_born", bern(0.45));
    auto cr = chain(c.p_cruelty_early, c.persistence, c.p_cruelty_late_new);
    auto sx = chain(c.p_sex_early, c.persistence, c.p_sex_late_new);
    double pc1 = c.p_cruelty_early, pc2 = cr[1] + cr[3];
    double ps1 = c.p_sex_early, ps2 = sx[1] + sx[3];
    const std::vector<std::pair<std::string, double>> raters{
        {"m", c.miss_mother}, {"p", c.miss_partner}, {"c", c.miss_child}};
    for (const auto& [code, miss] : raters) {
      check(out, t, "cruelty_" + code + "_0_10", bern(pc1 * (1 - miss)));
      check(out, t, "cruelty_" + code + "_11_18", bern(pc2 * (1 - miss)));
    }
    check(out, t, "sexabuse_c_0_10", bern(ps1 * (1 - c.miss_child)));
    check(out, t, "sexabuse_c_11_18", bern(ps2 * (1 - c.miss_child)));
    double all_miss = c.miss_mother * c.miss_partner * c.miss_child;
    check(out, t, "abuse_0_10", bern(1 - (1 - pc1 * (1 - all_miss)) * (1 - ps1 * (1 - c.miss_child))));
    check(out, t, "abuse_11_18", bern(1 - (1 - pc2 * (1 - all_miss)) * (1 - ps2 * (1 - c.miss_child))));

    // Any abuse per period from the two independent kind chains.
    double q1 = 0, q2 = 0, q12 = 0;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        double p = cr[static_cast<std::size_t>(a)] * sx[static_cast<std::size_t>(b)];
        bool e = (a >> 1) || (b >> 1), l = (a & 1) || (b & 1);
        q1 += e ? p : 0;
        q2 += l ? p : 0;
        q12 += (e && l) ? p : 0;
      }
    double early = c.effect_early + (c.mediators ? 2.0 * c.mediator_effect * c.mediator_shift : 0.0);
    double mean = c.age_slope * c.age_mean + early * q1 + c.effect_late * q2;
    double var = c.age_slope * c.age_slope * age_var + c.omega_sd * c.omega_sd +
                 early * early * q1 * (1 - q1) + c.effect_late * c.effect_late * q2 * (1 - q2) +
                 2.0 * early * c.effect_late * (q12 - q1 * q2) +
                 (c.mediators ? 2.0 * c.mediator_effect * c.mediator_effect : 0.0);
    check_clocks(out, t, c, mean, var);
    check(out, t, "bmi", {23.0, 4.0});
    check(out, t, "smoker", bern(0.2));
    check(out, t, "drinker", bern(0.5));
    if (c.mediators) {
      double sd = std::sqrt(1.0 + c.mediator_shift * c.mediator_shift * q1 * (1 - q1));
      check(out, t, "cd8t", {c.mediator_shift * q1, sd});
      check(out, t, "gran", {c.mediator_shift * q1, sd});
    }
  } else {
    check(out, t, "female", bern(0.5));
    check(out, t, "placebo_birth", {3.4, 0.5});
    double wsum = std::accumulate(c.month_weights.begin(), c.month_weights.end(), 0.0);
    double psum = std::accumulate(c.class_probs.begin(), c.class_probs.end(), 0.0);
    double m1 = 0, m2 = 0, treated = 0;
    for (int mo = 1; mo <= 12; ++mo) {
      double pm = c.month_weights[static_cast<std::size_t>(mo - 1)] / wsum;
      int mob = normalize_running(mo, c.cutoff_month);
      double tr = is_treated(mob) ? 1.0 : 0.0;
      treated += pm * tr;
      for (std::size_t k = 0; k < c.class_levels.size(); ++k) {
        double p = pm * c.class_probs[k] / psum;
        double jump = c.tau;
        if (auto it = c.class_jumps.find(c.class_levels[k]); it != c.class_jumps.end()) jump += it->second;
        double f = jump * tr + c.rdd_slope * mob + c.rdd_interaction * tr * mob;
        m1 += p * f;
        m2 += p * f * f;
      }
    }
    check(out, t, "treat", bern(treated));
    double var = m2 - m1 * m1 + c.outcome_sd * c.outcome_sd;
    check(out, t, "outcome", {m1, std::sqrt(var)});
    if (c.rdd_clocks)
      check_clocks(out, t, c, c.age_slope * c.age_mean + m1, c.age_slope * c.age_slope * age_var + var);
  }
  return out;
}

}  // namespace mega
