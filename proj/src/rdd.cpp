#include "mega/rdd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"

namespace mega {

int normalize_running(int month, int cutoff_month) {
  if (month < 1 || month > 12) throw InputError("month " + std::to_string(month) + " outside 1-12");
  if (cutoff_month < 1 || cutoff_month > 12) throw InputError("cutoff month outside 1-12");
  int d = ((month - cutoff_month) % 12 + 12) % 12;
  return d >= 6 ? d - 12 : d;
}

std::string month_name(int month) {
  static const std::array<const char*, 12> names{"January", "February", "March",     "April",
                                                 "May",     "June",     "July",      "August",
                                                 "September", "October", "November", "December"};
  if (month < 1 || month > 12) throw InputError("month outside 1-12");
  return names[static_cast<std::size_t>(month - 1)];
}

std::string window_label(int bandwidth, int cutoff_month) {
  auto wrap = [](int m) { return ((m - 1) % 12 + 12) % 12 + 1; };
  return month_name(wrap(cutoff_month - bandwidth)) + " - " + month_name(wrap(cutoff_month + bandwidth - 1));
}

namespace {

struct Sample {
  std::vector<std::size_t> rows;
  std::vector<int> mob;
};

Sample window_sample(const RddSpec& spec, const CohortTable& data,
                     std::span<const std::string> extra_columns) {
  if (spec.bandwidth < 1 || spec.bandwidth > 6)
    throw InputError("bandwidth must be between 1 and 6 months");
  const Column& month = data.column(spec.month_column);
  const Column& y = data.column(spec.outcome);
  std::vector<const Column*> need{&y};
  for (const auto& c : spec.controls) need.push_back(&data.column(c));
  for (const auto& c : extra_columns) need.push_back(&data.column(c));
  Sample s;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    double m = month.values[i];
    if (is_missing(m)) continue;
    if (m != std::floor(m) || m < 1 || m > 12)
      throw InputError("'" + spec.month_column + "' has value " + format_number(m) + " outside 1-12");
    int mob = normalize_running(static_cast<int>(m), spec.cutoff_month);
    if (!in_window(mob, spec.bandwidth)) continue;
    if (std::any_of(need.begin(), need.end(), [&](const Column* c) { return is_missing(c->values[i]); }))
      continue;
    s.rows.push_back(i);
    s.mob.push_back(mob);
  }
  auto treated = std::count_if(s.mob.begin(), s.mob.end(), is_treated);
  if (treated == 0) throw InputError("no observations on the treated side within the bandwidth");
  if (treated == static_cast<long>(s.mob.size()))
    throw InputError("no observations on the untreated side within the bandwidth");
  return s;
}

Eigen::VectorXd outcome_vector(const CohortTable& data, const std::string& name,
                               const std::vector<std::size_t>& rows) {
  const Column& y = data.column(name);
  Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) v(static_cast<Eigen::Index>(i)) = y.values[rows[i]];
  return v;
}

RddFit fit_sample(const RddSpec& spec, const CohortTable& data, const Sample& s) {
  const auto n = static_cast<Eigen::Index>(s.rows.size());
  Design controls = build_design(data, spec.controls, s.rows, false);
  Eigen::MatrixXd x(n, 4 + controls.x.cols());
  std::vector<std::string> names{kInterceptName, kTreatName, kMobName, kInteractionName};
  for (Eigen::Index i = 0; i < n; ++i) {
    double m = s.mob[static_cast<std::size_t>(i)];
    double t = is_treated(s.mob[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    x(i, 0) = 1.0;
    x(i, 1) = t;
    x(i, 2) = m;
    x(i, 3) = t * m;
  }
  x.rightCols(controls.x.cols()) = controls.x;
  names.insert(names.end(), controls.names.begin(), controls.names.end());
  RddFit fit;
  fit.spec = spec;
  fit.regression = ols(x, outcome_vector(data, spec.outcome, s.rows), names, SeType::HC1, true);
  fit.n = n;
  fit.n_treated = std::count_if(s.mob.begin(), s.mob.end(), is_treated);
  fit.n_control = n - fit.n_treated;
  return fit;
}

}  // namespace

RddFit rdd_fit(const RddSpec& spec, const CohortTable& data) {
  return fit_sample(spec, data, window_sample(spec, data, {}));
}

RddFit rdd_heterogeneity(const RddSpec& spec, const CohortTable& data, std::string_view class_column,
                         bool split) {
  const std::string cls(class_column);
  const Column& col = data.column(cls);
  if (col.type != ColumnType::Categorical && col.type != ColumnType::Binary)
    throw InputError("class column '" + cls + "' must be categorical");
  if (std::find(spec.controls.begin(), spec.controls.end(), cls) != spec.controls.end())
    throw InputError("class column '" + cls + "' is also listed as a control");
  std::vector<std::string> extra{cls};
  Sample s = window_sample(spec, data, extra);

  auto level_name = [&](int code) {
    return col.type == ColumnType::Categorical ? col.levels[static_cast<std::size_t>(code)] : std::to_string(code);
  };
  std::set<int> present;
  for (auto r : s.rows) present.insert(static_cast<int>(col.values[r]));
  if (present.size() < 2) throw InputError("class column '" + cls + "' has fewer than 2 levels in the window");
  std::vector<int> levels(present.begin(), present.end());
  std::vector<ClassEffect> effects;
  for (int level : levels) {
    ClassEffect e;
    e.level = level_name(level);
    for (std::size_t i = 0; i < s.rows.size(); ++i)
      if (static_cast<int>(col.values[s.rows[i]]) == level) (is_treated(s.mob[i]) ? e.n_treated : e.n_control)++;
    if (e.n_treated == 0)
      throw InputError("class level '" + e.level + "' has no observations on the treated side");
    if (e.n_control == 0)
      throw InputError("class level '" + e.level + "' has no observations on the untreated side");
    effects.push_back(e);
  }

  if (split) {
    RddFit pooled = fit_sample(spec, data, s);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      Sample sub;
      for (std::size_t i = 0; i < s.rows.size(); ++i)
        if (static_cast<int>(col.values[s.rows[i]]) == levels[l]) {
          sub.rows.push_back(s.rows[i]);
          sub.mob.push_back(s.mob[i]);
        }
      RddFit f = fit_sample(spec, data, sub);
      effects[l].estimate = f.treat();
      effects[l].std_error = f.treat_se();
      effects[l].t_stat = f.regression.t_stats(f.regression.index_of(kTreatName));
      effects[l].p_value = f.treat_p();
    }
    pooled.class_column = cls;
    pooled.classes = std::move(effects);
    pooled.notes.push_back("class effects from separate regressions per level");
    return pooled;
  }

  const auto n = static_cast<Eigen::Index>(s.rows.size());
  Design controls = build_design(data, spec.controls, s.rows, false);
  const auto n_extra = static_cast<Eigen::Index>(levels.size() - 1);
  Eigen::MatrixXd x(n, 4 + controls.x.cols() + 4 * n_extra);
  std::vector<std::string> names{kInterceptName, kTreatName, kMobName, kInteractionName};
  names.insert(names.end(), controls.names.begin(), controls.names.end());
  for (Eigen::Index l = 0; l < n_extra; ++l) {
    std::string lv = cls + "=" + level_name(levels[static_cast<std::size_t>(l + 1)]);
    names.push_back(lv);
    names.push_back(lv + "#" + kTreatName);
    names.push_back(lv + "#" + kMobName);
    names.push_back(lv + "#" + kInteractionName);
  }
  const Eigen::Index base = 4 + controls.x.cols();
  x.setZero();
  for (Eigen::Index i = 0; i < n; ++i) {
    double m = s.mob[static_cast<std::size_t>(i)];
    double t = is_treated(s.mob[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    x(i, 0) = 1.0;
    x(i, 1) = t;
    x(i, 2) = m;
    x(i, 3) = t * m;
    int level = static_cast<int>(col.values[s.rows[static_cast<std::size_t>(i)]]);
    for (Eigen::Index l = 0; l < n_extra; ++l) {
      if (level != levels[static_cast<std::size_t>(l + 1)]) continue;
      x(i, base + 4 * l) = 1.0;
      x(i, base + 4 * l + 1) = t;
      x(i, base + 4 * l + 2) = m;
      x(i, base + 4 * l + 3) = t * m;
    }
  }
  x.middleCols(4, controls.x.cols()) = controls.x;

  RddFit fit;
  fit.spec = spec;
  fit.class_column = cls;
  fit.regression = ols(x, outcome_vector(data, spec.outcome, s.rows), names, SeType::HC1, true);
  fit.n = n;
  fit.n_treated = std::count_if(s.mob.begin(), s.mob.end(), is_treated);
  fit.n_control = n - fit.n_treated;
  const auto& r = fit.regression;
  const Eigen::Index k = r.coefficients.size();
  for (std::size_t l = 0; l < levels.size(); ++l) {
    Eigen::VectorXd a = Eigen::VectorXd::Zero(k);
    a(1) = 1.0;
    if (l > 0) a(base + 4 * static_cast<Eigen::Index>(l - 1) + 1) = 1.0;
    auto& e = effects[l];
    e.estimate = a.dot(r.coefficients);
    e.std_error = std::sqrt(std::max(a.dot(r.covariance * a), 0.0));
    e.t_stat = e.estimate / e.std_error;
    e.p_value = t_p_value(e.t_stat, static_cast<double>(r.df_resid));
  }
  Eigen::MatrixXd restriction = Eigen::MatrixXd::Zero(n_extra, k);
  for (Eigen::Index l = 0; l < n_extra; ++l) restriction(l, base + 4 * l + 1) = 1.0;
  fit.equality = wald_test(r, restriction);
  fit.classes = std::move(effects);
  return fit;
}

RddFit placebo_outcome(const RddSpec& spec, const CohortTable& data, std::string_view placebo_column) {
  const Column& c = data.column(placebo_column);
  if (c.missing_count() == c.values.size())
    throw InputError("placebo column '" + std::string(placebo_column) + "' is empty");
  RddSpec p = spec;
  p.outcome = std::string(placebo_column);
  RddFit fit = rdd_fit(p, data);
  fit.placebo = true;
  fit.notes.push_back("placebo outcome fixed before school entry; a null effect is expected");
  return fit;
}

namespace {

std::string pad_left(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

const std::array<std::pair<const char*, const char*>, 3> kRows{
    {{kTreatName, "Treat"}, {kMobName, "MoB"}, {kInteractionName, "Treat * MoB"}}};

}  // namespace

std::string rdd_table_text(std::span<const RddColumn> columns, std::string_view title,
                           std::string_view notes) {
  std::ostringstream os;
  const std::size_t label_w = 22;
  std::size_t cell_w = 16;
  for (const auto& c : columns) cell_w = std::max(cell_w, c.label.size() + 6);
  std::size_t panels = 0;
  for (const auto& c : columns) panels = std::max(panels, c.panels.size());
  if (!title.empty()) os << title << "\n";
  os << std::string(label_w, ' ');
  for (std::size_t j = 0; j < columns.size(); ++j)
    os << pad_left("(" + std::to_string(j + 1) + ") " + columns[j].label, cell_w);
  os << "\n";
  for (std::size_t p = 0; p < panels; ++p) {
    const RddFit* any = nullptr;
    for (const auto& c : columns)
      if (p < c.panels.size()) any = &c.panels[p];
    std::string panel_label(1, static_cast<char>('A' + p));
    os << "Panel " << panel_label << ": " << window_label(any->spec.bandwidth, any->spec.cutoff_month)
       << "\n";
    for (const auto& [term, label] : kRows) {
      os << pad_right(label, label_w);
      for (const auto& c : columns) {
        std::string cell;
        if (p < c.panels.size()) {
          const auto& r = c.panels[p].regression;
          auto j = r.index_of(term);
          cell = format_fixed(r.coefficients(j), 3) + stars(r.p_values(j));
        }
        os << pad_left(cell, cell_w);
      }
      os << "\n" << std::string(label_w, ' ');
      for (const auto& c : columns) {
        std::string cell;
        if (p < c.panels.size()) {
          const auto& r = c.panels[p].regression;
          cell = "(" + format_fixed(r.std_errors(r.index_of(term)), 3) + ")";
        }
        os << pad_left(cell, cell_w);
      }
      os << "\n";
    }
    os << pad_right("Observations", label_w);
    for (const auto& c : columns)
      os << pad_left(p < c.panels.size() ? std::to_string(c.panels[p].n) : "", cell_w);
    os << "\n" << pad_right("Adjusted R-squared", label_w);
    for (const auto& c : columns)
      os << pad_left(p < c.panels.size() ? format_fixed(c.panels[p].regression.adj_r2, 3) : "", cell_w);
    os << "\n";
  }
  if (!notes.empty()) os << "\n" << notes << "\n";
  return os.str();
}

std::string rdd_table_csv(std::span<const RddColumn> columns) {
  std::string out = csv_line({"column", "panel", "window", "bandwidth", "term", "estimate",
                              "std_error", "p_value", "stars", "n", "adj_r2", "placebo"});
  for (const auto& c : columns) {
    for (std::size_t p = 0; p < c.panels.size(); ++p) {
      const auto& f = c.panels[p];
      for (const auto& [term, label] : kRows) {
        auto j = f.regression.index_of(term);
        out += csv_line({c.label, std::string(1, static_cast<char>('A' + p)),
                         window_label(f.spec.bandwidth, f.spec.cutoff_month),
                         std::to_string(f.spec.bandwidth), term,
                         format_number(f.regression.coefficients(j)),
                         format_number(f.regression.std_errors(j)),
                         format_number(f.regression.p_values(j)), stars(f.regression.p_values(j)),
                         std::to_string(f.n), format_number(f.regression.adj_r2),
                         f.placebo ? "1" : "0"});
      }
    }
  }
  return out;
}

std::string class_effects_csv(std::span<const LabeledRdd> fits, double level) {
  std::string out = csv_line({"outcome", "class", "estimate", "std_error", "ci_low", "ci_high",
                              "level", "p_value", "n_treated", "n_control"});
  for (const auto& lf : fits) {
    double crit = t_critical(level, static_cast<double>(lf.fit.regression.df_resid));
    for (const auto& e : lf.fit.classes) {
      out += csv_line({lf.label, e.level, format_number(e.estimate), format_number(e.std_error),
                       format_number(e.estimate - crit * e.std_error),
                       format_number(e.estimate + crit * e.std_error), format_number(level),
                       format_number(e.p_value), std::to_string(e.n_treated),
                       std::to_string(e.n_control)});
    }
  }
  return out;
}

}  // namespace mega
