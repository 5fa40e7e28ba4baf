#include "mega/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "mega/error.hpp"
#include "mega/io.hpp"

namespace mega {

std::string_view to_string(SeType t) { return t == SeType::HC1 ? "hc1" : "classical"; }

Eigen::Index RegressionFit::index_of(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw InputError("regressor '" + std::string(name) + "' not in fit");
  return static_cast<Eigen::Index>(it - names.begin());
}

double t_p_value(double t, double df) {
  if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
  if (std::isinf(t)) return 0.0;
  double a = std::abs(t);
  if (df <= 0) {
    boost::math::normal_distribution<double> z;
    return 2.0 * boost::math::cdf(boost::math::complement(z, a));
  }
  boost::math::students_t_distribution<double> dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, a));
}

double t_critical(double level, double df) {
  double q = 0.5 + level / 2.0;
  if (df <= 0) {
    boost::math::normal_distribution<double> z;
    return boost::math::quantile(z, q);
  }
  boost::math::students_t_distribution<double> dist(df);
  return boost::math::quantile(dist, q);
}

WaldTest wald_test(const RegressionFit& fit, const Eigen::MatrixXd& r) {
  if (r.cols() != fit.coefficients.size())
    throw InputError("restriction matrix has the wrong number of columns");
  Eigen::VectorXd rb = r * fit.coefficients;
  Eigen::MatrixXd middle = r * fit.covariance * r.transpose();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(middle);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0).all())
    throw NumericalError("Wald test: restriction covariance is singular");
  WaldTest w;
  w.df1 = static_cast<int>(r.rows());
  w.df2 = static_cast<double>(fit.df_resid);
  w.statistic = rb.dot(ldlt.solve(rb)) / w.df1;
  boost::math::fisher_f_distribution<double> f(w.df1, std::max(w.df2, 1.0));
  w.p_value = boost::math::cdf(boost::math::complement(f, w.statistic));
  return w;
}

Design build_design(const CohortTable& table, std::span<const std::string> regressors,
                    std::span<const std::size_t> rows, bool intercept) {
  struct Part {
    const Column* col;
    std::vector<int> levels;  // categorical codes kept as dummies
  };
  std::vector<Part> parts;
  Eigen::Index width = intercept ? 1 : 0;
  for (const auto& name : regressors) {
    const Column& c = table.column(name);
    Part p{&c, {}};
    if (c.type == ColumnType::Categorical) {
      std::set<int> present;
      for (auto r : rows)
        if (!is_missing(c.values[r])) present.insert(static_cast<int>(c.values[r]));
      p.levels.assign(present.begin(), present.end());
      if (!p.levels.empty()) p.levels.erase(p.levels.begin());  // reference level
      width += static_cast<Eigen::Index>(p.levels.size());
    } else {
      width += 1;
    }
    parts.push_back(std::move(p));
  }
  Design d;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), width);
  Eigen::Index col = 0;
  if (intercept) {
    d.x.col(col++).setOnes();
    d.names.emplace_back(kInterceptName);
  }
  for (const auto& p : parts) {
    if (p.col->type == ColumnType::Categorical) {
      for (int level : p.levels) {
        for (std::size_t i = 0; i < rows.size(); ++i)
          d.x(static_cast<Eigen::Index>(i), col) = p.col->values[rows[i]] == level ? 1.0 : 0.0;
        d.names.push_back(p.col->name + "=" + p.col->levels[static_cast<std::size_t>(level)]);
        ++col;
      }
    } else {
      for (std::size_t i = 0; i < rows.size(); ++i)
        d.x(static_cast<Eigen::Index>(i), col) = p.col->values[rows[i]];
      d.names.push_back(p.col->name);
      ++col;
    }
  }
  return d;
}

namespace {

void finish_inference(RegressionFit& fit) {
  const Eigen::Index k = fit.coefficients.size();
  fit.std_errors = fit.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  fit.t_stats.resize(k);
  fit.p_values.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    double b = fit.coefficients(j), se = fit.std_errors(j);
    double t = se > 0 ? b / se : (b == 0 ? 0.0 : std::copysign(INFINITY, b));
    fit.t_stats(j) = t;
    fit.p_values(j) = t_p_value(t, static_cast<double>(fit.df_resid));
  }
}

}  // namespace

RegressionFit ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<std::string> names,
                  SeType se_type, bool has_intercept) {
  const Eigen::Index n = x.rows(), k = x.cols();
  if (y.size() != n) throw InputError("outcome length differs from design rows");
  if (static_cast<Eigen::Index>(names.size()) != k) throw InputError("regressor names do not match design");
  if (n <= k)
    throw InputError("too few observations (N=" + std::to_string(n) + ") for " + std::to_string(k) +
                     " regressors");
  if (!x.allFinite() || !y.allFinite()) throw InputError("design or outcome has missing values");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  qr.setThreshold(1e-10);
  qr.compute(x);
  if (qr.rank() < k) {
    auto culprit = static_cast<std::size_t>(qr.colsPermutation().indices()(qr.rank()));
    throw NumericalError("design matrix is rank deficient: '" + names[culprit] +
                         "' is collinear with other regressors");
  }

  RegressionFit fit;
  fit.names = std::move(names);
  fit.se_type = se_type;
  fit.n = n;
  fit.df_resid = n - k;
  fit.coefficients = qr.solve(y);
  fit.residuals = y - x * fit.coefficients;

  Eigen::MatrixXd r = qr.matrixR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
  Eigen::MatrixXd rinv = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd xtx_inv_perm = rinv * rinv.transpose();
  const auto& perm = qr.colsPermutation();
  Eigen::MatrixXd xtx_inv = perm * xtx_inv_perm * perm.transpose();

  double ssr = fit.residuals.squaredNorm();
  if (se_type == SeType::Classical) {
    fit.covariance = (ssr / static_cast<double>(fit.df_resid)) * xtx_inv;
  } else {
    Eigen::MatrixXd meat = x.transpose() * fit.residuals.cwiseAbs2().asDiagonal() * x;
    fit.covariance = xtx_inv * meat * xtx_inv *
                     (static_cast<double>(n) / static_cast<double>(fit.df_resid));
  }
  fit.covariance = 0.5 * (fit.covariance + fit.covariance.transpose()).eval();

  double sst = has_intercept ? (y.array() - y.mean()).square().sum() : y.squaredNorm();
  double scale = y.squaredNorm();
  if (sst <= 1e-24 * std::max(scale, 1e-300) || sst == 0.0) {
    fit.r2 = 0.0;
    fit.warnings.push_back("outcome has no variation; R-squared set to 0");
  } else {
    fit.r2 = 1.0 - ssr / sst;
  }
  double dn = static_cast<double>(n), dk = static_cast<double>(k);
  fit.adj_r2 = has_intercept ? 1.0 - (1.0 - fit.r2) * (dn - 1.0) / (dn - dk)
                             : 1.0 - (1.0 - fit.r2) * dn / (dn - dk);
  finish_inference(fit);
  return fit;
}

RegressionFit ols_fit(const LinearModelSpec& spec, const CohortTable& data) {
  const Column& y = data.column(spec.outcome);
  if (y.type == ColumnType::Categorical)
    throw InputError("outcome '" + spec.outcome + "' is categorical");
  for (std::size_t i = 0; i < spec.regressors.size(); ++i) {
    if (spec.regressors[i] == spec.outcome)
      throw InputError("'" + spec.outcome + "' is both outcome and regressor");
    for (std::size_t j = i + 1; j < spec.regressors.size(); ++j)
      if (spec.regressors[i] == spec.regressors[j])
        throw InputError("regressor '" + spec.regressors[i] + "' listed twice");
  }
  std::vector<const Column*> cols{&y};
  for (const auto& r : spec.regressors) cols.push_back(&data.column(r));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (spec.filter && !spec.filter(data, i)) continue;
    if (std::any_of(cols.begin(), cols.end(), [&](const Column* c) { return is_missing(c->values[i]); }))
      continue;
    rows.push_back(i);
  }
  Design d = build_design(data, spec.regressors, rows, spec.intercept);
  Eigen::VectorXd yv(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) yv(static_cast<Eigen::Index>(i)) = y.values[rows[i]];
  return ols(d.x, yv, std::move(d.names), spec.se_type, spec.intercept);
}

Eigen::VectorXd age_acceleration(const Eigen::VectorXd& scores, const Eigen::VectorXd& age) {
  if (scores.size() != age.size()) throw InputError("scores and ages differ in length");
  if (scores.size() < 2) throw InputError("age acceleration needs at least 2 subjects");
  Eigen::VectorXd a = age.array() - age.mean();
  double saa = a.squaredNorm();
  if (!(saa > 0.0) || (a.cwiseAbs().maxCoeff() == 0.0))
    throw InputError("chronological age is constant; cannot residualize");
  Eigen::VectorXd s = scores.array() - scores.mean();
  double slope = a.dot(s) / saa;
  Eigen::VectorXd res = s - slope * a;
  // Remove the rounding residue so the mean is zero to machine precision.
  res.array() -= res.mean();
  return res;
}

RegressionFit constrained_sur_gls(const Eigen::MatrixXd& clocks, const Eigen::MatrixXd& x,
                                  std::vector<std::string> names, GlsCovariance covariance) {
  const Eigen::Index n = clocks.rows(), k = clocks.cols(), p = x.cols();
  if (x.rows() != n) throw InputError("clock panel and design differ in rows");
  if (k < 1) throw InputError("need at least one clock");
  if (static_cast<Eigen::Index>(names.size()) != p) throw InputError("regressor names do not match design");
  if (n <= p) throw InputError("too few observations for the design");

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  qr.setThreshold(1e-10);
  qr.compute(x);
  if (qr.rank() < p) {
    auto culprit = static_cast<std::size_t>(qr.colsPermutation().indices()(qr.rank()));
    throw NumericalError("design matrix is rank deficient: '" + names[culprit] +
                         "' is collinear with other regressors");
  }

  Eigen::MatrixXd basis = clocks;
  if (covariance == GlsCovariance::Residuals) basis = clocks - x * qr.solve(clocks);
  Eigen::MatrixXd centered = basis.rowwise() - basis.colwise().mean();
  Eigen::MatrixXd m = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw NumericalError("cross-equation covariance is not positive definite");
  Eigen::MatrixXd m_inv = llt.solve(Eigen::MatrixXd::Identity(k, k));

  // Stacked system: Z = 1_K (x) X, c = vec(C), Omega^-1 = M^-1 (x) I_N.
  const Eigen::Index nk = n * k;
  Eigen::MatrixXd z(nk, p);
  Eigen::VectorXd c(nk);
  for (Eigen::Index e = 0; e < k; ++e) {
    z.middleRows(e * n, n) = x;
    c.segment(e * n, n) = clocks.col(e);
  }
  Eigen::MatrixXd omega_inv_z(nk, p);
  Eigen::VectorXd omega_inv_c(nk);
  if (nk <= 2000) {
    Eigen::MatrixXd omega_inv = Eigen::MatrixXd::Zero(nk, nk);
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b < k; ++b)
        omega_inv.block(a * n, b * n, n, n).diagonal().setConstant(m_inv(a, b));
    omega_inv_z = omega_inv * z;
    omega_inv_c = omega_inv * c;
  } else {
    // Same products without materializing the NK x NK matrix.
    for (Eigen::Index a = 0; a < k; ++a) {
      omega_inv_z.middleRows(a * n, n).setZero();
      omega_inv_c.segment(a * n, n).setZero();
      for (Eigen::Index b = 0; b < k; ++b) {
        omega_inv_z.middleRows(a * n, n) += m_inv(a, b) * z.middleRows(b * n, n);
        omega_inv_c.segment(a * n, n) += m_inv(a, b) * c.segment(b * n, n);
      }
    }
  }
  Eigen::MatrixXd a = z.transpose() * omega_inv_z;
  Eigen::VectorXd rhs = z.transpose() * omega_inv_c;
  Eigen::LLT<Eigen::MatrixXd> a_llt(a);
  if (a_llt.info() != Eigen::Success) throw NumericalError("GLS normal matrix is singular");

  RegressionFit fit;
  fit.names = std::move(names);
  fit.se_type = SeType::Classical;
  fit.coefficients = a_llt.solve(rhs);
  fit.covariance = a_llt.solve(Eigen::MatrixXd::Identity(p, p));
  fit.residuals = c - z * fit.coefficients;
  fit.n = n;
  fit.df_resid = n - p;
  bool has_intercept = false;
  for (Eigen::Index j = 0; j < p; ++j)
    if ((x.col(j).array() == 1.0).all()) has_intercept = true;
  double ssr = fit.residuals.squaredNorm();
  double sst = has_intercept ? (c.array() - c.mean()).square().sum() : c.squaredNorm();
  fit.r2 = sst > 0 ? 1.0 - ssr / sst : 0.0;
  double dn = static_cast<double>(nk), dp = static_cast<double>(p);
  fit.adj_r2 = 1.0 - (1.0 - fit.r2) * (has_intercept ? (dn - 1.0) : dn) / (dn - dp);
  finish_inference(fit);
  return fit;
}

namespace {

void require_columns(const CohortTable& table, std::span<const std::string> cols, const char* what) {
  for (const auto& c : cols)
    if (!table.has(c)) throw InputError(std::string("missing required ") + what + " '" + c + "'");
}

}  // namespace

LinearModelSpec build_outcome_model(const CohortTable& table, const OutcomeModelColumns& cols) {
  require_columns(table, std::span(&cols.outcome, 1), "outcome");
  require_columns(table, std::span(&cols.mega, 1), "MEGA column");
  if (cols.include_health) require_columns(table, cols.health, "health control");
  require_columns(table, cols.controls, "control");
  if (table.column(cols.outcome).type != ColumnType::Binary)
    throw InputError("outcome '" + cols.outcome + "' must be binary (linear probability model)");
  LinearModelSpec spec;
  spec.outcome = cols.outcome;
  spec.regressors.push_back(cols.mega);
  if (cols.include_health)
    spec.regressors.insert(spec.regressors.end(), cols.health.begin(), cols.health.end());
  spec.regressors.insert(spec.regressors.end(), cols.controls.begin(), cols.controls.end());
  spec.se_type = SeType::Classical;
  return spec;
}

LinearModelSpec build_exposure_model(const CohortTable& table, const ExposureModelColumns& cols) {
  require_columns(table, std::span(&cols.mega, 1), "MEGA column");
  require_columns(table, cols.exposures, "exposure");
  require_columns(table, cols.controls, "control");
  require_columns(table, cols.extra, "covariate");
  if (cols.exposures.size() != 2 && cols.exposures.size() != 4)
    throw InputError("exposure regression takes 2 (aggregate) or 4 (disaggregated) indicators");
  for (const auto& e : cols.exposures)
    if (table.column(e).type != ColumnType::Binary)
      throw InputError("exposure '" + e + "' must be binary");
  for (std::size_t i = 0; i < cols.exposures.size(); ++i) {
    for (std::size_t j = i + 1; j < cols.exposures.size(); ++j) {
      const auto& a = table.column(cols.exposures[i]).values;
      const auto& b = table.column(cols.exposures[j]).values;
      bool same = cols.exposures[i] == cols.exposures[j] ||
                  std::equal(a.begin(), a.end(), b.begin(), [](double u, double v) {
                    return (is_missing(u) && is_missing(v)) || u == v;
                  });
      if (same)
        throw InputError("exposure indicators '" + cols.exposures[i] + "' and '" +
                         cols.exposures[j] + "' are identical");
    }
  }
  LinearModelSpec spec;
  spec.outcome = cols.mega;
  spec.regressors = cols.exposures;
  spec.regressors.insert(spec.regressors.end(), cols.controls.begin(), cols.controls.end());
  spec.regressors.insert(spec.regressors.end(), cols.extra.begin(), cols.extra.end());
  spec.se_type = SeType::Classical;
  return spec;
}

std::string stars(double p) {
  if (std::isnan(p)) return {};
  if (p < 0.01) return "***";
  if (p < 0.05) return "**";
  if (p < 0.1) return "*";
  return {};
}

std::string coefficient_cell(double b, double se, double p, int decimals) {
  return format_fixed(b, decimals) + stars(p) + " (" + format_fixed(se, decimals) + ")";
}

namespace {

std::string pad_left(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

std::string pad_right(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

bool has_regressor(const RegressionFit& f, const std::string& name) {
  return std::find(f.names.begin(), f.names.end(), name) != f.names.end();
}

}  // namespace

std::string regression_table_text(std::span<const TableColumn> columns,
                                  std::span<const TableRow> rows, std::string_view title,
                                  std::string_view notes) {
  std::size_t label_w = 20;
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size() + 2);
  std::size_t cell_w = 14;
  for (const auto& c : columns) cell_w = std::max(cell_w, c.label.size() + 6);

  std::ostringstream os;
  if (!title.empty()) os << title << "\n";
  os << std::string(label_w, ' ');
  for (std::size_t j = 0; j < columns.size(); ++j)
    os << pad_left("(" + std::to_string(j + 1) + ") " + columns[j].label, cell_w);
  os << "\n";
  for (const auto& r : rows) {
    os << pad_right(r.label, label_w);
    for (const auto& c : columns) {
      std::string cell = ".";
      if (has_regressor(c.fit, r.regressor)) {
        auto j = c.fit.index_of(r.regressor);
        cell = format_fixed(c.fit.coefficients(j), 3) + stars(c.fit.p_values(j));
      }
      os << pad_left(cell, cell_w);
    }
    os << "\n" << std::string(label_w, ' ');
    for (const auto& c : columns) {
      std::string cell;
      if (has_regressor(c.fit, r.regressor))
        cell = "(" + format_fixed(c.fit.std_errors(c.fit.index_of(r.regressor)), 3) + ")";
      os << pad_left(cell, cell_w);
    }
    os << "\n";
  }
  os << pad_right("Observations", label_w);
  for (const auto& c : columns) os << pad_left(std::to_string(c.fit.n), cell_w);
  os << "\n" << pad_right("Adjusted R-squared", label_w);
  for (const auto& c : columns) os << pad_left(format_fixed(c.fit.adj_r2, 3), cell_w);
  os << "\n";
  if (!notes.empty()) os << "\n" << notes << "\n";
  return os.str();
}

std::string regression_table_csv(std::span<const TableColumn> columns,
                                 std::span<const TableRow> rows) {
  std::string out = csv_line({"column", "regressor", "estimate", "std_error", "t", "p_value",
                              "stars", "se_type", "n", "adj_r2"});
  for (const auto& c : columns) {
    for (const auto& r : rows) {
      if (!has_regressor(c.fit, r.regressor)) continue;
      auto j = c.fit.index_of(r.regressor);
      out += csv_line({c.label, r.regressor, format_number(c.fit.coefficients(j)),
                       format_number(c.fit.std_errors(j)), format_number(c.fit.t_stats(j)),
                       format_number(c.fit.p_values(j)), stars(c.fit.p_values(j)),
                       std::string(to_string(c.fit.se_type)), std::to_string(c.fit.n),
                       format_number(c.fit.adj_r2)});
    }
  }
  return out;
}

std::string effect_plot_csv(std::span<const TableColumn> columns, std::span<const TableRow> rows,
                            double level) {
  std::string out =
      csv_line({"column", "regressor", "estimate", "ci_low", "ci_high", "level"});
  for (const auto& c : columns) {
    double crit = t_critical(level, static_cast<double>(c.fit.df_resid));
    for (const auto& r : rows) {
      if (!has_regressor(c.fit, r.regressor)) continue;
      auto j = c.fit.index_of(r.regressor);
      double b = c.fit.coefficients(j), se = c.fit.std_errors(j);
      out += csv_line({c.label, r.regressor, format_number(b), format_number(b - crit * se),
                       format_number(b + crit * se), format_number(level)});
    }
  }
  return out;
}

}  // namespace mega
