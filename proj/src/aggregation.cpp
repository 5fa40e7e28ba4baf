#include "mega/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mega/error.hpp"
#include "mega/io.hpp"

namespace mega {

ClockPanel::ClockPanel(std::vector<std::string> names, Eigen::MatrixXd data, Eigen::VectorXd age,
                       std::vector<std::string> ids)
    : clock_names(std::move(names)),
      readings(std::move(data)),
      age_years(std::move(age)),
      subject_ids(std::move(ids)) {
  if (static_cast<Eigen::Index>(clock_names.size()) != readings.cols())
    throw InputError("clock panel: names do not match reading columns");
  if (readings.cols() < 2) throw InputError("clock panel needs at least 2 clocks");
  if (readings.rows() <= readings.cols())
    throw InputError("clock panel needs more subjects than clocks (N=" +
                     std::to_string(readings.rows()) + ", K=" + std::to_string(readings.cols()) +
                     ")");
  if (!readings.allFinite()) throw InputError("clock panel has missing readings");
  if (age_years.size() != 0 && age_years.size() != readings.rows())
    throw InputError("clock panel: age vector length differs from N");
  if (!subject_ids.empty() && static_cast<Eigen::Index>(subject_ids.size()) != readings.rows())
    throw InputError("clock panel: id count differs from N");
  for (std::size_t i = 0; i < clock_names.size(); ++i)
    for (std::size_t j = i + 1; j < clock_names.size(); ++j)
      if (clock_names[i] == clock_names[j])
        throw InputError("clock panel: duplicate clock '" + clock_names[i] + "'");
}

ClockPanel ClockPanel::from_table(const CohortTable& table, std::span<const std::string> clocks,
                                  std::string_view age_column) {
  Eigen::VectorXd age;
  if (!age_column.empty() && table.has(age_column)) age = table.vector(age_column);
  return ClockPanel({clocks.begin(), clocks.end()}, table.matrix(clocks), std::move(age),
                    table.ids());
}

std::size_t ClockPanel::index_of(std::string_view clock) const {
  auto it = std::find(clock_names.begin(), clock_names.end(), clock);
  if (it == clock_names.end()) throw InputError("clock '" + std::string(clock) + "' not in panel");
  return static_cast<std::size_t>(it - clock_names.begin());
}

ClockPanel ClockPanel::without(std::string_view clock) const {
  std::size_t drop = index_of(clock);
  if (k() - 1 < 2)
    throw InputError("leaving out '" + std::string(clock) + "' would leave fewer than 2 clocks");
  std::vector<std::string> names;
  Eigen::MatrixXd data(n(), k() - 1);
  Eigen::Index c = 0;
  for (Eigen::Index j = 0; j < k(); ++j) {
    if (static_cast<std::size_t>(j) == drop) continue;
    names.push_back(clock_names[static_cast<std::size_t>(j)]);
    data.col(c++) = readings.col(j);
  }
  return ClockPanel(std::move(names), std::move(data), age_years, subject_ids);
}

namespace {

void spectrum(const Eigen::MatrixXd& m, double& lo, double& hi) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  lo = es.eigenvalues().minCoeff();
  hi = es.eigenvalues().maxCoeff();
}

Eigen::VectorXd descending_eigenvalues(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().reverse();
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& m, const Eigen::VectorXd& rhs) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance matrix is not positive definite");
  return llt.solve(rhs);
}

void require_invertible(const CovarianceEstimate& cov) {
  if (!cov.positive_definite)
    throw NumericalError("clock covariance matrix is singular (condition number inf)");
  if (cov.condition_number >= kMaxConditionNumber) {
    std::ostringstream os;
    os << "clock covariance matrix is ill-conditioned (condition number " << cov.condition_number
       << ")";
    throw NumericalError(os.str());
  }
}

MegaWeights normalized(MegaMethod method, const std::vector<std::string>& names,
                       Eigen::VectorXd raw, double cond) {
  double total = raw.sum();
  if (std::abs(total) < 1e-10) throw NumericalError("degenerate normalization: weights sum to 0");
  MegaWeights w;
  w.method = method;
  w.clock_names = names;
  w.normalized_weights = raw / total;
  w.raw_weights = std::move(raw);
  w.condition_number = cond;
  return w;
}

}  // namespace

CovarianceEstimate sample_covariance(const ClockPanel& panel, Denominator denominator) {
  const Eigen::Index n = panel.n();
  Eigen::MatrixXd centered = panel.readings.rowwise() - panel.readings.colwise().mean();
  double denom = denominator == Denominator::Unbiased ? static_cast<double>(n - 1)
                                                      : static_cast<double>(n);
  CovarianceEstimate cov;
  cov.matrix = (centered.transpose() * centered) / denom;
  // Exact symmetry; the product above is symmetric only up to rounding.
  cov.matrix = 0.5 * (cov.matrix + cov.matrix.transpose()).eval();
  for (Eigen::Index j = 0; j < panel.k(); ++j)
    if (!(cov.matrix(j, j) > 0.0))
      throw InputError("clock '" + panel.clock_names[static_cast<std::size_t>(j)] +
                       "' has zero variance");
  cov.clock_names = panel.clock_names;
  cov.n = n;
  cov.denominator = denominator;
  double lo, hi;
  spectrum(cov.matrix, lo, hi);
  cov.min_eigenvalue = lo;
  cov.positive_definite = lo > hi * 1e-14;
  cov.condition_number = cov.positive_definite ? hi / lo : std::numeric_limits<double>::infinity();
  return cov;
}

std::string_view to_string(MegaMethod m) { return m == MegaMethod::Wgt ? "wgt" : "fa"; }

MegaWeights weighted_index_weights(const CovarianceEstimate& cov) {
  require_invertible(cov);
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(cov.matrix.rows());
  return normalized(MegaMethod::Wgt, cov.clock_names, solve_spd(cov.matrix, ones),
                    cov.condition_number);
}

Eigen::VectorXd apply_weights(const ClockPanel& panel, const MegaWeights& weights) {
  if (weights.normalized_weights.size() != panel.k())
    throw InputError("weights have " + std::to_string(weights.normalized_weights.size()) +
                     " entries for a " + std::to_string(panel.k()) + "-clock panel");
  return panel.readings * weights.normalized_weights;
}

Eigen::VectorXd mega_wgt(const ClockPanel& panel, const MegaWeights& weights) {
  if (weights.method != MegaMethod::Wgt) throw InputError("mega_wgt needs weighted-index weights");
  return apply_weights(panel, weights);
}

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& data) {
  Eigen::MatrixXd centered = data.rowwise() - data.colwise().mean();
  Eigen::MatrixXd cov = centered.transpose() * centered;
  Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
  Eigen::MatrixXd r = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();
  r = 0.5 * (r + r.transpose()).eval();
  r.diagonal().setOnes();
  return r;
}

FactorSolution efa(const ClockPanel& panel, const EfaOptions& options) {
  for (Eigen::Index j = 0; j < panel.k(); ++j) {
    const auto col = panel.readings.col(j);
    if ((col.array() - col.mean()).abs().maxCoeff() == 0.0)
      throw InputError("clock '" + panel.clock_names[static_cast<std::size_t>(j)] +
                       "' has zero variance");
  }
  return efa_correlation(correlation_matrix(panel.readings), panel.clock_names, options);
}

FactorSolution efa_correlation(const Eigen::MatrixXd& r, std::vector<std::string> names,
                               const EfaOptions& options) {
  const Eigen::Index k = r.rows();
  if (k < 2) throw InputError("factor analysis needs at least 2 variables");

  FactorSolution sol;
  sol.clock_names = std::move(names);
  sol.extraction = options.extraction;
  sol.kaiser = options.kaiser;
  sol.eigenvalues = descending_eigenvalues(r);

  // Squared multiple correlations; the largest absolute correlation stands in
  // when R is singular.
  Eigen::VectorXd smc(k);
  if (sol.eigenvalues(k - 1) > 1e-10) {
    Eigen::MatrixXd inv = r.llt().solve(Eigen::MatrixXd::Identity(k, k));
    smc = (1.0 - inv.diagonal().cwiseInverse().array()).matrix();
  } else {
    for (Eigen::Index i = 0; i < k; ++i) {
      double best = 0.0;
      for (Eigen::Index j = 0; j < k; ++j)
        if (i != j) best = std::max(best, std::abs(r(i, j)));
      smc(i) = best;
    }
  }
  Eigen::MatrixXd reduced = r;
  reduced.diagonal() = smc;
  sol.reduced_eigenvalues = descending_eigenvalues(reduced);

  const Eigen::VectorXd& basis =
      options.kaiser == KaiserBasis::Correlation ? sol.eigenvalues : sol.reduced_eigenvalues;
  sol.n_retained = static_cast<int>((basis.array() > 1.0 + 1e-10).count());
  if (sol.n_retained == 0) throw NumericalError("no common factor under Kaiser criterion");

  Eigen::VectorXd loadings;
  if (options.extraction == Extraction::PrincipalComponent) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
    loadings = std::sqrt(es.eigenvalues()(k - 1)) * es.eigenvectors().col(k - 1);
    sol.iterations = 0;
  } else {
    // One principal-factor update h -> diag(first-factor loadings^2), capped at 1.
    auto update = [&](const Eigen::VectorXd& h, Eigen::VectorXd& lam, bool& capped) {
      Eigen::MatrixXd rh = r;
      rh.diagonal() = h;
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(rh);
      double mu = std::max(es.eigenvalues()(k - 1), 0.0);
      lam = std::sqrt(mu) * es.eigenvectors().col(k - 1);
      Eigen::VectorXd next = lam.cwiseAbs2();
      capped = (next.array() > 1.0).any();
      if (capped) {
        next = next.cwiseMin(1.0);
        lam = lam.cwiseSign().cwiseProduct(next.cwiseSqrt());
      }
      return next;
    };
    // Plain iteration contracts slowly when communalities are low, so cycles
    // of two updates are extrapolated (SQUAREM with a step bound that grows
    // by 4 each time it binds); the fixed point and the stopping rule on the
    // plain update are unchanged.
    Eigen::VectorXd h = smc;
    std::vector<double> trace;
    bool converged = false;
    bool capped = false;
    int evals = 0;
    double step_max = 1.0;
    auto step = [&](const Eigen::VectorXd& from) {
      Eigen::VectorXd next = update(from, loadings, capped);
      ++evals;
      double change = (next - from).cwiseAbs().maxCoeff();
      trace.push_back(change);
      if (change < options.tolerance) converged = true;
      return next;
    };
    while (evals < options.max_iterations) {
      Eigen::VectorXd h1 = step(h);
      if (converged || evals >= options.max_iterations) { h = h1; break; }
      Eigen::VectorXd h2 = step(h1);
      if (converged || evals >= options.max_iterations) { h = h2; break; }
      Eigen::VectorXd d1 = h1 - h;
      Eigen::VectorXd d2 = h2 - 2.0 * h1 + h;
      Eigen::VectorXd jump = h2;
      if (d2.norm() > 0.0) {
        double alpha = std::clamp(-d1.norm() / d2.norm(), -step_max, -1.0);
        if (alpha == -step_max) step_max *= 4.0;
        jump = h - 2.0 * alpha * d1 + alpha * alpha * d2;
        if (!jump.allFinite() || (jump.array() < 0.0).any() || (jump.array() > 1.0).any()) jump = h2;
      }
      h = jump;
    }
    sol.iterations = evals;
    sol.heywood = capped;
    if (!converged) {
      std::ostringstream os;
      os << "principal-factor iteration did not converge in " << options.max_iterations
         << " iterations; max communality change per iteration:";
      for (std::size_t i = 0; i < trace.size(); ++i)
        if (i < 5 || i + 5 >= trace.size()) os << ' ' << trace[i];
      throw NumericalError(os.str());
    }
  }
  if (loadings.sum() < 0) loadings = -loadings;
  sol.loadings = loadings;
  sol.communality = loadings.cwiseAbs2().cwiseMin(1.0);
  sol.uniqueness = (1.0 - sol.communality.array()).matrix();
  return sol;
}

MegaWeights fa_weights(const FactorSolution& solution, const CovarianceEstimate& cov) {
  if (solution.n_retained != 1)
    throw NumericalError("factor index needs exactly one retained factor, found " +
                         std::to_string(solution.n_retained));
  if (solution.loadings.size() != cov.matrix.rows())
    throw InputError("loadings and covariance matrix differ in dimension");
  require_invertible(cov);
  MegaWeights w = normalized(MegaMethod::Fa, cov.clock_names,
                             solve_spd(cov.matrix, solution.loadings), cov.condition_number);
  w.loadings_used = solution.loadings;
  return w;
}

Eigen::VectorXd mega_fa(const ClockPanel& panel, const FactorSolution& solution,
                        const CovarianceEstimate& cov) {
  return apply_weights(panel, fa_weights(solution, cov));
}

LeaveOneOut leave_one_out(const ClockPanel& panel, std::string_view exclude, MegaMethod method,
                          const EfaOptions& options) {
  ClockPanel rest = panel.without(exclude);
  LeaveOneOut out;
  out.excluded = std::string(exclude);
  CovarianceEstimate cov = sample_covariance(rest);
  if (method == MegaMethod::Wgt) {
    out.weights = weighted_index_weights(cov);
  } else {
    out.factors = efa(rest, options);
    out.weights = fa_weights(*out.factors, cov);
  }
  out.weights.excluded_clocks = {out.excluded};
  out.scores = apply_weights(rest, out.weights);
  return out;
}

std::string factor_table_text(const FactorSolution& s) {
  std::ostringstream os;
  std::size_t w = 10;
  for (const auto& n : s.clock_names) w = std::max(w, n.size() + 2);
  os << std::string(w, ' ') << "  Factor loadings  Uniqueness\n";
  for (std::size_t i = 0; i < s.clock_names.size(); ++i) {
    auto j = static_cast<Eigen::Index>(i);
    os << s.clock_names[i] << std::string(w - s.clock_names[i].size(), ' ') << "  "
       << std::string(15 - 5, ' ') << format_fixed(s.loadings(j), 3) << "  "
       << std::string(10 - 5, ' ') << format_fixed(s.uniqueness(j), 3) << "\n";
  }
  os << "\nEigenvalues (correlation):";
  for (Eigen::Index j = 0; j < s.eigenvalues.size(); ++j) os << ' ' << format_fixed(s.eigenvalues(j), 3);
  os << "\nEigenvalues (principal factor):";
  for (Eigen::Index j = 0; j < s.reduced_eigenvalues.size(); ++j)
    os << ' ' << format_fixed(s.reduced_eigenvalues(j), 3);
  os << "\nFactors retained (eigenvalue > 1): " << s.n_retained << "\n";
  return os.str();
}

std::string factor_table_csv(const FactorSolution& s) {
  std::string out = csv_line({"clock", "loading", "uniqueness", "communality", "eigenvalue",
                              "reduced_eigenvalue"});
  for (std::size_t i = 0; i < s.clock_names.size(); ++i) {
    auto j = static_cast<Eigen::Index>(i);
    out += csv_line({s.clock_names[i], format_number(s.loadings(j)), format_number(s.uniqueness(j)),
                     format_number(s.communality(j)), format_number(s.eigenvalues(j)),
                     format_number(s.reduced_eigenvalues(j))});
  }
  return out;
}

std::string weights_csv(std::span<const MegaWeights> weights) {
  std::string out = csv_line({"method", "excluded", "clock", "raw_weight", "normalized_weight",
                              "loading"});
  for (const auto& w : weights) {
    std::string excluded = w.excluded_clocks.empty() ? "" : w.excluded_clocks.front();
    for (std::size_t i = 0; i < w.clock_names.size(); ++i) {
      auto j = static_cast<Eigen::Index>(i);
      out += csv_line({std::string(to_string(w.method)), excluded, w.clock_names[i],
                       format_number(w.raw_weights(j)), format_number(w.normalized_weights(j)),
                       w.loadings_used ? format_number((*w.loadings_used)(j)) : ""});
    }
  }
  return out;
}

}  // namespace mega
