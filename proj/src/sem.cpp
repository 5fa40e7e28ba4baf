#include "mega/sem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <boost/math/distributions/normal.hpp>

#include "mega/aggregation.hpp"
#include "mega/error.hpp"
#include "mega/inference.hpp"
#include "mega/io.hpp"

namespace mega {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

double normal_p(double z) {
  if (!std::isfinite(z)) return std::isnan(z) ? kNaN : 0.0;
  boost::math::normal_distribution<double> n;
  return 2.0 * boost::math::cdf(boost::math::complement(n, std::abs(z)));
}

}  // namespace

std::string_view to_string(StructuralConfig c) {
  return c == StructuralConfig::OutcomeOnLatent ? "outcome-on-latent" : "latent-on-covariates";
}

StructuralConfig parse_structural_config(std::string_view s) {
  if (s == "latent-on-covariates") return StructuralConfig::LatentOnCovariates;
  if (s == "outcome-on-latent") return StructuralConfig::OutcomeOnLatent;
  throw InputError("unknown structure '" + std::string(s) +
                   "' (expected latent-on-covariates or outcome-on-latent)");
}

MimicSpec parse_model_spec(std::string_view text) {
  MimicSpec spec;
  std::vector<std::pair<std::string, std::string>> references;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InputError("model file line " + std::to_string(line_no) + ": expected '='");
    auto lhs = split_words(t.substr(0, eq));
    auto rhs = split_words(t.substr(eq + 1));
    auto fail = [&](const std::string& why) {
      throw InputError("model file line " + std::to_string(line_no) + ": " + why);
    };
    if (lhs.empty()) fail("missing keyword");
    const std::string& key = lhs[0];
    if (key == "latent") {
      if (lhs.size() != 2) fail("expected 'latent NAME = indicators'");
      spec.blocks.push_back({lhs[1], rhs, rhs.empty() ? std::string() : rhs.front()});
    } else if (key == "reference") {
      if (lhs.size() != 2 || rhs.size() != 1) fail("expected 'reference NAME = indicator'");
      references.emplace_back(lhs[1], rhs[0]);
    } else if (lhs.size() != 1) {
      fail("unexpected words before '='");
    } else if (key == "covariates") {
      spec.covariates = rhs;
    } else if (key == "outcomes") {
      spec.outcomes = rhs;
    } else if (key == "controls") {
      spec.controls = rhs;
    } else if (key == "structure") {
      if (rhs.size() != 1) fail("expected one structure keyword");
      spec.config = parse_structural_config(rhs[0]);
    } else {
      fail("unknown keyword '" + key + "'");
    }
  }
  for (const auto& [latent, ref] : references) {
    auto it = std::find_if(spec.blocks.begin(), spec.blocks.end(),
                           [&](const MeasurementBlock& b) { return b.latent == latent; });
    if (it == spec.blocks.end()) throw InputError("reference for unknown latent '" + latent + "'");
    it->reference = ref;
  }
  return spec;
}

int SemModel::latent_index(std::string_view name) const {
  for (std::size_t j = 0; j < spec.blocks.size(); ++j)
    if (spec.blocks[j].latent == name) return static_cast<int>(j);
  throw InputError("unknown latent '" + std::string(name) + "'");
}

SemModel build_mimic(const MimicSpec& spec, const CohortTable& table) {
  if (spec.blocks.empty()) throw InputError("model has no latent variable");
  SemModel m;
  m.spec = spec;
  std::set<std::string> latents, assigned;
  for (auto& b : m.spec.blocks) {
    if (!latents.insert(b.latent).second) throw InputError("latent '" + b.latent + "' defined twice");
    if (b.indicators.size() < 2)
      throw InputError("latent '" + b.latent + "' has " + std::to_string(b.indicators.size()) +
                       " indicator(s): under-identified");
    if (b.reference.empty()) b.reference = b.indicators.front();
    if (!contains(b.indicators, b.reference))
      throw InputError("reference '" + b.reference + "' is not an indicator of '" + b.latent + "'");
    for (const auto& ind : b.indicators) {
      if (!assigned.insert(ind).second)
        throw InputError("indicator '" + ind + "' assigned more than once");
      m.endogenous.push_back(ind);
    }
  }
  if (spec.config == StructuralConfig::LatentOnCovariates && !spec.outcomes.empty())
    throw InputError("outcomes require the outcome-on-latent structure");
  if (spec.config == StructuralConfig::OutcomeOnLatent && spec.outcomes.empty())
    throw InputError("outcome-on-latent structure needs at least one outcome");
  for (const auto& y : spec.outcomes) {
    if (!assigned.insert(y).second) throw InputError("outcome '" + y + "' is also an indicator");
    m.endogenous.push_back(y);
  }
  for (const auto& e : m.endogenous) {
    const Column& c = table.column(e);
    if (c.type == ColumnType::Categorical)
      throw InputError("endogenous variable '" + e + "' is categorical");
  }

  // Latents are regressed on the covariates and, in the outcome configuration,
  // also on the controls so that the latent may correlate with them.
  std::vector<std::string> latent_regressors = spec.covariates;
  if (spec.config == StructuralConfig::OutcomeOnLatent)
    for (const auto& c : spec.controls)
      if (!contains(latent_regressors, c)) latent_regressors.push_back(c);
  m.exogenous = latent_regressors;
  for (const auto& c : spec.controls)
    if (!contains(m.exogenous, c)) m.exogenous.push_back(c);
  std::set<std::string> seen;
  for (const auto& x : m.exogenous) {
    if (assigned.count(x)) throw InputError("'" + x + "' is both exogenous and endogenous");
    (void)table.column(x);
  }
  for (const auto& x : spec.covariates)
    if (!seen.insert(x).second) throw InputError("covariate '" + x + "' listed twice");
  seen.clear();
  for (const auto& x : spec.controls)
    if (!seen.insert(x).second) throw InputError("control '" + x + "' listed twice");

  for (const auto& src : m.exogenous) {
    const Column& c = table.column(src);
    bool is_cov = contains(latent_regressors, src);
    bool is_ctl = contains(spec.controls, src);
    if (c.type == ColumnType::Categorical) {
      std::set<int> present;
      for (double v : c.values)
        if (!is_missing(v)) present.insert(static_cast<int>(v));
      bool first = true;
      for (int level : present) {
        if (first) { first = false; continue; }
        m.exogenous_design.push_back(src + "=" + c.levels[static_cast<std::size_t>(level)]);
        m.design_is_covariate.push_back(is_cov);
        m.design_is_control.push_back(is_ctl);
      }
    } else {
      m.exogenous_design.push_back(src);
      m.design_is_covariate.push_back(is_cov);
      m.design_is_control.push_back(is_ctl);
    }
  }

  const int p = m.n_endogenous(), big_p = m.n_exogenous(), j = m.n_latents();
  const int n_out = static_cast<int>(spec.outcomes.size());
  const int n_cov = static_cast<int>(std::count(m.design_is_covariate.begin(),
                                                m.design_is_covariate.end(), true));
  const int n_ctl = static_cast<int>(std::count(m.design_is_control.begin(),
                                                m.design_is_control.end(), true));
  auto& k = m.counts;
  k.loadings = p - n_out - j;
  k.gamma = j * n_cov;
  k.outcome_loadings = n_out * j;
  k.theta = n_out * n_ctl;
  k.latent_variances = j;
  k.latent_covariances = j * (j - 1) / 2;
  k.error_variances = p;
  k.intercepts = p;
  m.observed_moments = p * (p + 1) / 2 + p * (1 + big_p);
  m.degrees_of_freedom = m.observed_moments - k.total();
  if (m.degrees_of_freedom < 0)
    throw InputError("model is under-identified: " + std::to_string(k.total()) +
                     " free parameters for " + std::to_string(m.observed_moments) +
                     " observed moments (df = " + std::to_string(m.degrees_of_freedom) + ")");
  return m;
}

namespace {

// Exogenous design for the given rows with the model's fixed dummy coding.
Eigen::MatrixXd design_for(const SemModel& model, const CohortTable& table,
                           std::span<const std::size_t> rows) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), model.n_exogenous());
  for (int c = 0; c < model.n_exogenous(); ++c) {
    const std::string& name = model.exogenous_design[static_cast<std::size_t>(c)];
    auto eq = name.find('=');
    if (table.has(name) || eq == std::string::npos) {
      const Column& col = table.column(name);
      for (std::size_t i = 0; i < rows.size(); ++i) x(static_cast<Eigen::Index>(i), c) = col.values[rows[i]];
    } else {
      const Column& col = table.column(name.substr(0, eq));
      std::string level = name.substr(eq + 1);
      auto it = std::find(col.levels.begin(), col.levels.end(), level);
      double code = it == col.levels.end() ? -1.0 : static_cast<double>(it - col.levels.begin());
      for (std::size_t i = 0; i < rows.size(); ++i)
        x(static_cast<Eigen::Index>(i), c) = col.values[rows[i]] == code ? 1.0 : 0.0;
    }
  }
  return x;
}

std::vector<std::size_t> complete_rows(const SemModel& model, const CohortTable& table) {
  std::vector<const Column*> cols;
  for (const auto& e : model.endogenous) cols.push_back(&table.column(e));
  for (const auto& e : model.exogenous) cols.push_back(&table.column(e));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < table.rows(); ++i)
    if (std::none_of(cols.begin(), cols.end(), [&](const Column* c) { return is_missing(c->values[i]); }))
      rows.push_back(i);
  return rows;
}

}  // namespace

ModelData model_data(const SemModel& model, const CohortTable& table) {
  ModelData d;
  d.rows = complete_rows(model, table);
  d.dropped = table.rows() - d.rows.size();
  d.z.resize(static_cast<Eigen::Index>(d.rows.size()), model.n_endogenous());
  for (int e = 0; e < model.n_endogenous(); ++e) {
    const Column& col = table.column(model.endogenous[static_cast<std::size_t>(e)]);
    for (std::size_t i = 0; i < d.rows.size(); ++i) d.z(static_cast<Eigen::Index>(i), e) = col.values[d.rows[i]];
  }
  d.x = design_for(model, table, d.rows);
  return d;
}

SufficientStats sufficient_stats(const ModelData& data) {
  SufficientStats s;
  s.n = data.z.rows();
  if (s.n == 0) throw InputError("no complete rows for the model");
  double n = static_cast<double>(s.n);
  s.z_mean = data.z.colwise().mean().transpose();
  s.x_mean = data.x.cols() > 0 ? Eigen::VectorXd(data.x.colwise().mean().transpose())
                               : Eigen::VectorXd(0);
  Eigen::MatrixXd zc = data.z.rowwise() - s.z_mean.transpose();
  Eigen::MatrixXd xc = data.x.rowwise() - s.x_mean.transpose();
  s.szz = zc.transpose() * zc / n;
  s.szx = zc.transpose() * xc / n;
  s.sxx = xc.transpose() * xc / n;
  return s;
}

MimicLikelihood::MimicLikelihood(const SemModel& model, SufficientStats stats)
    : model_(model), stats_(std::move(stats)) {
  const auto& spec = model_.spec;
  const int n_ind = model_.n_endogenous() - static_cast<int>(spec.outcomes.size());
  int row = 0;
  for (int j = 0; j < model_.n_latents(); ++j) {
    const auto& b = spec.blocks[static_cast<std::size_t>(j)];
    for (const auto& ind : b.indicators) {
      if (ind != b.reference) {
        loading_pos_.emplace_back(row, j);
        info_.push_back({"lambda:" + ind, "loading", b.latent, ind, false});
      }
      ++row;
    }
  }
  for (std::size_t o = 0; o < spec.outcomes.size(); ++o)
    for (int j = 0; j < model_.n_latents(); ++j) {
      loading_pos_.emplace_back(n_ind + static_cast<int>(o), j);
      const auto& latent = spec.blocks[static_cast<std::size_t>(j)].latent;
      info_.push_back({"delta:" + spec.outcomes[o] + ":" + latent, "outcome_loading",
                       spec.outcomes[o], latent, false});
    }
  for (int j = 0; j < model_.n_latents(); ++j)
    for (int c = 0; c < model_.n_exogenous(); ++c)
      if (model_.design_is_covariate[static_cast<std::size_t>(c)]) {
        gamma_pos_.emplace_back(j, c);
        const auto& latent = spec.blocks[static_cast<std::size_t>(j)].latent;
        const auto& x = model_.exogenous_design[static_cast<std::size_t>(c)];
        info_.push_back({"gamma:" + latent + ":" + x, "gamma", latent, x, false});
      }
  for (std::size_t o = 0; o < spec.outcomes.size(); ++o)
    for (int c = 0; c < model_.n_exogenous(); ++c)
      if (model_.design_is_control[static_cast<std::size_t>(c)]) {
        theta_pos_.emplace_back(n_ind + static_cast<int>(o), c);
        const auto& x = model_.exogenous_design[static_cast<std::size_t>(c)];
        info_.push_back({"theta:" + spec.outcomes[o] + ":" + x, "theta", spec.outcomes[o], x, false});
      }
  for (int j = 0; j < model_.n_latents(); ++j)
    for (int m = 0; m <= j; ++m) {
      const auto& a = spec.blocks[static_cast<std::size_t>(j)].latent;
      const auto& b = spec.blocks[static_cast<std::size_t>(m)].latent;
      if (m == j)
        info_.push_back({"phi:" + a, "phi", a, a, true});
      else
        info_.push_back({"phi:" + b + ":" + a, "phi", b, a, false});
    }
  for (const auto& e : model_.endogenous)
    info_.push_back({"psi:" + e, "psi", e, e, true});
}

Eigen::VectorXd MimicLikelihood::lower_bounds() const {
  Eigen::VectorXd lb(n_params());
  for (Eigen::Index i = 0; i < n_params(); ++i)
    lb(i) = info_[static_cast<std::size_t>(i)].variance ? 0.0 : -kInf;
  return lb;
}

MimicMatrices MimicLikelihood::unpack(const Eigen::VectorXd& theta) const {
  const int p = model_.n_endogenous(), big_p = model_.n_exogenous(), nj = model_.n_latents();
  MimicMatrices m;
  m.loadings = Eigen::MatrixXd::Zero(p, nj);
  m.gamma = Eigen::MatrixXd::Zero(nj, big_p);
  m.direct = Eigen::MatrixXd::Zero(p, big_p);
  m.phi = Eigen::MatrixXd::Zero(nj, nj);
  m.psi = Eigen::VectorXd::Zero(p);
  int row = 0;
  for (int j = 0; j < nj; ++j) {
    const auto& b = model_.spec.blocks[static_cast<std::size_t>(j)];
    for (const auto& ind : b.indicators) {
      if (ind == b.reference) m.loadings(row, j) = 1.0;
      ++row;
    }
  }
  Eigen::Index k = 0;
  for (auto [r, c] : loading_pos_) m.loadings(r, c) = theta(k++);
  for (auto [r, c] : gamma_pos_) m.gamma(r, c) = theta(k++);
  for (auto [r, c] : theta_pos_) m.direct(r, c) = theta(k++);
  for (int j = 0; j < nj; ++j)
    for (int q = 0; q <= j; ++q) {
      m.phi(j, q) = theta(k);
      m.phi(q, j) = theta(k);
      ++k;
    }
  for (int a = 0; a < p; ++a) m.psi(a) = theta(k++);
  m.sigma = m.loadings * m.phi * m.loadings.transpose();
  m.sigma.diagonal() += m.psi;
  m.slopes = m.loadings * m.gamma + m.direct;
  return m;
}

Eigen::VectorXd MimicLikelihood::pack(const MimicMatrices& m) const {
  Eigen::VectorXd theta(n_params());
  Eigen::Index k = 0;
  for (auto [r, c] : loading_pos_) theta(k++) = m.loadings(r, c);
  for (auto [r, c] : gamma_pos_) theta(k++) = m.gamma(r, c);
  for (auto [r, c] : theta_pos_) theta(k++) = m.direct(r, c);
  for (int j = 0; j < model_.n_latents(); ++j)
    for (int q = 0; q <= j; ++q) theta(k++) = m.phi(j, q);
  for (Eigen::Index a = 0; a < m.psi.size(); ++a) theta(k++) = m.psi(a);
  return theta;
}

namespace {

Eigen::MatrixXd residual_moment(const SufficientStats& s, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd bsxz = b * s.szx.transpose();
  return s.szz - bsxz - bsxz.transpose() + b * s.sxx * b.transpose();
}

}  // namespace

double MimicLikelihood::mean_loglik(const Eigen::VectorXd& theta) const {
  if (!theta.allFinite()) return -kInf;
  MimicMatrices m = unpack(theta);
  Eigen::LLT<Eigen::MatrixXd> llt(m.sigma);
  if (llt.info() != Eigen::Success) return -kInf;
  Eigen::VectorXd d = llt.matrixL().toDenseMatrix().diagonal();
  if ((d.array() <= 0).any()) return -kInf;
  double logdet = 2.0 * d.array().log().sum();
  double tr = llt.solve(residual_moment(stats_, m.slopes)).trace();
  double p = static_cast<double>(m.sigma.rows());
  double f = -0.5 * (p * std::log(2.0 * std::numbers::pi) + logdet + tr);
  return std::isfinite(f) ? f : -kInf;
}

Eigen::VectorXd MimicLikelihood::chain(const MimicMatrices& m, const Eigen::MatrixXd& g_sigma,
                                       const Eigen::MatrixXd& g_b) const {
  Eigen::MatrixXd d_l = 2.0 * g_sigma * m.loadings * m.phi + g_b * m.gamma.transpose();
  Eigen::MatrixXd d_phi = m.loadings.transpose() * g_sigma * m.loadings;
  Eigen::MatrixXd d_gamma = m.loadings.transpose() * g_b;
  Eigen::VectorXd g(n_params());
  Eigen::Index k = 0;
  for (auto [r, c] : loading_pos_) g(k++) = d_l(r, c);
  for (auto [r, c] : gamma_pos_) g(k++) = d_gamma(r, c);
  for (auto [r, c] : theta_pos_) g(k++) = g_b(r, c);
  for (int j = 0; j < model_.n_latents(); ++j)
    for (int q = 0; q <= j; ++q) g(k++) = (q == j ? 1.0 : 2.0) * d_phi(j, q);
  for (Eigen::Index a = 0; a < g_sigma.rows(); ++a) g(k++) = g_sigma(a, a);
  return g;
}

Eigen::VectorXd MimicLikelihood::gradient(const Eigen::VectorXd& theta) const {
  MimicMatrices m = unpack(theta);
  Eigen::LLT<Eigen::MatrixXd> llt(m.sigma);
  if (llt.info() != Eigen::Success)
    return Eigen::VectorXd::Constant(n_params(), kNaN);
  const Eigen::Index p = m.sigma.rows();
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd s = residual_moment(stats_, m.slopes);
  Eigen::MatrixXd g_sigma = -0.5 * (inv - inv * s * inv);
  Eigen::MatrixXd g_b = -inv * (m.slopes * stats_.sxx - stats_.szx);
  return chain(m, g_sigma, g_b);
}

Eigen::VectorXd MimicLikelihood::central_difference_gradient(const Eigen::VectorXd& theta,
                                                             double step) const {
  Eigen::VectorXd g(n_params());
  for (Eigen::Index i = 0; i < n_params(); ++i) {
    double h = step * std::max(1.0, std::abs(theta(i)));
    Eigen::VectorXd up = theta, dn = theta;
    up(i) += h;
    dn(i) -= h;
    g(i) = (mean_loglik(up) - mean_loglik(dn)) / (2.0 * h);
  }
  return g;
}

Eigen::MatrixXd MimicLikelihood::hessian(const Eigen::VectorXd& theta) const {
  const Eigen::Index n = n_params();
  Eigen::MatrixXd h(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double step = 1e-5 * std::max(1.0, std::abs(theta(i)));
    Eigen::VectorXd up = theta, dn = theta;
    up(i) += step;
    dn(i) -= step;
    Eigen::VectorXd gu = gradient(up), gd = gradient(dn);
    if (!gd.allFinite()) {
      h.col(i) = (gu - gradient(theta)) / step;
    } else if (!gu.allFinite()) {
      h.col(i) = (gradient(theta) - gd) / step;
    } else {
      h.col(i) = (gu - gd) / (2.0 * step);
    }
  }
  return 0.5 * (h + h.transpose());
}

double gradient_discrepancy(const MimicLikelihood& lik, const Eigen::VectorXd& theta) {
  Eigen::VectorXd a = lik.gradient(theta);
  Eigen::VectorXd fd = lik.central_difference_gradient(theta);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a(i) - fd(i)) / std::max(1.0, std::abs(fd(i))));
  return worst;
}

namespace {

struct OptResult {
  Eigen::VectorXd theta;
  double f = -kInf;  // mean log-likelihood
  int iterations = 0;
  double gradient_norm = kInf;
  double max_step = kInf;
  bool converged = false;
  std::vector<double> trace;
};

// Gradient of the objective (negative mean log-likelihood) with components
// pushing into an active bound removed.
Eigen::VectorXd projected(const Eigen::VectorXd& g, const Eigen::VectorXd& theta,
                          const Eigen::VectorXd& lb) {
  Eigen::VectorXd pg = g;
  for (Eigen::Index i = 0; i < g.size(); ++i)
    if (theta(i) <= lb(i) && g(i) > 0) pg(i) = 0.0;
  return pg;
}

Eigen::VectorXd clamp(const Eigen::VectorXd& theta, const Eigen::VectorXd& lb) {
  return theta.cwiseMax(lb);
}

// Backtracking along the projected path; returns false when no decrease is found.
bool line_search(const MimicLikelihood& lik, const Eigen::VectorXd& lb, const Eigen::VectorXd& theta,
                 double obj, const Eigen::VectorXd& g, const Eigen::VectorXd& d,
                 Eigen::VectorXd& next, double& next_obj) {
  double t = 1.0;
  const double slack = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(obj));
  for (int k = 0; k < 60; ++k, t *= 0.5) {
    next = clamp(theta + t * d, lb);
    next_obj = -lik.mean_loglik(next);
    if (!std::isfinite(next_obj)) continue;
    double decrease = g.dot(next - theta);
    if (next_obj <= obj + 1e-4 * std::min(decrease, 0.0) && next_obj <= obj + slack) return true;
  }
  return false;
}

OptResult optimize(const MimicLikelihood& lik, const Eigen::VectorXd& start, const SemOptions& opt) {
  const Eigen::VectorXd lb = lik.lower_bounds();
  const Eigen::Index n = lik.n_params();
  OptResult r;
  r.theta = clamp(start, lb);
  double obj = -lik.mean_loglik(r.theta);
  if (!std::isfinite(obj)) return r;
  Eigen::VectorXd g = -lik.gradient(r.theta);
  Eigen::MatrixXd hinv = Eigen::MatrixXd::Identity(n, n);
  bool scaled = false;
  int it = 0;

  auto free_mask = [&](const Eigen::VectorXd& th, const Eigen::VectorXd& grad) {
    std::vector<bool> f(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = !(th(i) <= lb(i) && grad(i) > 0);
    return f;
  };

  // Quasi-Newton phase, leaving part of the budget for the polish.
  const int qn_budget = std::max(1, opt.max_iterations - 100);
  for (; it < qn_budget; ++it) {
    auto mask = free_mask(r.theta, g);
    Eigen::VectorXd gm = g;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!mask[static_cast<std::size_t>(i)]) gm(i) = 0.0;
    Eigen::VectorXd d = -hinv * gm;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!mask[static_cast<std::size_t>(i)]) d(i) = 0.0;
    if (!(g.dot(d) < 0)) {
      hinv.setIdentity();
      scaled = false;
      d = -gm;
    }
    Eigen::VectorXd next;
    double next_obj;
    if (!line_search(lik, lb, r.theta, obj, g, d, next, next_obj)) break;
    Eigen::VectorXd s = next - r.theta;
    Eigen::VectorXd gn = -lik.gradient(next);
    Eigen::VectorXd y = gn - g;
    double sy = s.dot(y);
    bool new_bound = false;
    for (Eigen::Index i = 0; i < n; ++i) new_bound = new_bound || (next(i) <= lb(i) && r.theta(i) > lb(i));
    if (new_bound) {
      hinv.setIdentity();
      scaled = false;
    } else if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        hinv *= sy / y.squaredNorm();
        scaled = true;
      }
      double rho = 1.0 / sy;
      Eigen::MatrixXd left = Eigen::MatrixXd::Identity(n, n) - rho * s * y.transpose();
      hinv = left * hinv * left.transpose() + rho * s * s.transpose();
    }
    r.theta = next;
    obj = next_obj;
    g = gn;
    r.max_step = s.cwiseAbs().maxCoeff();
    r.trace.push_back(-obj);
    double pg = projected(g, r.theta, lb).cwiseAbs().maxCoeff();
    if (pg < 1e-4 * opt.gradient_tolerance || (r.max_step < opt.step_tolerance && pg < opt.gradient_tolerance))
      break;
  }

  // Newton polish with the finite-difference Hessian of the analytic gradient.
  for (int k = 0; k < 100 && it < opt.max_iterations; ++k, ++it) {
    auto mask = free_mask(r.theta, g);
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) idx.push_back(i);
    Eigen::VectorXd d = Eigen::VectorXd::Zero(n);
    if (!idx.empty()) {
      const auto m = static_cast<Eigen::Index>(idx.size());
      Eigen::MatrixXd h_full = -lik.hessian(r.theta);
      Eigen::MatrixXd h(m, m);
      Eigen::VectorXd gf(m);
      for (Eigen::Index a = 0; a < m; ++a) {
        gf(a) = g(idx[static_cast<std::size_t>(a)]);
        for (Eigen::Index b = 0; b < m; ++b)
          h(a, b) = h_full(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
      }
      double ridge = 0.0;
      Eigen::VectorXd step;
      for (int attempt = 0; attempt < 40; ++attempt) {
        Eigen::MatrixXd hr = h;
        hr.diagonal().array() += ridge;
        Eigen::LLT<Eigen::MatrixXd> llt(hr);
        if (llt.info() == Eigen::Success) {
          step = -llt.solve(gf);
          break;
        }
        ridge = ridge == 0.0 ? 1e-8 * std::max(1.0, h.diagonal().cwiseAbs().maxCoeff()) : ridge * 10.0;
      }
      if (step.size() == 0) step = -gf;
      for (Eigen::Index a = 0; a < m; ++a) d(idx[static_cast<std::size_t>(a)]) = step(a);
    }
    Eigen::VectorXd next;
    double next_obj;
    double pg = projected(g, r.theta, lb).cwiseAbs().maxCoeff();
    if (d.cwiseAbs().maxCoeff() < opt.step_tolerance * 1e-3 ||
        !line_search(lik, lb, r.theta, obj, g, d, next, next_obj)) {
      r.max_step = std::min(r.max_step, d.cwiseAbs().maxCoeff());
      r.converged = pg < opt.gradient_tolerance && r.max_step < opt.step_tolerance;
      if (!r.converged && pg < opt.gradient_tolerance) {
        r.max_step = 0.0;
        r.converged = true;
      }
      break;
    }
    Eigen::VectorXd s = next - r.theta;
    r.theta = next;
    obj = next_obj;
    g = -lik.gradient(r.theta);
    r.max_step = s.cwiseAbs().maxCoeff();
    r.trace.push_back(-obj);
    pg = projected(g, r.theta, lb).cwiseAbs().maxCoeff();
    if (r.max_step < opt.step_tolerance && pg < opt.gradient_tolerance) {
      r.converged = true;
      break;
    }
  }
  r.iterations = it;
  r.f = -obj;
  r.gradient_norm = projected(g, r.theta, lb).cwiseAbs().maxCoeff();
  return r;
}

// Loadings from a one-factor analysis of each block's residual covariance,
// latent slopes from least squares of the reduced form on the loadings.
Eigen::VectorXd efa_start(const MimicLikelihood& lik) {
  const SemModel& model = lik.model();
  const SufficientStats& st = lik.stats();
  const int p = model.n_endogenous(), nj = model.n_latents(), big_p = model.n_exogenous();
  Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(p, big_p);
  if (big_p > 0) pi = st.sxx.ldlt().solve(st.szx.transpose()).transpose();
  Eigen::MatrixXd resid = st.szz - pi * st.szx.transpose();

  MimicMatrices m = lik.unpack(Eigen::VectorXd::Zero(lik.n_params()));
  std::vector<int> ref_row(static_cast<std::size_t>(nj));
  int row = 0;
  for (int j = 0; j < nj; ++j) {
    const auto& b = model.spec.blocks[static_cast<std::size_t>(j)];
    const auto k = static_cast<Eigen::Index>(b.indicators.size());
    Eigen::MatrixXd cov = resid.block(row, row, k, k);
    Eigen::VectorXd sd = cov.diagonal().cwiseMax(1e-300).cwiseSqrt();
    Eigen::MatrixXd corr = sd.cwiseInverse().asDiagonal() * cov * sd.cwiseInverse().asDiagonal();
    Eigen::VectorXd std_load;
    try {
      std_load = efa_correlation(corr, b.indicators).loadings;
    } catch (const std::exception&) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(corr);
      std_load = std::sqrt(std::max(es.eigenvalues()(k - 1), 0.0)) * es.eigenvectors().col(k - 1);
      if (std_load.sum() < 0) std_load = -std_load;
    }
    Eigen::VectorXd a = std_load.cwiseProduct(sd);
    Eigen::Index ref = std::find(b.indicators.begin(), b.indicators.end(), b.reference) - b.indicators.begin();
    ref_row[static_cast<std::size_t>(j)] = row + static_cast<int>(ref);
    double a_ref = a(ref);
    if (std::abs(a_ref) < 1e-8 * sd(ref) || !std::isfinite(a_ref)) {
      a_ref = sd(ref);
      a = sd;
    }
    Eigen::VectorXd lambda = a / a_ref;
    double phi = a_ref * a_ref;
    m.phi(j, j) = phi;
    for (Eigen::Index i = 0; i < k; ++i) {
      m.loadings(row + i, j) = lambda(i);
      double unique = cov(i, i) - lambda(i) * lambda(i) * phi;
      m.psi(row + i) = std::max(unique, 0.1 * cov(i, i));
    }
    for (int c = 0; c < big_p; ++c) {
      if (!model.design_is_covariate[static_cast<std::size_t>(c)]) continue;
      double num = 0.0;
      for (Eigen::Index i = 0; i < k; ++i) num += lambda(i) * pi(row + i, c);
      m.gamma(j, c) = num / lambda.squaredNorm();
    }
    row += static_cast<int>(k);
  }
  for (int j = 0; j < nj; ++j)
    for (int q = 0; q < j; ++q) {
      double c = 0.5 * resid(ref_row[static_cast<std::size_t>(j)], ref_row[static_cast<std::size_t>(q)]);
      m.phi(j, q) = c;
      m.phi(q, j) = c;
    }
  if (nj > 1 && Eigen::LLT<Eigen::MatrixXd>(m.phi).info() != Eigen::Success) {
    Eigen::VectorXd diag = m.phi.diagonal();
    m.phi = diag.asDiagonal();
  }
  for (std::size_t o = 0; o < model.spec.outcomes.size(); ++o) {
    const int r = row + static_cast<int>(o);
    double explained = 0.0;
    for (int j = 0; j < nj; ++j) {
      double phi = m.phi(j, j);
      double d = phi > 0 ? resid(r, ref_row[static_cast<std::size_t>(j)]) / phi : 0.0;
      m.loadings(r, j) = d;
      explained += d * d * phi;
    }
    for (int c = 0; c < big_p; ++c) {
      if (!model.design_is_control[static_cast<std::size_t>(c)]) continue;
      double via_latent = 0.0;
      for (int j = 0; j < nj; ++j) via_latent += m.loadings(r, j) * m.gamma(j, c);
      m.direct(r, c) = pi(r, c) - via_latent;
    }
    m.psi(r) = std::max(resid(r, r) - explained, 0.1 * resid(r, r));
  }
  return lik.pack(m);
}

Eigen::VectorXd random_start(const MimicLikelihood& lik, const Eigen::VectorXd& base,
                             std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale(0.5, 1.5), var_scale(0.5, 2.0), shrink(0.0, 1.0);
  Eigen::VectorXd t = base;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const auto& info = lik.info()[static_cast<std::size_t>(i)];
    if (info.variance)
      t(i) = std::max(t(i), 1e-3) * var_scale(rng);
    else if (info.kind == "phi")
      t(i) *= shrink(rng);
    else
      t(i) *= scale(rng);
  }
  return t;
}

std::vector<bool> boundary_flags(const MimicLikelihood& lik, const Eigen::VectorXd& theta) {
  std::vector<bool> b(static_cast<std::size_t>(lik.n_params()), false);
  for (Eigen::Index i = 0; i < lik.n_params(); ++i)
    if (lik.info()[static_cast<std::size_t>(i)].variance && theta(i) <= 1e-10) b[static_cast<std::size_t>(i)] = true;
  return b;
}

// Inverts `information` over the non-boundary parameters; boundary rows are NaN.
Eigen::MatrixXd restricted_inverse(const Eigen::MatrixXd& information, const std::vector<bool>& fixed,
                                   bool& ok) {
  const Eigen::Index n = information.rows();
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < n; ++i)
    if (!fixed[static_cast<std::size_t>(i)]) idx.push_back(i);
  const auto m = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd sub(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) sub(a, b) = information(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
  Eigen::MatrixXd out = Eigen::MatrixXd::Constant(n, n, kNaN);
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sub);
  ok = ldlt.info() == Eigen::Success && (ldlt.vectorD().array() > 0).all();
  if (!ok) return out;
  Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(m, m));
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = 0; b < m; ++b) out(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]) = inv(a, b);
  return out;
}

// Intercepts tau = zbar - B xbar and their delta-method standard errors.
void fill_intercepts(SemFit& fit, const MimicLikelihood& lik) {
  const auto& st = fit.stats;
  const Eigen::Index p = st.z_mean.size();
  fit.intercepts = st.z_mean - fit.matrices.slopes * st.x_mean;
  fit.intercept_std_errors = Eigen::VectorXd::Constant(p, kNaN);
  if (fit.exact_fit) return;
  const Eigen::Index n = lik.n_params();
  Eigen::MatrixXd jac(p, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double h = 1e-6 * std::max(1.0, std::abs(fit.theta(i)));
    Eigen::VectorXd up = fit.theta, dn = fit.theta;
    up(i) += h;
    dn(i) -= h;
    jac.col(i) = -(lik.unpack(up).slopes - lik.unpack(dn).slopes) * st.x_mean / (2.0 * h);
  }
  Eigen::MatrixXd cov = fit.covariance.unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
  Eigen::MatrixXd v = jac * cov * jac.transpose();
  double dn = static_cast<double>(st.n);
  for (Eigen::Index a = 0; a < p; ++a)
    fit.intercept_std_errors(a) = std::sqrt(fit.matrices.sigma(a, a) / dn + std::max(v(a, a), 0.0));
}

// Closed-form solution when the residual covariance of a single block is
// singular with exact one-factor structure (noiseless indicators).
bool exact_one_factor(const MimicLikelihood& lik, Eigen::VectorXd& theta, std::string& why) {
  const SemModel& model = lik.model();
  const SufficientStats& st = lik.stats();
  const int p = model.n_endogenous(), big_p = model.n_exogenous();
  Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(p, big_p);
  if (big_p > 0) pi = st.sxx.ldlt().solve(st.szx.transpose()).transpose();
  Eigen::MatrixXd resid = st.szz - pi * st.szx.transpose();
  resid = 0.5 * (resid + resid.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(resid);
  const double scale = std::max(st.szz.trace() / p, 1e-300);
  const double tol = 1e-9 * scale;
  if (es.eigenvalues()(0) > tol) return false;
  if (model.n_latents() != 1 || !model.spec.outcomes.empty()) {
    why = "rank-deficient sample covariance of the endogenous variables";
    return true;
  }
  const auto& b = model.spec.blocks.front();
  const Eigen::Index ref =
      std::find(b.indicators.begin(), b.indicators.end(), b.reference) - b.indicators.begin();
  MimicMatrices m = lik.unpack(Eigen::VectorXd::Zero(lik.n_params()));
  Eigen::VectorXd lambda(p);
  double phi = 0.0;
  const int rank = static_cast<int>((es.eigenvalues().array() > tol).count());
  if (rank == 1) {
    if (resid(ref, ref) <= tol) {
      why = "reference indicator has no residual variance";
      return true;
    }
    lambda = resid.col(ref) / resid(ref, ref);
    phi = resid(ref, ref);
  } else if (rank == 0) {
    double denom = big_p > 0 ? pi.row(ref).squaredNorm() : 0.0;
    if (!(denom > 0)) {
      why = "indicators are constant given the covariates";
      return true;
    }
    lambda = pi * pi.row(ref).transpose() / denom;
  } else {
    why = "rank-deficient sample covariance without one-factor structure";
    return true;
  }
  Eigen::MatrixXd implied = lambda * pi.row(ref);
  if (big_p > 0 && (implied - pi).cwiseAbs().maxCoeff() > 1e-6 * (1.0 + pi.cwiseAbs().maxCoeff())) {
    why = "rank-deficient sample covariance inconsistent with the reduced form";
    return true;
  }
  m.loadings.col(0) = lambda;
  m.phi(0, 0) = phi;
  for (int c = 0; c < big_p; ++c)
    if (model.design_is_covariate[static_cast<std::size_t>(c)]) m.gamma(0, c) = pi(ref, c);
  theta = lik.pack(m);
  return true;
}

}  // namespace

Eigen::Index SemFit::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < info.size(); ++i)
    if (info[i].name == name) return static_cast<Eigen::Index>(i);
  throw InputError("no parameter named '" + std::string(name) + "'");
}

double SemFit::loading(std::string_view indicator) const {
  for (std::size_t j = 0; j < model.spec.blocks.size(); ++j) {
    const auto& b = model.spec.blocks[j];
    for (std::size_t i = 0; i < b.indicators.size(); ++i)
      if (b.indicators[i] == indicator) {
        auto row = std::find(model.endogenous.begin(), model.endogenous.end(), indicator) -
                   model.endogenous.begin();
        return matrices.loadings(row, static_cast<Eigen::Index>(j));
      }
  }
  throw InputError("'" + std::string(indicator) + "' is not an indicator");
}

std::vector<SemParameter> SemFit::parameters() const {
  std::vector<SemParameter> out;
  for (const auto& b : model.spec.blocks)
    out.push_back({{"lambda:" + b.reference, "loading", b.latent, b.reference, false}, 1.0, kNaN, true, false});
  for (std::size_t i = 0; i < info.size(); ++i) {
    bool at_bound = std::find(boundary.begin(), boundary.end(), info[i].name) != boundary.end();
    out.push_back({info[i], theta(static_cast<Eigen::Index>(i)), std_errors(static_cast<Eigen::Index>(i)), false, at_bound});
  }
  for (std::size_t a = 0; a < model.endogenous.size(); ++a)
    out.push_back({{"nu:" + model.endogenous[a], "intercept", model.endogenous[a], "_cons", false},
                   intercepts(static_cast<Eigen::Index>(a)), intercept_std_errors(static_cast<Eigen::Index>(a)), false, false});
  return out;
}

SemFit fit_sem(const SemModel& model, const CohortTable& data, const SemOptions& options) {
  ModelData md = model_data(model, data);
  const auto n = static_cast<Eigen::Index>(md.rows.size());
  if (n <= model.counts.total())
    throw InputError("N = " + std::to_string(n) + " does not exceed the " +
                     std::to_string(model.counts.total()) + " free parameters");
  if (model.n_exogenous() > 0) {
    Eigen::MatrixXd xc = md.x.rowwise() - md.x.colwise().mean();
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
    qr.setThreshold(1e-10);
    qr.compute(xc);
    if (qr.rank() < md.x.cols()) {
      auto bad = static_cast<std::size_t>(qr.colsPermutation().indices()(qr.rank()));
      throw NumericalError("exogenous design is rank deficient: '" + model.exogenous_design[bad] +
                           "' is collinear or constant");
    }
  }

  SemFit fit;
  fit.model = model;
  fit.stats = sufficient_stats(md);
  fit.n = n;
  fit.dropped = md.dropped;
  fit.degrees_of_freedom = model.degrees_of_freedom;
  fit.se_type = options.se;
  MimicLikelihood lik(model, fit.stats);
  fit.info = lik.info();
  const Eigen::Index np = lik.n_params();

  Eigen::VectorXd exact;
  std::string why;
  if (exact_one_factor(lik, exact, why)) {
    if (!why.empty()) throw NumericalError(why);
    fit.theta = exact;
    fit.matrices = lik.unpack(exact);
    fit.exact_fit = true;
    fit.converged = true;
    fit.loglik = kInf;
    fit.std_errors = Eigen::VectorXd::Constant(np, kNaN);
    fit.covariance = Eigen::MatrixXd::Constant(np, np, kNaN);
    fit.starts.push_back({"exact", kInf, 0, 0.0, true, {}});
    auto flags = boundary_flags(lik, exact);
    for (Eigen::Index i = 0; i < np; ++i)
      if (flags[static_cast<std::size_t>(i)]) fit.boundary.push_back(fit.info[static_cast<std::size_t>(i)].name);
    fit.warnings.push_back("exact fit: residual covariance is singular with one-factor structure; "
                           "likelihood unbounded and standard errors unavailable");
    fill_intercepts(fit, lik);
    return fit;
  }

  Eigen::VectorXd base = efa_start(lik);
  std::vector<OptResult> results;
  results.push_back(optimize(lik, base, options));
  fit.starts.push_back({"efa", results.back().f * static_cast<double>(n), results.back().iterations,
                        results.back().gradient_norm, results.back().converged, {}});
  std::mt19937_64 rng(options.seed ^ fnv1a("sem-restarts"));
  for (int r = 0; r < options.random_restarts; ++r) {
    results.push_back(optimize(lik, random_start(lik, base, rng), options));
    fit.starts.push_back({"random-" + std::to_string(r + 1), results.back().f * static_cast<double>(n),
                          results.back().iterations, results.back().gradient_norm,
                          results.back().converged, {}});
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    fit.starts[i].trace.reserve(results[i].trace.size());
    for (double v : results[i].trace) fit.starts[i].trace.push_back(v * static_cast<double>(n));
  }
  int best = -1;
  for (std::size_t i = 0; i < results.size(); ++i)
    if (results[i].converged && (best < 0 || results[i].f > results[static_cast<std::size_t>(best)].f))
      best = static_cast<int>(i);
  if (best < 0) {
    fit.theta = results.front().theta;
    throw NumericalError("SEM did not converge from any start\n" + sem_convergence_log(fit));
  }
  const OptResult& opt = results[static_cast<std::size_t>(best)];
  fit.best_start = best;
  fit.theta = opt.theta;
  fit.converged = true;
  fit.iterations = opt.iterations;
  fit.gradient_norm = opt.gradient_norm;
  fit.max_step = opt.max_step;
  fit.loglik = lik.loglik(fit.theta);
  fit.matrices = lik.unpack(fit.theta);
  fit.gradient_check = gradient_discrepancy(lik, fit.theta);

  auto fixed = boundary_flags(lik, fit.theta);
  for (Eigen::Index i = 0; i < np; ++i)
    if (fixed[static_cast<std::size_t>(i)]) {
      fit.theta(i) = 0.0;
      fit.boundary.push_back(fit.info[static_cast<std::size_t>(i)].name);
      fit.warnings.push_back("Heywood case: " + fit.info[static_cast<std::size_t>(i)].name +
                             " pinned at 0");
    }
  fit.matrices = lik.unpack(fit.theta);

  const double dn = static_cast<double>(n);
  Eigen::MatrixXd information = -dn * lik.hessian(fit.theta);
  bool ok = false;
  Eigen::MatrixXd bread = restricted_inverse(information, fixed, ok);
  if (!ok) fit.warnings.push_back("information matrix is not positive definite; standard errors unavailable");
  if (ok && options.se == SemSe::Sandwich) {
    const Eigen::Index p = model.n_endogenous();
    Eigen::MatrixXd inv = fit.matrices.sigma.llt().solve(Eigen::MatrixXd::Identity(p, p));
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(np, np);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd z = md.z.row(i).transpose() - fit.stats.z_mean;
      Eigen::VectorXd x = md.x.row(i).transpose() - fit.stats.x_mean;
      Eigen::VectorXd r = z - fit.matrices.slopes * x;
      Eigen::VectorXd ir = inv * r;
      Eigen::MatrixXd g_sigma = -0.5 * (inv - ir * ir.transpose());
      Eigen::MatrixXd g_b = ir * x.transpose();
      Eigen::VectorXd s = lik.chain(fit.matrices, g_sigma, g_b);
      meat += s * s.transpose();
    }
    Eigen::MatrixXd b0 = bread.unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
    fit.covariance = b0 * meat * b0;
    for (Eigen::Index i = 0; i < np; ++i)
      if (fixed[static_cast<std::size_t>(i)]) {
        fit.covariance.row(i).setConstant(kNaN);
        fit.covariance.col(i).setConstant(kNaN);
      }
  } else {
    fit.covariance = bread;
  }
  fit.std_errors = fit.covariance.diagonal().unaryExpr([](double v) { return v >= 0 ? std::sqrt(v) : kNaN; });
  fill_intercepts(fit, lik);
  return fit;
}

ScoreMode parse_score_mode(std::string_view s) {
  if (s == "linear-prediction" || s == "linear") return ScoreMode::LinearPrediction;
  if (s == "regression-score" || s == "regression") return ScoreMode::RegressionScore;
  throw InputError("unknown score mode '" + std::string(s) + "'");
}

Eigen::VectorXd latent_scores(const SemFit& fit, const CohortTable& data, ScoreMode mode,
                              std::string_view latent) {
  const SemModel& model = fit.model;
  if (mode == ScoreMode::LinearPrediction && model.spec.config != StructuralConfig::LatentOnCovariates)
    throw InputError("linear prediction requires the latent-on-covariates structure");
  const int j = latent.empty() ? 0 : model.latent_index(latent);
  const auto& block = model.spec.blocks[static_cast<std::size_t>(j)];
  const auto ref = std::find(model.endogenous.begin(), model.endogenous.end(), block.reference) -
                   model.endogenous.begin();
  ModelData md = model_data(model, data);
  const auto& m = fit.matrices;
  Eigen::VectorXd lin = Eigen::VectorXd::Constant(md.z.rows(), fit.intercepts(ref));
  if (md.x.cols() > 0) lin += md.x * m.gamma.row(j).transpose();
  Eigen::VectorXd score = lin;
  if (mode == ScoreMode::RegressionScore) {
    Eigen::MatrixXd resid = md.z.transpose();
    resid.colwise() -= fit.intercepts;
    if (md.x.cols() > 0) resid -= m.slopes * md.x.transpose();
    Eigen::MatrixXd weight;  // Phi L' Sigma^-1, pseudo-inverse when singular
    Eigen::LLT<Eigen::MatrixXd> llt(m.sigma);
    Eigen::MatrixXd plt = m.phi * m.loadings.transpose();
    if (llt.info() == Eigen::Success && !fit.exact_fit) {
      weight = llt.solve(plt.transpose()).transpose();
    } else {
      Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(m.sigma);
      weight = plt * cod.pseudoInverse();
    }
    score += (weight.row(j) * resid).transpose();
  }
  Eigen::VectorXd out = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(data.rows()), kNaN);
  for (std::size_t i = 0; i < md.rows.size(); ++i) out(static_cast<Eigen::Index>(md.rows[i])) = score(static_cast<Eigen::Index>(i));
  return out;
}

SemFit rescale_reference(const SemFit& fit, std::string_view indicator) {
  const SemModel& old_model = fit.model;
  int j = -1;
  for (std::size_t b = 0; b < old_model.spec.blocks.size(); ++b)
    if (contains(old_model.spec.blocks[b].indicators, std::string(indicator))) j = static_cast<int>(b);
  if (j < 0) throw InputError("'" + std::string(indicator) + "' is not an indicator of any latent");
  if (old_model.spec.blocks[static_cast<std::size_t>(j)].reference == indicator) return fit;
  const double c = fit.loading(indicator);
  if (!(std::abs(c) > 1e-12)) throw InputError("zero loading on requested reference '" + std::string(indicator) + "'");

  SemModel new_model = old_model;
  new_model.spec.blocks[static_cast<std::size_t>(j)].reference = std::string(indicator);
  MimicLikelihood old_lik(old_model, fit.stats), new_lik(new_model, fit.stats);

  auto transform = [&](const Eigen::VectorXd& theta) {
    MimicMatrices m = old_lik.unpack(theta);
    double scale = m.loadings(std::find(old_model.endogenous.begin(), old_model.endogenous.end(), indicator) -
                                  old_model.endogenous.begin(), j);
    m.loadings.col(j) /= scale;
    m.gamma.row(j) *= scale;
    m.phi.row(j) *= scale;
    m.phi.col(j) *= scale;
    return new_lik.pack(m);
  };

  SemFit out = fit;
  out.model = new_model;
  out.info = new_lik.info();
  out.theta = transform(fit.theta);
  out.matrices = new_lik.unpack(out.theta);
  out.loglik = fit.exact_fit ? fit.loglik : new_lik.loglik(out.theta);

  const Eigen::Index np = new_lik.n_params();
  Eigen::MatrixXd jac(np, np);
  for (Eigen::Index i = 0; i < np; ++i) {
    double h = 1e-6 * std::max(1.0, std::abs(fit.theta(i)));
    Eigen::VectorXd up = fit.theta, dn = fit.theta;
    up(i) += h;
    dn(i) -= h;
    jac.col(i) = (transform(up) - transform(dn)) / (2.0 * h);
  }
  std::vector<bool> nan_rows(static_cast<std::size_t>(np), false);
  for (Eigen::Index i = 0; i < np; ++i) nan_rows[static_cast<std::size_t>(i)] = !std::isfinite(fit.covariance(i, i));
  Eigen::MatrixXd cov = fit.covariance.unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
  out.covariance = jac * cov * jac.transpose();
  for (Eigen::Index r = 0; r < np; ++r)
    for (Eigen::Index i = 0; i < np; ++i)
      if (nan_rows[static_cast<std::size_t>(i)] && jac(r, i) != 0.0) {
        out.covariance.row(r).setConstant(kNaN);
        out.covariance.col(r).setConstant(kNaN);
      }
  out.std_errors = out.covariance.diagonal().unaryExpr([](double v) { return v >= 0 ? std::sqrt(v) : kNaN; });
  if (!fit.exact_fit) out.gradient_check = gradient_discrepancy(new_lik, out.theta);
  return out;
}

std::string sem_parameters_csv(const SemFit& fit) {
  std::string out = csv_line({"parameter", "kind", "lhs", "rhs", "estimate", "std_error", "z",
                              "p_value", "fixed", "boundary"});
  for (const auto& p : fit.parameters()) {
    double z = p.estimate / p.std_error;
    out += csv_line({p.info.name, p.info.kind, p.info.lhs, p.info.rhs, format_number(p.estimate),
                     format_number(p.std_error), format_number(p.fixed ? kNaN : z),
                     format_number(p.fixed ? kNaN : normal_p(z)), p.fixed ? "1" : "0",
                     p.boundary ? "1" : "0"});
  }
  return out;
}

std::string sem_convergence_log(const SemFit& fit) {
  std::ostringstream os;
  for (std::size_t i = 0; i < fit.starts.size(); ++i) {
    const auto& s = fit.starts[i];
    os << "start " << s.label << ": converged=" << (s.converged ? "yes" : "no")
       << " iterations=" << s.iterations << " loglik=" << format_number(s.loglik)
       << " gradient=" << format_number(s.gradient_norm)
       << (static_cast<int>(i) == fit.best_start && fit.converged ? " (best)" : "") << "\n";
    for (std::size_t k = 0; k < s.trace.size(); ++k)
      os << "  step " << (k + 1) << " loglik=" << format_number(s.trace[k]) << "\n";
  }
  os << "final: converged=" << (fit.converged ? "yes" : "no") << " loglik=" << format_number(fit.loglik)
     << " gradient=" << format_number(fit.gradient_norm) << " max_step=" << format_number(fit.max_step)
     << " gradient_check=" << format_number(fit.gradient_check) << "\n";
  for (const auto& w : fit.warnings) os << "warning: " << w << "\n";
  return os.str();
}

std::string sem_summary_text(const SemFit& fit) {
  std::ostringstream os;
  os << "MIMIC model (" << to_string(fit.model.spec.config) << "), N = " << fit.n;
  if (fit.dropped > 0) os << " (" << fit.dropped << " incomplete rows dropped)";
  os << "\nlog-likelihood = " << format_fixed(fit.loglik, 3) << ", df = " << fit.degrees_of_freedom
     << "\n\n";
  std::size_t w = 12;
  auto params = fit.parameters();
  for (const auto& p : params) w = std::max(w, p.info.name.size() + 2);
  os << std::string(w, ' ') << "   estimate    std.err.\n";
  for (const auto& p : params) {
    std::string name = p.info.name;
    os << name << std::string(w - name.size(), ' ');
    std::string est = format_fixed(p.estimate, 3) + (p.fixed ? "" : stars(normal_p(p.estimate / p.std_error)));
    os << std::string(est.size() < 11 ? 11 - est.size() : 0, ' ') << est;
    std::string se = p.fixed ? "(fixed)" : "(" + format_fixed(p.std_error, 3) + ")";
    os << std::string(se.size() < 12 ? 12 - se.size() : 0, ' ') << se;
    if (p.boundary) os << "  boundary";
    os << "\n";
  }
  for (const auto& warn : fit.warnings) os << "warning: " << warn << "\n";
  return os.str();
}

}  // namespace mega
