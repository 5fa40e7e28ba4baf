#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mega/error.hpp"
#include "mega/sem.hpp"
#include "mega/simulator.hpp"
#include "support.hpp"

using namespace mega;
using namespace mega::testing;

namespace {

// Indicators z_k = lambda_k * eta + e_k, eta = x * gamma + omega.
CohortTable mimic_data(std::uint64_t seed, Eigen::Index n, const Eigen::VectorXd& lambda,
                       const Eigen::VectorXd& gamma, double error_sd = 1.0, double omega_sd = 1.0) {
  Gen g(seed);
  const Eigen::Index k = lambda.size(), p = gamma.size();
  Eigen::MatrixXd x = g.normal_matrix(n, p);
  Eigen::VectorXd eta = x * gamma + g.normal_vector(n, omega_sd);
  Eigen::MatrixXd data(n, k + p);
  for (Eigen::Index j = 0; j < k; ++j) data.col(j) = lambda(j) * eta + g.normal_vector(n, error_sd);
  data.rightCols(p) = x;
  std::vector<std::string> names = clock_names(k);
  for (Eigen::Index j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
  return table_from(names, data);
}

MimicSpec one_block(Eigen::Index k, Eigen::Index p) {
  MimicSpec s;
  s.blocks.push_back({"EA", clock_names(k), "clock1"});
  for (Eigen::Index j = 0; j < p; ++j) s.covariates.push_back("x" + std::to_string(j + 1));
  return s;
}

// Per-observation Gaussian log density at the concentrated intercepts.
double direct_loglik(const SemFit& fit, const CohortTable& t) {
  ModelData md = model_data(fit.model, t);
  Eigen::VectorXd zbar = md.z.colwise().mean();
  Eigen::VectorXd xbar = md.x.cols() ? Eigen::VectorXd(md.x.colwise().mean()) : Eigen::VectorXd();
  const auto& m = fit.matrices;
  Eigen::LLT<Eigen::MatrixXd> llt(m.sigma);
  const double p = static_cast<double>(md.z.cols());
  double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  double total = 0.0;
  for (Eigen::Index i = 0; i < md.z.rows(); ++i) {
    Eigen::VectorXd r = md.z.row(i).transpose() - zbar;
    if (md.x.cols()) r -= m.slopes * (md.x.row(i).transpose() - xbar);
    total += -0.5 * (p * std::log(2.0 * std::numbers::pi) + logdet + r.dot(llt.solve(r)));
  }
  return total;
}

}  // namespace

TEST_CASE("model files parse") {
  auto s = parse_model_spec("latent EA = a b c\nreference EA = b\ncovariates = x y\n");
  REQUIRE(s.blocks.size() == 1);
  CHECK(s.blocks[0].reference == "b");
  CHECK(s.covariates == std::vector<std::string>{"x", "y"});
  CHECK(s.config == StructuralConfig::LatentOnCovariates);
  auto o = parse_model_spec("latent EA = a b c\noutcomes = y\nstructure = outcome-on-latent\n");
  CHECK(o.config == StructuralConfig::OutcomeOnLatent);
  CHECK(o.blocks[0].reference == "a");
  CHECK_THROWS_AS(parse_model_spec("latent EA a b\n"), InputError);
}

TEST_CASE("parameter counts and identification") {
  Eigen::VectorXd g = Eigen::VectorXd::Constant(10, 0.1);
  auto t = mimic_data(1, 200, Eigen::Vector4d(1, 0.8, 1.2, 0.9), g);
  auto m = build_mimic(one_block(4, 10), t);
  CHECK(m.counts.loadings == 3);
  CHECK(m.counts.gamma == 10);
  CHECK(m.counts.error_variances + m.counts.latent_variances == 5);
  CHECK(m.degrees_of_freedom == 4 * 5 / 2 + 4 * 11 - m.counts.total());
  MimicSpec one;
  one.blocks.push_back({"EA", {"clock1"}, "clock1"});
  CHECK_THROWS_WITH_AS(build_mimic(one, t), doctest::Contains("under-identified"), InputError);
  MimicSpec bad = one_block(4, 1);
  bad.blocks[0].reference = "x1";
  CHECK_THROWS_AS(build_mimic(bad, t), InputError);
}

TEST_CASE("three measurement blocks build") {
  Gen g(2);
  std::vector<std::string> names;
  for (int j = 1; j <= 4; ++j) names.push_back("clock" + std::to_string(j));
  for (int j = 1; j <= 4; ++j) names.push_back("cog" + std::to_string(j));
  for (int j = 1; j <= 5; ++j) names.push_back("se" + std::to_string(j));
  names.push_back("x1");
  auto t = table_from(names, g.normal_matrix(300, static_cast<Eigen::Index>(names.size())));
  MimicSpec s;
  s.blocks.push_back({"EA", {"clock1", "clock2", "clock3", "clock4"}, "clock1"});
  s.blocks.push_back({"COG", {"cog1", "cog2", "cog3", "cog4"}, "cog1"});
  s.blocks.push_back({"SE", {"se1", "se2", "se3", "se4", "se5"}, "se1"});
  s.covariates = {"x1"};
  auto m = build_mimic(s, t);
  CHECK(m.n_latents() == 3);
  CHECK(m.counts.latent_covariances == 3);
  CHECK(m.counts.loadings == 3 + 3 + 4);
}

TEST_CASE("analytic gradient matches central differences away from the optimum") {
  auto t = mimic_data(3, 500, Eigen::Vector3d(1, 0.7, 1.3), Eigen::Vector2d(0.5, -0.3));
  auto m = build_mimic(one_block(3, 2), t);
  MimicLikelihood lik(m, sufficient_stats(model_data(m, t)));
  Gen g(4);
  for (int rep = 0; rep < 20; ++rep) {
    Eigen::VectorXd theta(lik.n_params());
    const auto& info = lik.info();
    for (Eigen::Index i = 0; i < theta.size(); ++i)
      theta(i) = info[static_cast<std::size_t>(i)].variance ? g.uniform(0.5, 2.0) : g.uniform(-1.0, 1.5);
    CHECK(gradient_discrepancy(lik, theta) < 1e-6);
  }
}

TEST_CASE("outcome-on-latent gradient") {
  Gen g(5);
  const Eigen::Index n = 400;
  Eigen::VectorXd eta = g.normal_vector(n);
  Eigen::MatrixXd d(n, 5);
  for (int j = 0; j < 3; ++j) d.col(j) = (1.0 + 0.2 * j) * eta + g.normal_vector(n);
  d.col(4) = g.normal_vector(n);
  d.col(3) = 0.4 * eta + 0.3 * d.col(4) + g.normal_vector(n);
  auto t = table_from({"clock1", "clock2", "clock3", "y", "h"}, d);
  auto s = parse_model_spec("latent EA = clock1 clock2 clock3\noutcomes = y\ncontrols = h\nstructure = outcome-on-latent\n");
  auto m = build_mimic(s, t);
  MimicLikelihood lik(m, sufficient_stats(model_data(m, t)));
  Eigen::VectorXd theta = Eigen::VectorXd::Constant(lik.n_params(), 0.6);
  CHECK(gradient_discrepancy(lik, theta) < 1e-6);
  auto fit = fit_sem(m, t);
  CHECK(fit.converged);
  CHECK(std::abs(fit.estimate("delta:y:EA") - 0.4) < 4.0 * fit.se("delta:y:EA"));
  CHECK(std::abs(fit.estimate("theta:y:h") - 0.3) < 4.0 * fit.se("theta:y:h"));
}

TEST_CASE("fitted log-likelihood equals the direct Gaussian density") {
  auto t = mimic_data(6, 800, Eigen::Vector4d(1, 0.8, 1.2, 0.9), Eigen::Vector2d(0.5, -0.3));
  auto m = build_mimic(one_block(4, 2), t);
  auto fit = fit_sem(m, t);
  REQUIRE(fit.converged);
  CHECK(fit.loglik == doctest::Approx(direct_loglik(fit, t)).epsilon(1e-10));
  CHECK(fit.gradient_check < 1e-5);
  CHECK(fit.loading("clock1") == 1.0);
  for (const auto& p : fit.parameters())
    if (p.info.variance) CHECK(p.estimate >= 0.0);
}

TEST_CASE("estimates recover the generating model") {
  Eigen::Vector4d lambda(1, 0.8, 1.2, 0.9);
  auto t = mimic_data(7, 20000, lambda, Eigen::Vector2d(0.5, -0.3));
  auto fit = fit_sem(build_mimic(one_block(4, 2), t), t);
  REQUIRE(fit.converged);
  for (int j = 1; j < 4; ++j) {
    std::string name = "lambda:clock" + std::to_string(j + 1);
    CHECK(std::abs(fit.estimate(name) - lambda(j)) < 3.0 * fit.se(name));
  }
  CHECK(std::abs(fit.estimate("gamma:EA:x1") - 0.5) < 3.0 * fit.se("gamma:EA:x1"));
  CHECK(std::abs(fit.estimate("gamma:EA:x2") + 0.3) < 3.0 * fit.se("gamma:EA:x2"));
  CHECK(std::abs(fit.estimate("phi:EA") - 1.0) < 3.0 * fit.se("phi:EA"));
}

TEST_CASE("sandwich errors are close to information errors under correct specification") {
  auto t = mimic_data(8, 5000, Eigen::Vector3d(1, 0.8, 1.2), Eigen::VectorXd::Constant(1, 0.5));
  auto m = build_mimic(one_block(3, 1), t);
  SemOptions o;
  o.se = SemSe::Sandwich;
  auto a = fit_sem(m, t);
  auto b = fit_sem(m, t, o);
  for (Eigen::Index i = 0; i < a.std_errors.size(); ++i)
    CHECK(b.std_errors(i) == doctest::Approx(a.std_errors(i)).epsilon(0.15));
}

TEST_CASE("noiseless one-factor data fit exactly") {
  Gen g(9);
  const Eigen::Index n = 100;
  Eigen::VectorXd x = g.normal_vector(n);
  // Latent noise orthogonal to [1, x] in sample, so least squares returns 0.5 exactly.
  Eigen::MatrixXd design(n, 2);
  design << Eigen::VectorXd::Ones(n), x;
  Eigen::VectorXd omega = g.normal_vector(n);
  omega -= design * design.colPivHouseholderQr().solve(omega);
  Eigen::VectorXd ea = 0.5 * x + omega;
  Eigen::MatrixXd d(n, 5);
  for (int j = 0; j < 4; ++j) d.col(j) = ea;
  d.col(4) = x;
  auto t = table_from({"clock1", "clock2", "clock3", "clock4", "x1"}, d);
  auto fit = fit_sem(build_mimic(one_block(4, 1), t), t);
  CHECK(fit.exact_fit);
  for (int j = 1; j <= 4; ++j) CHECK(fit.loading("clock" + std::to_string(j)) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(fit.estimate("gamma:EA:x1") == doctest::Approx(0.5).epsilon(1e-10) );
  auto scores = latent_scores(fit, t, ScoreMode::RegressionScore);
  CHECK((scores - ea).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("linear prediction with zero slopes is the reference intercept") {
  auto t = mimic_data(10, 300, Eigen::Vector3d(1, 0.8, 1.2), Eigen::Vector2d(0.5, -0.3));
  auto fit = fit_sem(build_mimic(one_block(3, 2), t), t);
  fit.matrices.gamma.setZero();
  auto s = latent_scores(fit, t, ScoreMode::LinearPrediction);
  CHECK((s.array() - fit.intercepts(0)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("regression scores track the latent better than any single indicator") {
  Gen g(11);
  const Eigen::Index n = 20000;
  Eigen::MatrixXd x = g.normal_matrix(n, 2);
  Eigen::VectorXd ea = x * Eigen::Vector2d(0.5, -0.3) + g.normal_vector(n);
  Eigen::Vector4d lambda(1, 0.8, 1.2, 0.9);
  Eigen::MatrixXd d(n, 6);
  for (int j = 0; j < 4; ++j) d.col(j) = lambda(j) * ea + g.normal_vector(n);
  d.rightCols(2) = x;
  auto t = table_from({"clock1", "clock2", "clock3", "clock4", "x1", "x2"}, d);
  auto fit = fit_sem(build_mimic(one_block(4, 2), t), t);
  auto s = latent_scores(fit, t, ScoreMode::RegressionScore);
  auto corr = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    Eigen::VectorXd u = a.array() - a.mean(), v = b.array() - b.mean();
    return u.dot(v) / (u.norm() * v.norm());
  };
  double cs = corr(s, ea);
  for (int j = 0; j < 4; ++j) CHECK(cs > corr(d.col(j), ea));
}

TEST_CASE("reference rescaling") {
  auto t = mimic_data(12, 3000, Eigen::Vector2d(1.0, 2.0), Eigen::VectorXd::Constant(1, 0.5));
  auto fit = fit_sem(build_mimic(one_block(2, 1), t), t);
  auto same = rescale_reference(fit, "clock1");
  CHECK(same.theta == fit.theta);
  auto r = rescale_reference(fit, "clock2");
  const double l2 = fit.loading("clock2");
  CHECK(r.loading("clock2") == 1.0);
  CHECK(r.loading("clock1") == doctest::Approx(1.0 / l2).epsilon(1e-12));
  // eta' = l2 * eta: slopes scale up by l2 and the latent variance by l2^2.
  CHECK(r.estimate("gamma:EA:x1") == doctest::Approx(l2 * fit.estimate("gamma:EA:x1")).epsilon(1e-12));
  CHECK(r.estimate("phi:EA") == doctest::Approx(l2 * l2 * fit.estimate("phi:EA")).epsilon(1e-12));
  CHECK(r.loglik == doctest::Approx(fit.loglik).epsilon(1e-12));
  CHECK(std::abs(l2 - 2.0) < 0.2);
  CHECK_THROWS_AS(rescale_reference(fit, "x1"), InputError);
}

TEST_CASE("score spread follows the reference scaling") {
  // Scaling by an indicator with a larger loading widens the scores.
  auto t = mimic_data(13, 2000, Eigen::Vector3d(1.0, 2.0, 0.5), Eigen::VectorXd::Constant(1, 0.5));
  auto fit = fit_sem(build_mimic(one_block(3, 1), t), t);
  auto sd = [](const Eigen::VectorXd& v) { return std::sqrt((v.array() - v.mean()).square().sum() / (v.size() - 1.0)); };
  double s2 = sd(latent_scores(rescale_reference(fit, "clock2"), t, ScoreMode::RegressionScore));
  double s3 = sd(latent_scores(rescale_reference(fit, "clock3"), t, ScoreMode::RegressionScore));
  CHECK(s2 > s3);
}

TEST_CASE("restarts are seeded and reproducible") {
  auto t = mimic_data(14, 500, Eigen::Vector3d(1, 0.8, 1.2), Eigen::VectorXd::Constant(1, 0.5));
  auto m = build_mimic(one_block(3, 1), t);
  SemOptions o;
  o.seed = 42;
  auto a = fit_sem(m, t, o);
  auto b = fit_sem(m, t, o);
  CHECK(a.theta == b.theta);
  CHECK(a.starts.size() == 4);
  CHECK(sem_convergence_log(a) == sem_convergence_log(b));
  CHECK(sem_summary_text(a).find("lambda:clock2") != std::string::npos);
}

TEST_CASE("rank-deficient covariates are a numerical failure") {
  Gen g(15);
  Eigen::MatrixXd d = g.normal_matrix(200, 5);
  d.col(4) = d.col(3) * 2.0;
  auto t = table_from({"clock1", "clock2", "clock3", "x1", "x2"}, d);
  CHECK_THROWS_AS(fit_sem(build_mimic(one_block(3, 2), t), t), NumericalError);
}
