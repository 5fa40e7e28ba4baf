#pragma once

// Hand-rolled generators and independent reference computations shared by the
// unit, property and acceptance tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mega/aggregation.hpp"
#include "mega/cohort_data.hpp"

namespace mega::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double normal(double mean = 0.0, double sd = 1.0) { return std::normal_distribution<double>(mean, sd)(rng_); }
  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return uniform() < p; }

  Eigen::VectorXd normal_vector(Eigen::Index n, double sd = 1.0) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(0.0, sd);
    return v;
  }
  Eigen::MatrixXd normal_matrix(Eigen::Index r, Eigen::Index c, double sd = 1.0) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal(0.0, sd);
    return m;
  }
  // Correlated clock-like readings: common factor plus clock noise, years scale.
  Eigen::MatrixXd clock_readings(Eigen::Index n, Eigen::Index k) {
    Eigen::VectorXd f = normal_vector(n, uniform(1.0, 3.0));
    Eigen::MatrixXd c(n, k);
    for (Eigen::Index j = 0; j < k; ++j) {
      double a = uniform(5.0, 40.0), l = uniform(0.5, 1.5), s = uniform(1.0, 4.0);
      for (Eigen::Index i = 0; i < n; ++i) c(i, j) = a + l * f(i) + normal(0.0, s);
    }
    return c;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline std::vector<std::string> clock_names(Eigen::Index k) {
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < k; ++j) names.push_back("clock" + std::to_string(j + 1));
  return names;
}

inline ClockPanel make_panel(const Eigen::MatrixXd& readings) {
  return ClockPanel(clock_names(readings.cols()), readings);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }
inline double max_rel_diff(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double m = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) m = std::max(m, rel_diff(a(i), b(i)));
  return m;
}

// Normal-equation least squares (reference for the QR solver).
inline Eigen::VectorXd normal_equations(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  return (x.transpose() * x).ldlt().solve(x.transpose() * y);
}

// HC1 covariance from an explicit per-observation sum.
inline Eigen::MatrixXd hc1_bruteforce(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Eigen::Index n = x.rows(), k = x.cols();
  Eigen::VectorXd b = normal_equations(x, y);
  Eigen::MatrixXd bread = (x.transpose() * x).inverse();
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    double e = y(i) - x.row(i).dot(b);
    meat += e * e * x.row(i).transpose() * x.row(i);
  }
  return static_cast<double>(n) / static_cast<double>(n - k) * bread * meat * bread;
}

// Full Kronecker GLS on the stacked system C_k = X b + e_k, Var = M (x) I.
inline Eigen::VectorXd kronecker_gls(const Eigen::MatrixXd& clocks, const Eigen::MatrixXd& x,
                                     const Eigen::MatrixXd& m) {
  const Eigen::Index n = clocks.rows(), k = clocks.cols(), p = x.cols();
  Eigen::MatrixXd z(n * k, p);
  Eigen::VectorXd y(n * k);
  for (Eigen::Index j = 0; j < k; ++j) {
    z.middleRows(j * n, n) = x;
    y.segment(j * n, n) = clocks.col(j);
  }
  Eigen::MatrixXd minv = m.inverse();
  Eigen::MatrixXd omega_inv = Eigen::MatrixXd::Zero(n * k, n * k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b)
      omega_inv.block(a * n, b * n, n, n) = minv(a, b) * Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd zt = z.transpose() * omega_inv;
  return (zt * z).ldlt().solve(zt * y);
}

inline Eigen::MatrixXd unbiased_covariance(const Eigen::MatrixXd& data) {
  Eigen::MatrixXd c = data.rowwise() - data.colwise().mean();
  return c.transpose() * c / static_cast<double>(data.rows() - 1);
}

inline CohortTable table_from(const std::vector<std::string>& names, const Eigen::MatrixXd& data) {
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < data.rows(); ++i) ids.push_back("S" + std::to_string(i + 1));
  CohortTable t(ids);
  for (std::size_t j = 0; j < names.size(); ++j) {
    Column c{names[j], ColumnType::Continuous, {}, {}, false};
    const auto col = data.col(static_cast<Eigen::Index>(j));
    c.values.assign(col.data(), col.data() + col.size());
    t.add_column(std::move(c));
  }
  return t;
}

}  // namespace mega::testing
