#include "fewshot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fewshot {

namespace {

// Pairwise squared Euclidean distances via the Gram trick.
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
  const Eigen::VectorXd xn = x.rowwise().squaredNorm();
  const Eigen::VectorXd yn = y.rowwise().squaredNorm();
  Eigen::MatrixXd d = -2.0 * (x * y.transpose());
  d.colwise() += xn;
  d.rowwise() += yn.transpose();
  return d.array().max(0.0);
}

std::vector<double> column_sorted(const Eigen::MatrixXd& m, Eigen::Index t) {
  std::vector<double> v(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) v[static_cast<std::size_t>(i)] = m(i, t);
  std::sort(v.begin(), v.end());
  return v;
}

double ks_1d(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double sup = 0.0;
  while (i < a.size() && j < b.size()) {
    const double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    sup = std::max(sup, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return sup;
}

double wd_1d(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() == b.size()) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
    return sum / static_cast<double>(a.size());
  }
  // Piecewise-constant quantile integral for unequal sizes.
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double level = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min(static_cast<double>(i + 1) / na,
                                 static_cast<double>(j + 1) / nb);
    total += (next - level) * std::abs(a[i] - b[j]);
    level = next;
    if (static_cast<double>(i + 1) / na <= level + 1e-15) ++i;
    if (static_cast<double>(j + 1) / nb <= level + 1e-15) ++j;
  }
  return total;
}

}  // namespace

double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() < 2 || b.rows() < 2) throw UsageError("mmd: need at least 2 points per set");
  if (a.cols() != b.cols()) throw UsageError("mmd: dimension mismatch");
  if (a.rows() == b.rows() && (a.array() == b.array()).all()) return 0.0;
  Eigen::MatrixXd pooled(a.rows() + b.rows(), a.cols());
  pooled.topRows(a.rows()) = a;
  pooled.bottomRows(b.rows()) = b;
  const Eigen::MatrixXd d2 = squared_distances(pooled, pooled);

  // Median heuristic over distinct pairs of the pooled set.
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(d2.rows()) * (d2.rows() - 1) / 2);
  for (Eigen::Index i = 0; i < d2.rows(); ++i)
    for (Eigen::Index j = i + 1; j < d2.cols(); ++j)
      dists.push_back(std::sqrt(d2(i, j)));
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  const double h = dists[dists.size() / 2];
  if (h <= 0.0) return 0.0;  // all points identical

  const Eigen::MatrixXd kernel = (-d2.array() / (2.0 * h * h)).exp();
  const Eigen::Index m = a.rows(), n = b.rows();
  const double kaa = kernel.topLeftCorner(m, m).mean();
  const double kbb = kernel.bottomRightCorner(n, n).mean();
  const double kab = kernel.topRightCorner(m, n).mean();
  return std::sqrt(std::max(0.0, kaa + kbb - 2.0 * kab));
}

double kl_knn(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int k) {
  const Eigen::Index ma = a.rows(), mb = b.rows();
  if (ma <= k || mb <= k) throw UsageError("kl_knn: need more than k points in each set");
  if (a.cols() != b.cols()) throw UsageError("kl_knn: dimension mismatch");
  const double T = static_cast<double>(a.cols());
  const Eigen::MatrixXd daa = squared_distances(a, a);
  const Eigen::MatrixXd dab = squared_distances(a, b);

  double acc = 0.0;
  std::vector<double> buf;
  for (Eigen::Index i = 0; i < ma; ++i) {
    buf.clear();
    for (Eigen::Index j = 0; j < ma; ++j)
      if (j != i) buf.push_back(daa(i, j));
    std::nth_element(buf.begin(), buf.begin() + (k - 1), buf.end());
    const double rho = std::max(std::sqrt(buf[static_cast<std::size_t>(k - 1)]), 1e-12);

    buf.assign(dab.row(i).begin(), dab.row(i).end());
    std::nth_element(buf.begin(), buf.begin() + (k - 1), buf.end());
    const double nu = std::max(std::sqrt(buf[static_cast<std::size_t>(k - 1)]), 1e-12);

    acc += std::log(nu / rho);
  }
  return T / static_cast<double>(ma) * acc +
         std::log(static_cast<double>(mb) / static_cast<double>(ma - 1));
}

double ks_marginal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw UsageError("ks_marginal: empty set");
  if (a.cols() != b.cols()) throw UsageError("ks_marginal: dimension mismatch");
  double sum = 0.0;
  for (Eigen::Index t = 0; t < a.cols(); ++t)
    sum += ks_1d(column_sorted(a, t), column_sorted(b, t));
  return sum / static_cast<double>(a.cols());
}

double wd_marginal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw UsageError("wd_marginal: empty set");
  if (a.cols() != b.cols()) throw UsageError("wd_marginal: dimension mismatch");
  double sum = 0.0;
  for (Eigen::Index t = 0; t < a.cols(); ++t)
    sum += wd_1d(column_sorted(a, t), column_sorted(b, t));
  return sum / static_cast<double>(a.cols());
}

double mse_mean(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw UsageError("mse_mean: empty set");
  if (a.cols() != b.cols()) throw UsageError("mse_mean: dimension mismatch");
  const Eigen::RowVectorXd gap = a.colwise().mean() - b.colwise().mean();
  return gap.array().square().mean();
}

MetricReport evaluate_domain(const SphericalGmm& gmm, Space gmm_space,
                             const Domain& domain, Space domain_space,
                             const Eigen::MatrixXd& domain_data, int m,
                             std::uint64_t seed) {
  if (gmm_space != domain_space)
    throw UsageError("evaluate_domain: scaled/physical space mismatch");
  (void)domain;
  const Eigen::MatrixXd generated = sample_gmm(gmm, m, seed);
  MetricReport r;
  r.mmd = mmd(generated, domain_data);
  r.kl = kl_knn(generated, domain_data);
  r.ks = ks_marginal(generated, domain_data);
  r.wd = wd_marginal(generated, domain_data);
  r.mse_mean = mse_mean(generated, domain_data);
  r.m_generated = m;
  r.m_reference = static_cast<int>(domain_data.rows());
  r.seed = seed;
  return r;
}

}  // namespace fewshot
