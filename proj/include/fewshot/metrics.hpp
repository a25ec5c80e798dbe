#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "fewshot/common.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/gmm.hpp"

namespace fewshot {

struct MetricReport {
  double mmd = 0.0;
  double kl = 0.0;
  double ks = 0.0;
  double wd = 0.0;
  double mse_mean = 0.0;
  int m_generated = 0;
  int m_reference = 0;
  std::uint64_t seed = 0;
};

// Squared-MMD V-statistic with an RBF kernel (median-heuristic bandwidth),
// square-rooted and floored at zero. Identical sets give exactly zero.
double mmd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// k-NN estimate of KL(P_A || P_B); may be slightly negative, reported raw.
double kl_knn(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int k = 5);

// Two-sample KS statistic per dimension, averaged over dimensions.
double ks_marginal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// 1D 1-Wasserstein per dimension via empirical quantile functions, averaged.
double wd_marginal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

double mse_mean(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

MetricReport evaluate_domain(const SphericalGmm& gmm, Space gmm_space,
                             const Domain& domain, Space domain_space,
                             const Eigen::MatrixXd& domain_data, int m,
                             std::uint64_t seed);

}  // namespace fewshot
