#pragma once

#include <Eigen/Dense>

#include <cstdint>

#include "fewshot/common.hpp"

namespace fewshot {

inline constexpr double kSigmaFloor = 1e-3;  // scaled units

// Spherical mixture over R^T: fixed weights, per-component mean and
// per-dimension standard deviation, both stored as J x T matrices.
struct SphericalGmm {
  int J = 0;
  int T = 0;
  Eigen::VectorXd weights;  // length J, always fixed_weights(J)
  Eigen::MatrixXd means;    // J x T
  Eigen::MatrixXd sigmas;   // J x T, standard deviations
};

// w_j = j / sum(1..J), ascending.
Eigen::VectorXd fixed_weights(int J);

// N x J matrix of log(w_j) + log N(x_i | mu_j, diag(sigma_j^2)).
Eigen::MatrixXd weighted_component_log_densities(const SphericalGmm& gmm,
                                                 const Eigen::MatrixXd& samples);

// log sum_j w_j N(x | mu_j, diag(sigma_j^2)), log-sum-exp stabilized.
double log_density(const SphericalGmm& gmm, const Eigen::VectorXd& x);

// Negative log-likelihood of a sample matrix (rows are samples).
double nll(const SphericalGmm& gmm, const Eigen::MatrixXd& samples);

// Row-normalized responsibilities, N x J.
Eigen::MatrixXd e_step(const SphericalGmm& gmm, const Eigen::MatrixXd& samples);

// In-place update of means/sigmas. Components with responsibility mass
// below 1e-12 keep their previous parameters; sigmas are floored.
void m_step(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& gamma,
            double sigma_floor, Eigen::MatrixXd& means, Eigen::MatrixXd& sigmas);

// z = int(e^{beta n}), at least 1.
int z_schedule(int n, double beta = 0.015);

// Exactly z E/M alternations on the shots; weights stay fixed.
SphericalGmm within_domain_tuning(const SphericalGmm& theta_o,
                                  const Eigen::MatrixXd& shots, int z,
                                  double sigma_floor = kSigmaFloor);

// EM until the relative nll improvement drops below tol or max_iter.
SphericalGmm run_to_convergence(const SphericalGmm& theta, const Eigen::MatrixXd& samples,
                                double tol = 1e-6, int max_iter = 500,
                                double sigma_floor = kSigmaFloor);

// Quantile-spread start followed by pooled EM; deterministic under seed.
SphericalGmm init_theta_o(const Eigen::MatrixXd& pooled_samples, int J, std::uint64_t seed,
                          int max_subsample = 50000);

Eigen::MatrixXd sample_gmm(const SphericalGmm& gmm, int m, std::uint64_t seed,
                           bool clip_nonneg = false);

}  // namespace fewshot
