#include "fewshot/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "fewshot/rng.hpp"

namespace fewshot {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kStarvationMass = 1e-12;
}  // namespace

Eigen::VectorXd fixed_weights(int J) {
  if (J < 1) throw UsageError("fixed_weights: J must be >= 1");
  Eigen::VectorXd w(J);
  const double denom = static_cast<double>(J) * (J + 1) / 2.0;
  for (int j = 0; j < J; ++j) w(j) = static_cast<double>(j + 1) / denom;
  return w;
}

Eigen::MatrixXd weighted_component_log_densities(const SphericalGmm& gmm,
                                                 const Eigen::MatrixXd& samples) {
  if (samples.cols() != gmm.T) throw UsageError("dimension mismatch: samples vs gmm T");
  const Eigen::Index n = samples.rows();
  Eigen::MatrixXd lw(n, gmm.J);
  for (int j = 0; j < gmm.J; ++j) {
    const auto sigma = gmm.sigmas.row(j).array();
    const double log_det = sigma.log().sum();
    const double offset =
        std::log(gmm.weights(j)) - log_det - 0.5 * gmm.T * kLog2Pi;
    auto z = (samples.rowwise() - gmm.means.row(j)).array().rowwise() / sigma;
    lw.col(j) = (-0.5 * z.square().rowwise().sum() + offset).matrix();
  }
  return lw;
}

double log_density(const SphericalGmm& gmm, const Eigen::VectorXd& x) {
  if (x.size() != gmm.T) throw UsageError("dimension mismatch: x vs gmm T");
  const Eigen::MatrixXd lw = weighted_component_log_densities(gmm, x.transpose());
  const double m = lw.maxCoeff();
  return m + std::log((lw.array() - m).exp().sum());
}

double nll(const SphericalGmm& gmm, const Eigen::MatrixXd& samples) {
  if (samples.rows() == 0) throw UsageError("nll: empty sample list");
  const Eigen::MatrixXd lw = weighted_component_log_densities(gmm, samples);
  const Eigen::VectorXd m = lw.rowwise().maxCoeff();
  const Eigen::ArrayXd ll =
      m.array() + (lw.colwise() - m).array().exp().rowwise().sum().log();
  return -ll.sum();
}

Eigen::MatrixXd e_step(const SphericalGmm& gmm, const Eigen::MatrixXd& samples) {
  if (samples.rows() < 1) throw UsageError("e_step: need at least one sample");
  const Eigen::MatrixXd lw = weighted_component_log_densities(gmm, samples);
  const Eigen::VectorXd m = lw.rowwise().maxCoeff();
  Eigen::MatrixXd gamma = (lw.colwise() - m).array().exp();
  const Eigen::VectorXd row_sum = gamma.rowwise().sum();
  gamma.array().colwise() /= row_sum.array();
  return gamma;
}

void m_step(const Eigen::MatrixXd& samples, const Eigen::MatrixXd& gamma,
            double sigma_floor, Eigen::MatrixXd& means, Eigen::MatrixXd& sigmas) {
  const int J = static_cast<int>(gamma.cols());
  for (int j = 0; j < J; ++j) {
    const double mass = gamma.col(j).sum();
    if (mass < kStarvationMass) continue;  // starved component keeps its parameters
    const Eigen::RowVectorXd mu = (gamma.col(j).transpose() * samples) / mass;
    const auto centered = (samples.rowwise() - mu).array();
    const Eigen::RowVectorXd var =
        (centered.square().colwise() * gamma.col(j).array()).colwise().sum() / mass;
    means.row(j) = mu;
    sigmas.row(j) = var.array().sqrt().max(sigma_floor);
  }
}

int z_schedule(int n, double beta) {
  if (n < 1) throw UsageError("z_schedule: n must be >= 1");
  const int z = static_cast<int>(std::exp(beta * static_cast<double>(n)));
  return std::max(z, 1);
}

SphericalGmm within_domain_tuning(const SphericalGmm& theta_o,
                                  const Eigen::MatrixXd& shots, int z,
                                  double sigma_floor) {
  if (z < 1) throw UsageError("within_domain_tuning: z must be >= 1");
  if (shots.rows() == 0) throw UsageError("within_domain_tuning: empty shot set");
  SphericalGmm theta = theta_o;
  for (int s = 0; s < z; ++s) {
    const Eigen::MatrixXd gamma = e_step(theta, shots);
    m_step(shots, gamma, sigma_floor, theta.means, theta.sigmas);
  }
  return theta;
}

SphericalGmm run_to_convergence(const SphericalGmm& theta_in, const Eigen::MatrixXd& samples,
                                double tol, int max_iter, double sigma_floor) {
  if (samples.rows() == 0) throw UsageError("run_to_convergence: empty sample list");
  SphericalGmm theta = theta_in;
  double prev = nll(theta, samples);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd gamma = e_step(theta, samples);
    m_step(samples, gamma, sigma_floor, theta.means, theta.sigmas);
    const double cur = nll(theta, samples);
    const double denom = std::max(std::abs(prev), 1e-300);
    if (!(prev - cur > tol * denom)) break;
    prev = cur;
  }
  return theta;
}

SphericalGmm init_theta_o(const Eigen::MatrixXd& pooled_samples, int J, std::uint64_t seed,
                          int max_subsample) {
  const Eigen::Index n = pooled_samples.rows();
  const int T = static_cast<int>(pooled_samples.cols());
  if (n < 10 * static_cast<Eigen::Index>(J))
    throw UsageError("init_theta_o: need at least 10*J pooled samples");

  Eigen::MatrixXd pool;
  if (n > max_subsample) {
    Rng rng(mix_seed(seed, 0x7a0));
    const auto idx = rng.sample_without_replacement(static_cast<std::size_t>(n),
                                                    static_cast<std::size_t>(max_subsample));
    pool.resize(max_subsample, T);
    for (int i = 0; i < max_subsample; ++i)
      pool.row(i) = pooled_samples.row(static_cast<Eigen::Index>(idx[i]));
  } else {
    pool = pooled_samples;
  }

  const Eigen::RowVectorXd mean = pool.colwise().mean();
  const Eigen::RowVectorXd std_dev =
      ((pool.rowwise() - mean).array().square().colwise().sum() /
       static_cast<double>(pool.rows()))
          .sqrt();
  if (std_dev.maxCoeff() < 1e-12)
    throw NumericError("init_theta_o: degenerate pooled variance");

  SphericalGmm theta;
  theta.J = J;
  theta.T = T;
  theta.weights = fixed_weights(J);
  theta.means.resize(J, T);
  theta.sigmas.resize(J, T);
  for (int t = 0; t < T; ++t) {
    std::vector<double> col(pool.rows());
    for (Eigen::Index i = 0; i < pool.rows(); ++i) col[static_cast<std::size_t>(i)] = pool(i, t);
    std::sort(col.begin(), col.end());
    for (int j = 0; j < J; ++j) {
      const double q = static_cast<double>(j + 1) / static_cast<double>(J + 1);
      const double pos = q * static_cast<double>(col.size() - 1);
      const std::size_t lo = static_cast<std::size_t>(pos);
      const std::size_t hi = std::min(lo + 1, col.size() - 1);
      theta.means(j, t) = col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
    }
  }
  for (int j = 0; j < J; ++j)
    theta.sigmas.row(j) = std_dev.array().max(kSigmaFloor).matrix();

  return run_to_convergence(theta, pool);
}

Eigen::MatrixXd sample_gmm(const SphericalGmm& gmm, int m, std::uint64_t seed,
                           bool clip_nonneg) {
  if (m < 1) throw UsageError("sample_gmm: m must be >= 1");
  Rng rng(mix_seed(seed, 0x9c2));
  Eigen::VectorXd cum(gmm.J);
  double acc = 0.0;
  for (int j = 0; j < gmm.J; ++j) {
    acc += gmm.weights(j);
    cum(j) = acc;
  }
  Eigen::MatrixXd out(m, gmm.T);
  for (int i = 0; i < m; ++i) {
    const double u = rng.uniform();
    int comp = gmm.J - 1;
    for (int j = 0; j < gmm.J; ++j)
      if (u < cum(j)) {
        comp = j;
        break;
      }
    for (int t = 0; t < gmm.T; ++t) {
      double v = gmm.means(comp, t) + gmm.sigmas(comp, t) * rng.normal();
      if (clip_nonneg && v < 0.0) v = 0.0;
      out(i, t) = v;
    }
  }
  return out;
}

}  // namespace fewshot
