#include "fewshot/synth.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <thread>

#include "fewshot/rng.hpp"
#include "fewshot/trainer.hpp"

namespace fewshot {

namespace {

// Smooth positive daily curve: base load, morning and evening peaks, a
// low-order harmonic, all scaled per component and per domain.
Eigen::RowVectorXd daily_curve(Rng& rng, const SynthRanges& r, int T,
                               double domain_scale, double comp_scale,
                               double morning_center, double evening_center) {
  const double base = rng.uniform(r.base_lo, r.base_hi);
  const double ma = rng.uniform(r.morning_amp_lo, r.morning_amp_hi);
  const double mw = rng.uniform(r.peak_width_lo, r.peak_width_hi);
  const double ea = rng.uniform(r.evening_amp_lo, r.evening_amp_hi);
  const double ew = rng.uniform(r.peak_width_lo, r.peak_width_hi);
  const double ha = rng.uniform(0.0, r.harmonic_amp_hi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  Eigen::RowVectorXd curve(T);
  for (int t = 0; t < T; ++t) {
    const double x = static_cast<double>(t);
    double v = base;
    v += ma * std::exp(-0.5 * std::pow((x - morning_center) / mw, 2.0));
    v += ea * std::exp(-0.5 * std::pow((x - evening_center) / ew, 2.0));
    v += ha * std::sin(2.0 * std::numbers::pi * x / static_cast<double>(T) + phase);
    curve(t) = std::max(v, 0.02) * domain_scale * comp_scale;
  }
  return curve;
}

// FNV-1a over the id string; std::hash is implementation-defined and would
// make shot draws differ across standard libraries.
std::uint64_t id_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

double sample_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (double x : v) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

SynthResult gen_collection(const SynthConfig& config, RoleTag tag) {
  SynthResult out;
  out.collection.role_tag = tag;
  const SynthRanges& r = config.ranges;

  for (int d = 0; d < config.n_domains; ++d) {
    Rng rng(mix_seed(config.master_seed, 0xd0a, static_cast<std::uint64_t>(d)));
    const double domain_scale = rng.uniform(r.domain_scale_lo, r.domain_scale_hi);
    const double morning_center = rng.uniform(r.morning_center_lo, r.morning_center_hi);
    const double evening_center = rng.uniform(r.evening_center_lo, r.evening_center_hi);

    SphericalGmm truth;
    truth.J = config.J_true;
    truth.T = config.T;
    truth.weights = fixed_weights(config.J_true);
    truth.means.resize(config.J_true, config.T);
    truth.sigmas.resize(config.J_true, config.T);
    for (int j = 0; j < config.J_true; ++j) {
      const double comp_scale = rng.uniform(r.comp_scale_lo, r.comp_scale_hi);
      truth.means.row(j) =
          daily_curve(rng, r, config.T, domain_scale, comp_scale, morning_center,
                      evening_center);
      const double frac = rng.uniform(r.sigma_frac_lo, r.sigma_frac_hi);
      truth.sigmas.row(j) = (truth.means.row(j).array() * frac + 0.02).matrix();
    }

    Domain dom;
    dom.domain_id = config.id_prefix + "_" + std::to_string(d);
    dom.source_household_id = dom.domain_id;
    dom.samples.reserve(static_cast<std::size_t>(config.samples_per_domain));
    const Eigen::MatrixXd draws =
        sample_gmm(truth, config.samples_per_domain,
                   mix_seed(config.master_seed, 0x5ab, static_cast<std::uint64_t>(d)),
                   /*clip_nonneg=*/true);
    Rng day_rng(mix_seed(config.master_seed, 0xdd, static_cast<std::uint64_t>(d)));
    for (int i = 0; i < config.samples_per_domain; ++i) {
      EcpSample s;
      s.day_of_year = day_rng.uniform_int(1, 365);
      s.values.assign(draws.row(i).begin(), draws.row(i).end());
      dom.samples.push_back(std::move(s));
    }
    out.collection.domains.push_back(std::move(dom));
    out.truths.push_back(std::move(truth));
  }
  return out;
}

double oracle_param_error(const SphericalGmm& estimated, const SphericalGmm& truth,
                          int m, std::uint64_t seed) {
  if (estimated.T != truth.T) throw UsageError("oracle_param_error: T mismatch");
  const Eigen::MatrixXd a = sample_gmm(estimated, m, mix_seed(seed, 0xa));
  const Eigen::MatrixXd b = sample_gmm(truth, m, mix_seed(seed, 0xb));
  return mmd(a, b);
}

BenchResult run_benchmark(const Checkpoint& ckpt, const DomainCollection& targets,
                          const std::vector<int>& shot_counts, std::uint64_t seed,
                          int m_generated, int workers) {
  BenchResult result;
  const TrainingSet set = make_training_set(targets, ckpt.scaler);
  std::vector<std::vector<BenchRow>> per_domain(set.data.size());

  auto process_domain = [&](std::size_t d) {
    const Eigen::MatrixXd& full = set.data[d];
    for (int n : shot_counts) {
      if (n < 1 || n > static_cast<int>(full.rows())) continue;
      const std::uint64_t shot_seed =
          mix_seed(seed, id_hash(set.domain_ids[d]), static_cast<std::uint64_t>(n));
      Rng rng(shot_seed);
      const auto idx = rng.sample_without_replacement(static_cast<std::size_t>(full.rows()),
                                                      static_cast<std::size_t>(n));
      Eigen::MatrixXd shots(n, full.cols());
      std::vector<int> dates(static_cast<std::size_t>(n));
      for (int s = 0; s < n; ++s) {
        shots.row(s) = full.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(s)]));
        dates[static_cast<std::size_t>(s)] = set.date_ids[d][idx[static_cast<std::size_t>(s)]];
      }

      auto push = [&](const std::string& method, const Eigen::MatrixXd& gen,
                      std::uint64_t row_seed) {
        MetricReport rep;
        rep.mmd = mmd(gen, full);
        // k-NN KL needs more than k points per set; skip it for tiny sets.
        rep.kl = (gen.rows() > 5 && full.rows() > 5)
                     ? kl_knn(gen, full)
                     : std::numeric_limits<double>::quiet_NaN();
        rep.ks = ks_marginal(gen, full);
        rep.wd = wd_marginal(gen, full);
        rep.mse_mean = mse_mean(gen, full);
        rep.m_generated = static_cast<int>(gen.rows());
        rep.m_reference = static_cast<int>(full.rows());
        rep.seed = row_seed;
        per_domain[d].push_back({set.domain_ids[d], n, method, rep});
      };

      // (a) the raw shots as a sample set
      if (n >= 2) push("sampled_ecp", shots, shot_seed);

      // (b) EM converged on the shots
      const SphericalGmm theta_p = run_to_convergence(ckpt.theta_o, shots);
      push("theta_p", sample_gmm(theta_p, m_generated, mix_seed(shot_seed, 0x9)), shot_seed);

      // (c) the encoder prediction
      const SphericalGmm theta_hat = predict_theta_r(ckpt, shots, dates);
      push("ours", sample_gmm(theta_hat, m_generated, mix_seed(shot_seed, 0x9)), shot_seed);
    }
  };

  // Domains are independent; aggregation below is order-fixed either way.
  if (workers > 1 && set.data.size() > 1) {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t d = next.fetch_add(1); d < set.data.size();
               d = next.fetch_add(1))
            process_domain(d);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  } else {
    for (std::size_t d = 0; d < set.data.size(); ++d) process_domain(d);
  }
  for (auto& rows : per_domain)
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());

  // Aggregate mean/std of MMD per (n, method).
  for (int n : shot_counts) {
    for (const std::string method : {"sampled_ecp", "theta_p", "ours"}) {
      std::vector<double> vals;
      for (const auto& row : result.rows)
        if (row.n_shots == n && row.method == method) vals.push_back(row.report.mmd);
      if (vals.empty()) continue;
      BenchAggregate agg;
      agg.n_shots = n;
      agg.method = method;
      agg.count = static_cast<int>(vals.size());
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      agg.mean_mmd = mean;
      agg.std_mmd = vals.size() > 1 ? sample_std(vals) : 0.0;
      result.aggregates.push_back(agg);
    }
  }
  return result;
}

void write_bench_csv(const std::string& path, const BenchResult& result) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write benchmark csv: " + path);
  out << "domain_id,n_shots,method,metric,value,seed\n";
  for (const auto& row : result.rows) {
    auto line = [&](const char* metric, double value) {
      out << row.domain_id << "," << row.n_shots << "," << row.method << "," << metric
          << "," << value << "," << row.report.seed << "\n";
    };
    line("mmd", row.report.mmd);
    line("kl", row.report.kl);
    line("ks", row.report.ks);
    line("wd", row.report.wd);
    line("mse_mean", row.report.mse_mean);
  }
}

void write_bench_aggregate_csv(const std::string& path, const BenchResult& result) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write aggregate csv: " + path);
  out << "n_shots,method,mean_mmd,std_mmd\n";
  for (const auto& agg : result.aggregates)
    out << agg.n_shots << "," << agg.method << "," << agg.mean_mmd << ","
        << agg.std_mmd << "\n";
}

}  // namespace fewshot
