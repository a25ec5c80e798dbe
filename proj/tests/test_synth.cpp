#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "fewshot/synth.hpp"
#include "fewshot/trainer.hpp"

using namespace fewshot;

TEST_CASE("gen_collection: counts, determinism, empty config") {
  SynthConfig cfg;
  cfg.n_domains = 5;
  cfg.T = 8;
  cfg.samples_per_domain = 30;
  cfg.master_seed = 11;

  const SynthResult a = gen_collection(cfg);
  REQUIRE(a.collection.domains.size() == 5);
  REQUIRE(a.truths.size() == 5);
  for (const auto& d : a.collection.domains) {
    CHECK(d.samples.size() == 30);
    for (const auto& s : d.samples) {
      CHECK(s.values.size() == 8);
      CHECK(s.day_of_year >= 1);
      CHECK(s.day_of_year <= 365);
      for (double v : s.values) CHECK(v >= 0.0);
    }
  }

  const SynthResult b = gen_collection(cfg);
  for (std::size_t i = 0; i < a.collection.domains.size(); ++i) {
    CHECK(a.collection.domains[i].domain_id == b.collection.domains[i].domain_id);
    for (std::size_t k = 0; k < a.collection.domains[i].samples.size(); ++k)
      CHECK(a.collection.domains[i].samples[k].values ==
            b.collection.domains[i].samples[k].values);
    CHECK((a.truths[i].means.array() == b.truths[i].means.array()).all());
  }

  cfg.n_domains = 0;
  CHECK(gen_collection(cfg).collection.domains.empty());
}

TEST_CASE("gen_collection: truths actually generate the data distribution") {
  SynthConfig cfg;
  cfg.n_domains = 3;
  cfg.T = 6;
  cfg.samples_per_domain = 200;
  cfg.master_seed = 13;
  const SynthResult r = gen_collection(cfg);
  for (std::size_t i = 0; i < r.truths.size(); ++i) {
    const Eigen::MatrixXd data = domain_matrix(r.collection.domains[i]);
    const Eigen::MatrixXd draws = sample_gmm(r.truths[i], 200, 7, true);
    // both sampled from the same mixture: small discrepancy
    CHECK(mmd(data, draws) < 0.25);
  }
}

TEST_CASE("oracle_param_error") {
  SynthConfig cfg;
  cfg.n_domains = 1;
  cfg.T = 6;
  cfg.master_seed = 17;
  const SphericalGmm truth = gen_collection(cfg).truths[0];

  SUBCASE("estimated == truth: near zero") {
    CHECK(oracle_param_error(truth, truth, 2000, 5) < 0.05);
  }
  SUBCASE("means + 1 exceeds the self-distance null") {
    const double self_null = oracle_param_error(truth, truth, 2000, 5);
    SphericalGmm shifted = truth;
    shifted.means.array() += 1.0;
    const double err = oracle_param_error(shifted, truth, 2000, 5);
    CHECK(err > 5.0 * self_null);
    CHECK(err > 0.0);
  }
}

TEST_CASE("run_benchmark: full-data baseline sits at the self-distance floor") {
  SynthConfig cfg;
  cfg.n_domains = 2;
  cfg.T = 6;
  cfg.J_true = 2;
  cfg.samples_per_domain = 60;
  cfg.master_seed = 23;
  const SynthResult targets = gen_collection(cfg, RoleTag::target);

  Checkpoint ckpt;
  ckpt.model.config.T = cfg.T;
  ckpt.model.config.J = 3;
  ckpt.model.config.n_max = 60;
  ckpt.model = init_model(ckpt.model.config, 3);
  ckpt.scaler = fit_scaler(targets.collection);
  Eigen::MatrixXd pooled(0, cfg.T);
  for (const auto& d : targets.collection.domains) {
    const Eigen::MatrixXd m = ckpt.scaler.apply(domain_matrix(d));
    pooled.conservativeResize(pooled.rows() + m.rows(), cfg.T);
    pooled.bottomRows(m.rows()) = m;
  }
  ckpt.theta_o = init_theta_o(pooled, 3, 3);

  const BenchResult r =
      run_benchmark(ckpt, targets.collection, {60}, 31, 60, 1);
  for (const auto& row : r.rows)
    if (row.method == "sampled_ecp") {
      CHECK(row.n_shots == 60);
      // n = all data: the shot set is a permutation of the full set, so the
      // discrepancy is pure floating-point noise.
      CHECK(row.report.mmd < 1e-6);
    }
  // aggregates cover every method at n=60
  int methods_seen = 0;
  for (const auto& agg : r.aggregates)
    if (agg.n_shots == 60) ++methods_seen;
  CHECK(methods_seen == 3);
}

TEST_CASE("run_benchmark: workers do not change the result") {
  SynthConfig cfg;
  cfg.n_domains = 4;
  cfg.T = 6;
  cfg.J_true = 2;
  cfg.samples_per_domain = 40;
  cfg.master_seed = 29;
  const SynthResult targets = gen_collection(cfg, RoleTag::target);

  Checkpoint ckpt;
  ckpt.model.config.T = cfg.T;
  ckpt.model.config.J = 2;
  ckpt.model = init_model(ckpt.model.config, 5);
  ckpt.scaler = fit_scaler(targets.collection);
  Eigen::MatrixXd pooled(0, cfg.T);
  for (const auto& d : targets.collection.domains) {
    const Eigen::MatrixXd m = ckpt.scaler.apply(domain_matrix(d));
    pooled.conservativeResize(pooled.rows() + m.rows(), cfg.T);
    pooled.bottomRows(m.rows()) = m;
  }
  ckpt.theta_o = init_theta_o(pooled, 2, 5);

  const BenchResult r1 = run_benchmark(ckpt, targets.collection, {4, 8}, 37, 50, 1);
  const BenchResult r2 = run_benchmark(ckpt, targets.collection, {4, 8}, 37, 50, 3);
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].domain_id == r2.rows[i].domain_id);
    CHECK(r1.rows[i].method == r2.rows[i].method);
    CHECK(r1.rows[i].report.mmd == r2.rows[i].report.mmd);
  }
  for (std::size_t i = 0; i < r1.aggregates.size(); ++i) {
    CHECK(r1.aggregates[i].mean_mmd == r2.aggregates[i].mean_mmd);
    CHECK(r1.aggregates[i].std_mmd == r2.aggregates[i].std_mmd);
  }
}

TEST_CASE("bench CSV writers emit the documented schemas") {
  BenchResult r;
  MetricReport rep;
  rep.mmd = 0.5;
  rep.kl = 0.1;
  rep.ks = 0.2;
  rep.wd = 0.3;
  rep.mse_mean = 0.4;
  rep.seed = 9;
  r.rows.push_back({"dom", 4, "ours", rep});
  r.aggregates.push_back({4, "ours", 0.5, 0.0, 1});

  const auto dir = std::filesystem::temp_directory_path() / "bench_csv_test";
  std::filesystem::create_directories(dir);
  write_bench_csv((dir / "b.csv").string(), r);
  write_bench_aggregate_csv((dir / "a.csv").string(), r);

  std::ifstream b(dir / "b.csv");
  std::string line;
  std::getline(b, line);
  CHECK(line == "domain_id,n_shots,method,metric,value,seed");
  std::getline(b, line);
  CHECK(line == "dom,4,ours,mmd,0.5,9");

  std::ifstream a(dir / "a.csv");
  std::getline(a, line);
  CHECK(line == "n_shots,method,mean_mmd,std_mmd");
  std::getline(a, line);
  CHECK(line == "4,ours,0.5,0");
  std::filesystem::remove_all(dir);
}
