#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/artifact.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/gmm.hpp"
#include "fewshot/metrics.hpp"

namespace fewshot {

// Ranges for the synthetic daily-profile family: a base load plus morning
// and evening peaks with per-component and per-domain variation.
struct SynthRanges {
  double base_lo = 0.05, base_hi = 0.35;
  double morning_amp_lo = 0.2, morning_amp_hi = 1.2;
  double morning_center_lo = 6.0, morning_center_hi = 9.5;
  double evening_amp_lo = 0.4, evening_amp_hi = 2.2;
  double evening_center_lo = 17.0, evening_center_hi = 21.0;
  double peak_width_lo = 1.0, peak_width_hi = 3.0;
  double harmonic_amp_hi = 0.15;
  double comp_scale_lo = 0.5, comp_scale_hi = 1.8;
  double domain_scale_lo = 0.5, domain_scale_hi = 2.0;
  double sigma_frac_lo = 0.12, sigma_frac_hi = 0.45;
};

struct SynthConfig {
  int n_domains = 100;
  int T = 24;
  int J_true = 4;
  int samples_per_domain = 250;
  SynthRanges ranges;
  std::uint64_t master_seed = 0;
  std::string id_prefix = "synth";
};

struct SynthResult {
  DomainCollection collection;
  std::vector<SphericalGmm> truths;  // aligned with collection.domains
};

SynthResult gen_collection(const SynthConfig& config, RoleTag tag = RoleTag::source);

// Symmetrized sampled-distribution discrepancy between two mixtures.
double oracle_param_error(const SphericalGmm& estimated, const SphericalGmm& truth,
                          int m = 2000, std::uint64_t seed = 1);

struct BenchRow {
  std::string domain_id;
  int n_shots = 0;
  std::string method;  // sampled_ecp | theta_p | ours
  MetricReport report;
};

struct BenchAggregate {
  int n_shots = 0;
  std::string method;
  double mean_mmd = 0.0;
  double std_mmd = 0.0;
  int count = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<BenchAggregate> aggregates;
};

// Compares raw shots, shots-converged EM, and the encoder prediction
// against each target domain's complete (scaled) data.
BenchResult run_benchmark(const Checkpoint& ckpt, const DomainCollection& targets,
                          const std::vector<int>& shot_counts, std::uint64_t seed,
                          int m_generated = 250, int workers = 1);

void write_bench_csv(const std::string& path, const BenchResult& result);
void write_bench_aggregate_csv(const std::string& path, const BenchResult& result);

}  // namespace fewshot
