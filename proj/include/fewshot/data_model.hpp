#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fewshot/common.hpp"

namespace fewshot {

// One day of consumption: T readings plus the day of the year (1..366).
struct EcpSample {
  std::vector<double> values;
  int day_of_year = 1;
};

struct Domain {
  std::string domain_id;
  std::string source_household_id;
  std::vector<EcpSample> samples;
};

enum class RoleTag { source, target, validation };

struct DomainCollection {
  std::vector<Domain> domains;
  RoleTag role_tag = RoleTag::source;
};

struct ShotSet {
  std::string domain_id;
  std::vector<EcpSample> shots;
  std::uint64_t seed = 0;
};

// Global robust divisor shared by every domain; apply() also clips.
struct Scaler {
  double scale = 1.0;
  double clip_hi = 3.0;

  double apply(double x) const {
    double v = x / scale;
    if (v < 0.0) v = 0.0;
    if (v > clip_hi) v = clip_hi;
    return v;
  }
  double invert(double x) const { return x * scale; }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const {
    return m.array().max(0.0).min(clip_hi * scale).matrix() / scale;
  }
  Eigen::MatrixXd invert(const Eigen::MatrixXd& m) const { return m * scale; }
};

struct DatedSample {
  EcpSample sample;
  long epoch_day = 0;  // days since 1970-01-01, for chronological order
};

struct HouseholdSeries {
  std::string household_id;
  std::vector<DatedSample> days;
};

struct ParseResult {
  std::vector<HouseholdSeries> series;
  std::size_t dropped_rows = 0;
};

struct BuildResult {
  DomainCollection collection;
  std::size_t excluded_households = 0;
};

struct SplitResult {
  DomainCollection source;
  DomainCollection test;
  DomainCollection validation;
};

// 1..366, leap aware. Throws FormatError on an invalid date.
int day_of_year(int year, int month, int day);

// CSV schema: id,date,h00,...,h{T-1}. Rows with missing, negative or
// non-finite readings are dropped and counted.
ParseResult parse_dataset(const std::string& path, int T);

BuildResult build_domains(const std::vector<HouseholdSeries>& series, int window,
                          std::uint64_t seed);

// Household-level split; all replica domains of one household land together.
SplitResult split_collection(const DomainCollection& collection,
                             std::array<double, 3> ratios, std::uint64_t seed);

ShotSet sample_shots(const Domain& domain, int n, std::uint64_t seed);

Scaler fit_scaler(const DomainCollection& source, double percentile = 99.0,
                  double clip_hi = 3.0);

// Linear-interpolation percentile of a value pool (p in [0, 100]).
double percentile_of(std::vector<double> pool, double p);

// Rows are samples, columns are time steps.
Eigen::MatrixXd samples_matrix(const std::vector<EcpSample>& samples);
Eigen::MatrixXd domain_matrix(const Domain& domain);

}  // namespace fewshot
