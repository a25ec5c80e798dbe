#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fewshot/data_model.hpp"

using namespace fewshot;

namespace {

std::string write_temp_csv(const std::string& name, const std::string& body) {
  const std::string path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << body;
  return path;
}

std::string csv_header(int T) {
  std::string h = "id,date";
  for (int t = 0; t < T; ++t) h += ",h" + std::to_string(t);
  return h + "\n";
}

std::string row(const std::string& id, const std::string& date, int T, double v) {
  std::string r = id + "," + date;
  for (int t = 0; t < T; ++t) r += "," + std::to_string(v + 0.001 * t);
  return r + "\n";
}

DomainCollection synthetic_households(int H, int samples_each) {
  DomainCollection c;
  for (int h = 0; h < H; ++h) {
    Domain d;
    d.domain_id = "hh" + std::to_string(h) + "#0";
    d.source_household_id = "hh" + std::to_string(h);
    for (int i = 0; i < samples_each; ++i) {
      EcpSample s;
      s.day_of_year = 1 + (i % 365);
      s.values = {0.1 * h + 0.01 * i, 0.2};
      d.samples.push_back(s);
    }
    c.domains.push_back(d);
  }
  return c;
}

}  // namespace

TEST_CASE("day_of_year handles leap years") {
  CHECK(day_of_year(2021, 1, 1) == 1);
  CHECK(day_of_year(2021, 3, 2) == 61);   // non-leap year
  CHECK(day_of_year(2020, 3, 2) == 62);   // leap year
  CHECK(day_of_year(2020, 12, 31) == 366);
  CHECK(day_of_year(2021, 12, 31) == 365);
  CHECK_THROWS_AS(day_of_year(2021, 2, 29), FormatError);
  CHECK_THROWS_AS(day_of_year(2021, 13, 1), FormatError);
}

TEST_CASE("parse_dataset: one valid row") {
  const std::string path =
      write_temp_csv("dm_one_row.csv", csv_header(24) + row("h1", "2021-03-02", 24, 0.1));
  const ParseResult r = parse_dataset(path, 24);
  REQUIRE(r.series.size() == 1);
  CHECK(r.series[0].household_id == "h1");
  REQUIRE(r.series[0].days.size() == 1);
  CHECK(r.series[0].days[0].sample.day_of_year == 61);
  CHECK(r.series[0].days[0].sample.values.size() == 24);
  CHECK(r.dropped_rows == 0);
  std::remove(path.c_str());
}

TEST_CASE("parse_dataset: empty file with valid header") {
  const std::string path = write_temp_csv("dm_empty.csv", csv_header(24));
  const ParseResult r = parse_dataset(path, 24);
  CHECK(r.series.empty());
  CHECK(r.dropped_rows == 0);
  std::remove(path.c_str());
}

TEST_CASE("parse_dataset: short row is dropped and counted") {
  std::string body = csv_header(24) + row("h1", "2021-01-01", 24, 0.1);
  body += "h1,2021-01-02";  // 23 readings
  for (int t = 0; t < 23; ++t) body += ",0.1";
  body += "\n";
  const std::string path = write_temp_csv("dm_short_row.csv", body);
  const ParseResult r = parse_dataset(path, 24);
  REQUIRE(r.series.size() == 1);
  CHECK(r.series[0].days.size() == 1);
  CHECK(r.dropped_rows == 1);
  std::remove(path.c_str());
}

TEST_CASE("parse_dataset: negative and non-finite readings dropped") {
  std::string body = csv_header(2);
  body += "h1,2021-01-01,0.5,-0.1\n";
  body += "h1,2021-01-02,nan,0.1\n";
  body += "h1,2021-01-03,0.2,0.3\n";
  const std::string path = write_temp_csv("dm_bad_vals.csv", body);
  const ParseResult r = parse_dataset(path, 2);
  REQUIRE(r.series.size() == 1);
  CHECK(r.series[0].days.size() == 1);
  CHECK(r.dropped_rows == 2);
  std::remove(path.c_str());
}

TEST_CASE("parse_dataset: malformed header throws FormatError") {
  const std::string path = write_temp_csv("dm_bad_header.csv", "id,date,h0\n");
  CHECK_THROWS_AS(parse_dataset(path, 24), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("build_domains: window thresholds") {
  auto make_series = [](int days) {
    HouseholdSeries s;
    s.household_id = "h";
    for (int i = 0; i < days; ++i) {
      DatedSample d;
      d.sample.values = {0.1, 0.2};
      d.sample.day_of_year = 1 + (i % 365);
      d.epoch_day = i;
      s.days.push_back(d);
    }
    return s;
  };

  SUBCASE("249 days, window 250: zero domains") {
    const BuildResult r = build_domains({make_series(249)}, 250, 1);
    CHECK(r.collection.domains.empty());
    CHECK(r.excluded_households == 1);
  }
  SUBCASE("250 days: one domain of 250 samples") {
    const BuildResult r = build_domains({make_series(250)}, 250, 1);
    REQUIRE(r.collection.domains.size() == 1);
    CHECK(r.collection.domains[0].samples.size() == 250);
  }
  SUBCASE("510 days: two disjoint 250-sample domains") {
    HouseholdSeries s = make_series(510);
    // unique readings so disjointness is observable
    for (std::size_t i = 0; i < s.days.size(); ++i)
      s.days[i].sample.values[0] = static_cast<double>(i);
    const BuildResult r = build_domains({s}, 250, 1);
    REQUIRE(r.collection.domains.size() == 2);
    std::vector<double> seen;
    for (const auto& d : r.collection.domains) {
      CHECK(d.samples.size() == 250);
      for (const auto& smp : d.samples) seen.push_back(smp.values[0]);
    }
    std::sort(seen.begin(), seen.end());
    CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());  // disjoint
  }
}

TEST_CASE("split_collection: exact ratio arithmetic and error cases") {
  const DomainCollection c = synthetic_households(10, 3);
  const SplitResult s = split_collection(c, {0.8, 0.1, 0.1}, 11);
  CHECK(s.source.domains.size() == 8);
  CHECK(s.test.domains.size() == 1);
  CHECK(s.validation.domains.size() == 1);

  const SplitResult again = split_collection(c, {0.8, 0.1, 0.1}, 11);
  for (std::size_t i = 0; i < s.source.domains.size(); ++i)
    CHECK(s.source.domains[i].domain_id == again.source.domains[i].domain_id);

  CHECK_THROWS_AS(split_collection(synthetic_households(2, 1), {0.8, 0.1, 0.1}, 1),
                  FormatError);
}

TEST_CASE("split_collection keeps replica domains of one household together") {
  DomainCollection c = synthetic_households(5, 2);
  Domain replica = c.domains[0];
  replica.domain_id = c.domains[0].source_household_id + "#1";
  c.domains.push_back(replica);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SplitResult s = split_collection(c, {0.6, 0.2, 0.2}, seed);
    auto split_of = [&](const std::string& id) {
      for (const auto& d : s.source.domains)
        if (d.source_household_id == id) return 0;
      for (const auto& d : s.test.domains)
        if (d.source_household_id == id) return 1;
      return 2;
    };
    const int first = split_of(c.domains[0].source_household_id);
    int count = 0;
    auto tally = [&](const DomainCollection& col, int which) {
      for (const auto& d : col.domains)
        if (d.source_household_id == c.domains[0].source_household_id) {
          CHECK(which == first);
          ++count;
        }
    };
    tally(s.source, 0);
    tally(s.test, 1);
    tally(s.validation, 2);
    CHECK(count == 2);
  }
}

TEST_CASE("sample_shots: edge sizes and determinism") {
  DomainCollection c = synthetic_households(1, 20);
  const Domain& d = c.domains[0];

  SUBCASE("n equals domain size returns the whole domain as a set") {
    const ShotSet s = sample_shots(d, 20, 3);
    REQUIRE(s.shots.size() == 20);
    std::vector<double> got, want;
    for (const auto& x : s.shots) got.push_back(x.values[0]);
    for (const auto& x : d.samples) want.push_back(x.values[0]);
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    CHECK(got == want);
  }
  SUBCASE("n=1 returns a member of the domain") {
    const ShotSet s = sample_shots(d, 1, 3);
    REQUIRE(s.shots.size() == 1);
    bool found = false;
    for (const auto& x : d.samples)
      if (x.values == s.shots[0].values && x.day_of_year == s.shots[0].day_of_year)
        found = true;
    CHECK(found);
  }
  SUBCASE("same (domain, n, seed) twice gives identical shots") {
    const ShotSet a = sample_shots(d, 5, 42);
    const ShotSet b = sample_shots(d, 5, 42);
    REQUIRE(a.shots.size() == b.shots.size());
    for (std::size_t i = 0; i < a.shots.size(); ++i)
      CHECK(a.shots[i].values == b.shots[i].values);
  }
  SUBCASE("n greater than domain size throws") {
    CHECK_THROWS_AS(sample_shots(d, 21, 3), UsageError);
  }
}

TEST_CASE("fit_scaler: percentile divisor and clipping") {
  DomainCollection c;
  Domain d;
  d.domain_id = "a#0";
  d.source_household_id = "a";
  for (int i = 0; i <= 10; ++i) {
    EcpSample s;
    s.day_of_year = 1;
    s.values = {static_cast<double>(i)};
    d.samples.push_back(s);
  }
  c.domains.push_back(d);

  const Scaler sc = fit_scaler(c, 100.0, 3.0);
  CHECK(sc.scale == doctest::Approx(10.0));
  CHECK(sc.apply(5.0) == doctest::Approx(0.5));
  CHECK(sc.apply(0.0) == 0.0);
  CHECK(sc.invert(sc.apply(0.0)) == 0.0);
  CHECK(sc.apply(5.0 * sc.scale) == doctest::Approx(3.0));  // clip ceiling

  // all-zero data: degenerate scale
  for (auto& s : c.domains[0].samples) s.values = {0.0};
  CHECK_THROWS_AS(fit_scaler(c, 99.0, 3.0), NumericError);
}

TEST_CASE("percentile_of uses linear interpolation") {
  CHECK(percentile_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 100.0) == doctest::Approx(10.0));
  CHECK(percentile_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 50.0) == doctest::Approx(5.0));
  CHECK(percentile_of({0, 10}, 25.0) == doctest::Approx(2.5));
}

TEST_CASE("scaler matrix apply matches scalar apply") {
  const Scaler sc{2.0, 3.0};
  Eigen::MatrixXd m(1, 3);
  m << -1.0, 4.0, 100.0;
  const Eigen::MatrixXd out = sc.apply(m);
  CHECK(out(0, 0) == sc.apply(-1.0));
  CHECK(out(0, 1) == sc.apply(4.0));
  CHECK(out(0, 2) == sc.apply(100.0));
}
