#include "fewshot/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fewshot/rng.hpp"

namespace fewshot {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  auto [ptr, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && ptr == e;
}

bool parse_int(const std::string& s, int& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool is_leap(int y) { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

// Days since 1970-01-01 (valid for years >= 1).
long epoch_day_of(int y, int m, int d) {
  // Howard Hinnant's civil-days algorithm.
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

}  // namespace

int day_of_year(int year, int month, int day) {
  static const int cum[12] = {0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334};
  static const int len[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (month < 1 || month > 12) throw FormatError("invalid month");
  int max_day = len[month - 1] + (month == 2 && is_leap(year) ? 1 : 0);
  if (day < 1 || day > max_day) throw FormatError("invalid day of month");
  int doy = cum[month - 1] + day;
  if (month > 2 && is_leap(year)) doy += 1;
  return doy;
}

ParseResult parse_dataset(const std::string& path, int T) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty file, header required: " + path);
  const auto header = split_csv_line(line);
  if (static_cast<int>(header.size()) != T + 2)
    throw FormatError("malformed header: expected " + std::to_string(T + 2) +
                      " columns, got " + std::to_string(header.size()));

  std::map<std::string, std::vector<DatedSample>> by_household;
  std::vector<std::string> order;
  std::size_t dropped = 0;

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (static_cast<int>(f.size()) != T + 2) {
      ++dropped;
      continue;
    }
    int y = 0, m = 0, d = 0;
    const std::string& date = f[1];
    if (date.size() != 10 || date[4] != '-' || date[7] != '-' ||
        !parse_int(date.substr(0, 4), y) || !parse_int(date.substr(5, 2), m) ||
        !parse_int(date.substr(8, 2), d)) {
      ++dropped;
      continue;
    }
    EcpSample sample;
    sample.values.resize(T);
    bool ok = true;
    try {
      sample.day_of_year = day_of_year(y, m, d);
    } catch (const FormatError&) {
      ok = false;
    }
    for (int t = 0; ok && t < T; ++t) {
      double v;
      if (!parse_double(f[2 + t], v) || !std::isfinite(v) || v < 0.0) ok = false;
      else sample.values[t] = v;
    }
    if (!ok) {
      ++dropped;
      continue;
    }
    auto it = by_household.find(f[0]);
    if (it == by_household.end()) {
      order.push_back(f[0]);
      it = by_household.emplace(f[0], std::vector<DatedSample>{}).first;
    }
    it->second.push_back({std::move(sample), epoch_day_of(y, m, d)});
  }

  ParseResult result;
  result.dropped_rows = dropped;
  for (const auto& id : order) {
    HouseholdSeries s;
    s.household_id = id;
    s.days = by_household[id];
    std::stable_sort(s.days.begin(), s.days.end(),
                     [](const DatedSample& a, const DatedSample& b) {
                       return a.epoch_day < b.epoch_day;
                     });
    result.series.push_back(std::move(s));
  }
  return result;
}

BuildResult build_domains(const std::vector<HouseholdSeries>& series, int window,
                          std::uint64_t seed) {
  if (window < 1) throw UsageError("build_domains: window must be >= 1");
  BuildResult result;
  for (const auto& hh : series) {
    const std::size_t days = hh.days.size();
    if (days < static_cast<std::size_t>(window)) {
      ++result.excluded_households;
      continue;
    }
    const std::size_t replicas = days / static_cast<std::size_t>(window);
    Rng rng(mix_seed(seed, std::hash<std::string>{}(hh.household_id)));
    const auto idx =
        rng.sample_without_replacement(days, replicas * static_cast<std::size_t>(window));
    for (std::size_t r = 0; r < replicas; ++r) {
      Domain dom;
      dom.source_household_id = hh.household_id;
      dom.domain_id = hh.household_id + "#" + std::to_string(r);
      dom.samples.reserve(window);
      for (int i = 0; i < window; ++i)
        dom.samples.push_back(hh.days[idx[r * window + i]].sample);
      result.collection.domains.push_back(std::move(dom));
    }
  }
  return result;
}

SplitResult split_collection(const DomainCollection& collection,
                             std::array<double, 3> ratios, std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw UsageError("split ratios must sum to 1");

  std::vector<std::string> households;
  for (const auto& d : collection.domains)
    if (std::find(households.begin(), households.end(), d.source_household_id) ==
        households.end())
      households.push_back(d.source_household_id);
  if (households.size() < 3) throw FormatError("split requires at least 3 households");

  std::sort(households.begin(), households.end());
  Rng rng(mix_seed(seed, 0x5b17));
  rng.shuffle(households);

  const std::size_t h = households.size();
  std::size_t n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(h))));
  std::size_t n_val = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(ratios[2] * static_cast<double>(h))));
  if (n_test + n_val + 1 > h) {
    n_test = 1;
    n_val = 1;
  }

  SplitResult out;
  out.source.role_tag = RoleTag::source;
  out.test.role_tag = RoleTag::target;
  out.validation.role_tag = RoleTag::validation;

  std::map<std::string, int> bucket;  // 0 source, 1 test, 2 validation
  for (std::size_t i = 0; i < h; ++i) {
    int b = 0;
    if (i >= h - n_test - n_val) b = (i >= h - n_val) ? 2 : 1;
    bucket[households[i]] = b;
  }
  for (const auto& d : collection.domains) {
    switch (bucket[d.source_household_id]) {
      case 0: out.source.domains.push_back(d); break;
      case 1: out.test.domains.push_back(d); break;
      default: out.validation.domains.push_back(d); break;
    }
  }
  return out;
}

ShotSet sample_shots(const Domain& domain, int n, std::uint64_t seed) {
  const int total = static_cast<int>(domain.samples.size());
  if (n < 1 || n > total)
    throw UsageError("sample_shots: n must be in [1, " + std::to_string(total) + "]");

  // Canonical order so the draw depends on sample identity, not storage order.
  std::vector<std::size_t> canon(domain.samples.size());
  for (std::size_t i = 0; i < canon.size(); ++i) canon[i] = i;
  std::sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) {
    const auto& sa = domain.samples[a];
    const auto& sb = domain.samples[b];
    if (sa.day_of_year != sb.day_of_year) return sa.day_of_year < sb.day_of_year;
    return sa.values < sb.values;
  });

  Rng rng(mix_seed(seed, std::hash<std::string>{}(domain.domain_id), 0x5807));
  const auto picks = rng.sample_without_replacement(canon.size(), static_cast<std::size_t>(n));

  ShotSet out;
  out.domain_id = domain.domain_id;
  out.seed = seed;
  out.shots.reserve(n);
  for (auto p : picks) out.shots.push_back(domain.samples[canon[p]]);
  return out;
}

double percentile_of(std::vector<double> pool, double p) {
  if (pool.empty()) throw UsageError("percentile of empty pool");
  std::sort(pool.begin(), pool.end());
  if (pool.size() == 1) return pool[0];
  const double pos = p / 100.0 * static_cast<double>(pool.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, pool.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return pool[lo] * (1.0 - frac) + pool[hi] * frac;
}

Scaler fit_scaler(const DomainCollection& source, double percentile, double clip_hi) {
  std::vector<double> pool;
  for (const auto& d : source.domains)
    for (const auto& s : d.samples)
      pool.insert(pool.end(), s.values.begin(), s.values.end());
  if (pool.empty()) throw UsageError("fit_scaler: empty source collection");
  const double scale = percentile_of(std::move(pool), percentile);
  if (scale <= 0.0) throw NumericError("fit_scaler: degenerate scale (all readings zero?)");
  return Scaler{scale, clip_hi};
}

Eigen::MatrixXd samples_matrix(const std::vector<EcpSample>& samples) {
  if (samples.empty()) return {};
  Eigen::MatrixXd m(samples.size(), samples[0].values.size());
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t t = 0; t < samples[i].values.size(); ++t)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = samples[i].values[t];
  return m;
}

Eigen::MatrixXd domain_matrix(const Domain& domain) { return samples_matrix(domain.samples); }

}  // namespace fewshot
