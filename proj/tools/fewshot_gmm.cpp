// Command-line pipeline: prepare / synth / init-gmm / train / estimate /
// sample / evaluate / bench. Every run writes a run.json provenance record
// into its output directory. Exit codes: 0 ok, 2 usage, 3 data/format,
// 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fewshot/artifact.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/gmm.hpp"
#include "fewshot/metrics.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fewshot;

namespace {

std::uint64_t default_seed() {
  if (const char* env = std::getenv("FEWSHOT_GMM_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw UsageError("FEWSHOT_GMM_SEED is not an integer");
    }
  }
  return 0;
}

std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_run_record(const std::string& out_dir, const std::string& subcommand,
                      std::uint64_t seed, const std::vector<std::string>& inputs) {
  fs::create_directories(out_dir);
  json rec;
  rec["subcommand"] = subcommand;
  rec["format_version"] = kArtifactFormatVersion;
  rec["seed"] = seed;
  rec["timestamp_utc"] = static_cast<std::int64_t>(
      std::chrono::duration_cast<std::chrono::seconds>(
          std::chrono::system_clock::now().time_since_epoch())
          .count());
  json hashes = json::object();
  for (const auto& path : inputs)
    if (fs::exists(path) && fs::is_regular_file(path)) hashes[path] = file_hash(path);
  rec["input_hashes"] = std::move(hashes);
  std::ofstream out(out_dir + "/run.json");
  out << rec.dump(2) << "\n";
}

std::vector<int> parse_shot_list(const std::string& spec) {
  std::vector<int> out;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto dash = tok.find("..");
    if (dash != std::string::npos) {
      const int lo = std::stoi(tok.substr(0, dash));
      const int hi = std::stoi(tok.substr(dash + 2));
      for (int n = lo; n <= hi; ++n) out.push_back(n);
    } else {
      out.push_back(std::stoi(tok));
    }
  }
  if (out.empty()) throw UsageError("empty shot list");
  return out;
}

Eigen::MatrixXd pooled_scaled_source(const DatasetArtifact& art) {
  std::size_t total = 0;
  for (const auto& d : art.source.domains) total += d.samples.size();
  Eigen::MatrixXd pooled(total, art.T);
  Eigen::Index row = 0;
  for (const auto& d : art.source.domains) {
    const Eigen::MatrixXd m = art.scaler.apply(domain_matrix(d));
    pooled.middleRows(row, m.rows()) = m;
    row += m.rows();
  }
  return pooled;
}

int run(int argc, char** argv) {
  CLI::App app{"Few-shot electricity-consumption distribution estimation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = default_seed();
  int workers = 1;
  bool deterministic = false;
  app.add_option("--seed", seed, "Master seed (default: env FEWSHOT_GMM_SEED or 0)");
  app.add_option("--workers", workers, "Worker threads for per-domain stages");
  app.add_flag("--deterministic", deterministic, "Force single-worker ordered reductions");

  // ---- prepare ----
  auto* prepare = app.add_subcommand("prepare", "CSV -> prepared dataset artifact");
  std::string prep_input, prep_out;
  int prep_T = 24, prep_window = 250;
  double prep_pct = 99.0, prep_clip = 3.0;
  prepare->add_option("--input", prep_input, "Input CSV")->required();
  prepare->add_option("--out", prep_out, "Output artifact directory")->required();
  prepare->add_option("--T", prep_T, "Time steps per day");
  prepare->add_option("--window", prep_window, "Days per domain");
  prepare->add_option("--percentile", prep_pct, "Scaler percentile");
  prepare->add_option("--clip-hi", prep_clip, "Post-scaling clip ceiling");

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with truths");
  std::string synth_out;
  int synth_source = 100, synth_target = 20, synth_val = 20;
  int synth_T = 24, synth_jtrue = 4, synth_samples = 250;
  synth->add_option("--out", synth_out, "Output artifact directory")->required();
  synth->add_option("--source", synth_source, "Source domain count");
  synth->add_option("--target", synth_target, "Target (test) domain count");
  synth->add_option("--val", synth_val, "Validation domain count");
  synth->add_option("--T", synth_T, "Time steps per day");
  synth->add_option("--j-true", synth_jtrue, "Ground-truth component count");
  synth->add_option("--samples", synth_samples, "Samples per domain");

  // ---- init-gmm ----
  auto* initg = app.add_subcommand("init-gmm", "Fit the shared initial GMM parameters");
  std::string init_data, init_out;
  int init_J = 6;
  initg->add_option("--data", init_data, "Dataset artifact directory")->required();
  initg->add_option("--out", init_out, "Output theta_o JSON file")->required();
  initg->add_option("--J", init_J, "Component count");

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "Meta-train the encoder");
  std::string train_data, train_theta, train_out, train_cfg_path, train_resume;
  TrainConfig tc;
  EncoderConfig ec;
  train_cmd->add_option("--data", train_data, "Dataset artifact directory")->required();
  train_cmd->add_option("--theta-o", train_theta, "theta_o JSON file")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--config", train_cfg_path, "Training config JSON");
  train_cmd->add_option("--resume", train_resume, "Checkpoint to resume from");
  train_cmd->add_option("--steps", tc.total_steps, "Total optimizer steps");
  train_cmd->add_option("--batch", tc.batch_size, "Episodes per step");
  train_cmd->add_option("--lr-max", tc.lr_max, "Cyclical lr ceiling");
  train_cmd->add_option("--lr-min", tc.lr_min, "Cyclical lr floor");
  train_cmd->add_option("--cycle", tc.cycle_length, "Cyclical lr period (steps)");
  train_cmd->add_option("--eval-every", tc.eval_every, "Validation interval (0 = off)");
  train_cmd->add_option("--n-lo", tc.n_lo, "Minimum shots per episode");
  train_cmd->add_option("--n-hi", tc.n_hi, "Maximum shots per episode");
  train_cmd->add_option("--d-model", ec.d_model, "Encoder width");
  train_cmd->add_option("--layers", ec.n_layers, "Encoder layers");
  train_cmd->add_option("--heads", ec.n_heads, "Attention heads");
  train_cmd->add_option("--d-ff", ec.d_ff, "Feed-forward width");
  train_cmd->add_option("--n-max", ec.n_max, "Maximum shots (sequence size)");

  // ---- estimate ----
  auto* est = app.add_subcommand("estimate", "Shots CSV -> GMM parameter file");
  std::string est_shots, est_ckpt, est_out;
  est->add_option("--shots", est_shots, "Shots CSV (dataset schema)")->required();
  est->add_option("--checkpoint", est_ckpt, "Trained checkpoint")->required();
  est->add_option("--out", est_out, "Output parameter JSON")->required();

  // ---- sample ----
  auto* sample_cmd = app.add_subcommand("sample", "GMM parameter file -> ECP CSV");
  std::string sample_params, sample_out;
  int sample_m = 250;
  sample_cmd->add_option("--params", sample_params, "GMM parameter JSON")->required();
  sample_cmd->add_option("-m,--m", sample_m, "Number of samples");
  sample_cmd->add_option("--out", sample_out, "Output CSV (physical units)")->required();

  // ---- evaluate ----
  auto* eval_cmd = app.add_subcommand("evaluate", "Metric report on target domains");
  std::string eval_ckpt, eval_data, eval_out;
  std::string eval_shots = "4";
  int eval_m = 250;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Trained checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset artifact directory")->required();
  eval_cmd->add_option("--out", eval_out, "Output report CSV")->required();
  eval_cmd->add_option("--shots", eval_shots, "Shot counts, e.g. 4,8 or 1..24");
  eval_cmd->add_option("--m", eval_m, "Generated samples per evaluation");

  // ---- bench ----
  auto* bench_cmd = app.add_subcommand("bench", "Shot-sweep benchmark aggregates");
  std::string bench_ckpt, bench_data, bench_out;
  std::string bench_shots = "1..24";
  int bench_m = 250;
  bench_cmd->add_option("--checkpoint", bench_ckpt, "Trained checkpoint")->required();
  bench_cmd->add_option("--data", bench_data, "Dataset artifact directory")->required();
  bench_cmd->add_option("--out", bench_out, "Output directory")->required();
  bench_cmd->add_option("--shots", bench_shots, "Shot counts, e.g. 4,8,16,24 or 1..24");
  bench_cmd->add_option("--m", bench_m, "Generated samples per evaluation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (deterministic) workers = 1;

  if (*prepare) {
    const ParseResult parsed = parse_dataset(prep_input, prep_T);
    const BuildResult built = build_domains(parsed.series, prep_window, seed);
    DatasetArtifact art;
    art.T = prep_T;
    art.window = prep_window;
    art.seed = seed;
    art.counts = {{"households", parsed.series.size()},
                  {"dropped_rows", parsed.dropped_rows},
                  {"excluded_households", built.excluded_households},
                  {"domains", built.collection.domains.size()}};
    if (built.collection.domains.empty()) {
      art.scaler = Scaler{1.0, prep_clip};  // nothing to fit; identity divisor
    } else {
      std::vector<std::string> hh;
      for (const auto& d : built.collection.domains)
        if (std::find(hh.begin(), hh.end(), d.source_household_id) == hh.end())
          hh.push_back(d.source_household_id);
      if (hh.size() >= 3) {
        const SplitResult split = split_collection(built.collection, {0.8, 0.1, 0.1}, seed);
        art.source = split.source;
        art.test = split.test;
        art.validation = split.validation;
      } else {
        art.source = built.collection;
      }
      art.scaler = fit_scaler(art.source, prep_pct, prep_clip);
    }
    save_dataset_artifact(prep_out, art);
    write_run_record(prep_out, "prepare", seed, {prep_input});
    std::cout << "prepared " << art.source.domains.size() << "/"
              << art.test.domains.size() << "/" << art.validation.domains.size()
              << " source/test/validation domains (dropped rows: " << parsed.dropped_rows
              << ")\n";
    return 0;
  }

  if (*synth) {
    DatasetArtifact art;
    art.T = synth_T;
    art.window = synth_samples;
    art.seed = seed;
    art.synthetic = true;
    SynthConfig cfg;
    cfg.T = synth_T;
    cfg.J_true = synth_jtrue;
    cfg.samples_per_domain = synth_samples;

    auto gen = [&](int count, RoleTag tag, const std::string& prefix,
                   std::uint64_t sub_seed) {
      SynthConfig c = cfg;
      c.n_domains = count;
      c.id_prefix = prefix;
      c.master_seed = mix_seed(seed, sub_seed);
      return gen_collection(c, tag);
    };
    SynthResult src = gen(synth_source, RoleTag::source, "src", 0x51);
    SynthResult tgt = gen(synth_target, RoleTag::target, "tgt", 0x52);
    SynthResult val = gen(synth_val, RoleTag::validation, "val", 0x53);
    art.source = std::move(src.collection);
    art.test = std::move(tgt.collection);
    art.validation = std::move(val.collection);
    for (std::size_t i = 0; i < art.source.domains.size(); ++i)
      art.truths[art.source.domains[i].domain_id] = src.truths[i];
    for (std::size_t i = 0; i < art.test.domains.size(); ++i)
      art.truths[art.test.domains[i].domain_id] = tgt.truths[i];
    for (std::size_t i = 0; i < art.validation.domains.size(); ++i)
      art.truths[art.validation.domains[i].domain_id] = val.truths[i];
    art.scaler = fit_scaler(art.source);
    art.counts = {{"domains", art.source.domains.size() + art.test.domains.size() +
                                  art.validation.domains.size()}};
    save_dataset_artifact(synth_out, art);
    write_run_record(synth_out, "synth", seed, {});
    std::cout << "generated " << art.source.domains.size() << "/"
              << art.test.domains.size() << "/" << art.validation.domains.size()
              << " source/test/validation synthetic domains\n";
    return 0;
  }

  if (*initg) {
    const DatasetArtifact art = load_dataset_artifact(init_data);
    if (art.source.domains.empty()) throw FormatError("init-gmm: artifact has no source domains");
    GmmArtifact theta;
    theta.gmm = init_theta_o(pooled_scaled_source(art), init_J, seed);
    theta.scaler = art.scaler;
    theta.space = Space::scaled;
    save_gmm_artifact(init_out, theta);
    write_run_record(fs::path(init_out).parent_path().string().empty()
                         ? "."
                         : fs::path(init_out).parent_path().string(),
                     "init-gmm", seed, {init_data + "/manifest.json"});
    std::cout << "theta_o written to " << init_out << "\n";
    return 0;
  }

  if (*train_cmd) {
    if (!train_cfg_path.empty()) {
      std::ifstream in(train_cfg_path);
      if (!in) throw FormatError("cannot read training config: " + train_cfg_path);
      json j;
      in >> j;
      TrainConfig file_cfg = train_config_from_json(j);
      // Flags already parsed into tc override file values only when set.
      for (const auto* opt : train_cmd->get_options())
        (void)opt;
      // Simpler contract: file provides the base, explicit flags win.
      TrainConfig merged = file_cfg;
      if (train_cmd->count("--steps")) merged.total_steps = tc.total_steps;
      if (train_cmd->count("--batch")) merged.batch_size = tc.batch_size;
      if (train_cmd->count("--lr-max")) merged.lr_max = tc.lr_max;
      if (train_cmd->count("--lr-min")) merged.lr_min = tc.lr_min;
      if (train_cmd->count("--cycle")) merged.cycle_length = tc.cycle_length;
      if (train_cmd->count("--eval-every")) merged.eval_every = tc.eval_every;
      if (train_cmd->count("--n-lo")) merged.n_lo = tc.n_lo;
      if (train_cmd->count("--n-hi")) merged.n_hi = tc.n_hi;
      tc = merged;
    }
    tc.master_seed = seed;
    tc.workers = workers;
    const DatasetArtifact art = load_dataset_artifact(train_data);
    const GmmArtifact theta = load_gmm_artifact(train_theta);
    ec.T = art.T;
    ec.J = theta.gmm.J;
    std::int64_t start_step = 0;
    Checkpoint resume;
    const Checkpoint* resume_ptr = nullptr;
    if (!train_resume.empty()) {
      resume = load_checkpoint(train_resume);
      start_step = resume.step;
      resume_ptr = &resume;
    }
    const TrainOutput out = train(tc, art, theta, ec, train_out, start_step, resume_ptr);
    write_run_record(train_out, "train", seed,
                     {train_data + "/manifest.json", train_theta});
    std::cout << "training done; last checkpoint: " << out.last_checkpoint << "\n";
    return 0;
  }

  if (*est) {
    const Checkpoint ckpt = load_checkpoint(est_ckpt);
    std::vector<EcpSample> shots;
    std::ifstream probe(est_shots);
    if (!probe) throw FormatError("cannot read shots CSV: " + est_shots);
    std::string header;
    std::getline(probe, header);
    probe.close();
    if (header.rfind("domain_id,", 0) == 0) {
      // prepared-split schema: domain_id,household_id,day_of_year,v0..
      const DomainCollection c =
          read_split_csv(est_shots, ckpt.model.config.T, RoleTag::target);
      for (const auto& d : c.domains)
        for (const auto& s : d.samples) shots.push_back(s);
    } else {
      // raw ingestion schema: id,date,h00..
      const ParseResult parsed = parse_dataset(est_shots, ckpt.model.config.T);
      for (const auto& hh : parsed.series)
        for (const auto& day : hh.days) shots.push_back(day.sample);
    }
    if (shots.empty()) throw FormatError("estimate: no usable shot rows in " + est_shots);
    const GmmArtifact out = estimate(ckpt, shots);
    save_gmm_artifact(est_out, out);
    const std::string dir = fs::path(est_out).parent_path().string();
    write_run_record(dir.empty() ? "." : dir, "estimate", seed, {est_shots, est_ckpt});
    std::cout << "parameters written to " << est_out << "\n";
    return 0;
  }

  if (*sample_cmd) {
    const GmmArtifact art = load_gmm_artifact(sample_params);
    Eigen::MatrixXd draws = sample_gmm(art.gmm, sample_m, seed, /*clip_nonneg=*/true);
    if (art.space == Space::scaled) draws = art.scaler.invert(draws);
    draws = draws.array().max(0.0);
    std::ofstream out(sample_out);
    if (!out) throw FormatError("cannot write sample CSV: " + sample_out);
    for (int t = 0; t < art.gmm.T; ++t) out << (t ? "," : "") << "h" << t;
    out << "\n";
    for (Eigen::Index i = 0; i < draws.rows(); ++i) {
      for (Eigen::Index t = 0; t < draws.cols(); ++t)
        out << (t ? "," : "") << format_g17(draws(i, t));
      out << "\n";
    }
    const std::string dir = fs::path(sample_out).parent_path().string();
    write_run_record(dir.empty() ? "." : dir, "sample", seed, {sample_params});
    std::cout << "wrote " << draws.rows() << " samples to " << sample_out << "\n";
    return 0;
  }

  if (*eval_cmd || *bench_cmd) {
    const bool is_bench = static_cast<bool>(*bench_cmd);
    const Checkpoint ckpt = load_checkpoint(is_bench ? bench_ckpt : eval_ckpt);
    const DatasetArtifact art = load_dataset_artifact(is_bench ? bench_data : eval_data);
    if (art.T != ckpt.model.config.T)
      throw FormatError("checkpoint and dataset artifact disagree on T");
    const auto shot_counts = parse_shot_list(is_bench ? bench_shots : eval_shots);
    const BenchResult result = run_benchmark(ckpt, art.test, shot_counts, seed,
                                             is_bench ? bench_m : eval_m, workers);
    if (is_bench) {
      fs::create_directories(bench_out);
      write_bench_csv(bench_out + "/bench.csv", result);
      write_bench_aggregate_csv(bench_out + "/aggregate.csv", result);
      write_run_record(bench_out, "bench", seed,
                       {bench_data + "/manifest.json", bench_ckpt});
      std::cout << "benchmark rows: " << result.rows.size() << "\n";
    } else {
      std::ofstream out(eval_out);
      if (!out) throw FormatError("cannot write report: " + eval_out);
      out << "domain_id,n_shots,method,mmd,kl,ks,wd,mse_mean,seed\n";
      for (const auto& row : result.rows)
        out << row.domain_id << "," << row.n_shots << "," << row.method << ","
            << row.report.mmd << "," << row.report.kl << "," << row.report.ks << ","
            << row.report.wd << "," << row.report.mse_mean << "," << row.report.seed
            << "\n";
      const std::string dir = fs::path(eval_out).parent_path().string();
      write_run_record(dir.empty() ? "." : dir, "evaluate", seed,
                       {eval_data + "/manifest.json", eval_ckpt});
      std::cout << "report rows: " << result.rows.size() << "\n";
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
