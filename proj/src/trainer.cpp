#include "fewshot/trainer.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <thread>

#include "fewshot/metrics.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kGradClipNorm = 1.0;

struct EpisodeGrads {
  double loss = 0.0;
  std::vector<Eigen::ArrayXd> grads;  // aligned with sorted parameter names
};

EpisodeGrads episode_backward(const EncoderModel& model, const Episode& ep,
                              const std::vector<std::string>& names) {
  diff::Tape tape;
  auto params = make_param_nodes(tape, model, true);
  TokenInputs inputs{ep.shots, ep.date_ids, ep.theta_e.means, ep.theta_e.sigmas};
  auto tokens = build_tokens(tape, params, inputs, model.config);
  const Eigen::ArrayXd mask =
      attention_mask(model.config, static_cast<int>(ep.shots.rows()));
  auto shift = encode_graph(tape, params, tokens, mask, model.config);
  auto theta_hat = apply_shift_graph(tape, ep.theta_e, shift, model.config);
  auto total = nll_graph(tape, theta_hat, ep.theta_e.weights, *ep.full_domain);
  auto loss = tape.scalar_mul(total, 1.0 / static_cast<double>(ep.full_domain->rows()));
  tape.backward(loss);

  EpisodeGrads out;
  out.loss = loss->value(0);
  out.grads.reserve(names.size());
  for (const auto& name : names) {
    const auto& node = params.at(name);
    if (node->grad.size() == node->size()) out.grads.push_back(node->grad);
    else out.grads.push_back(Eigen::ArrayXd::Zero(node->size()));
  }
  return out;
}

void run_parallel(int jobs, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || jobs <= 1) {
    for (int i = 0; i < jobs; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int n_threads = std::min(workers, jobs);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
  for (int w = 0; w < n_threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next.fetch_add(1); i < jobs; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::string format_g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double validation_mmd(const Checkpoint& ckpt, const TrainingSet& val, int max_domains,
                      std::uint64_t seed) {
  const int count = std::min<int>(max_domains, static_cast<int>(val.data.size()));
  if (count == 0) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (int i = 0; i < count; ++i) {
    const Eigen::MatrixXd& full = val.data[static_cast<std::size_t>(i)];
    Rng rng(mix_seed(seed, 0xa1, static_cast<std::uint64_t>(i)));
    const auto idx = rng.sample_without_replacement(static_cast<std::size_t>(full.rows()), 4);
    Eigen::MatrixXd shots(4, full.cols());
    std::vector<int> dates(4);
    for (int s = 0; s < 4; ++s) {
      shots.row(s) = full.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(s)]));
      dates[static_cast<std::size_t>(s)] =
          val.date_ids[static_cast<std::size_t>(i)][idx[static_cast<std::size_t>(s)]];
    }
    const SphericalGmm theta_hat = predict_theta_r(ckpt, shots, dates);
    const Eigen::MatrixXd gen =
        sample_gmm(theta_hat, static_cast<int>(full.rows()),
                   mix_seed(seed, 0x5a3, static_cast<std::uint64_t>(i)));
    acc += mmd(gen, full);
  }
  return acc / static_cast<double>(count);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_min < lr_max)) throw UsageError("train config: lr_min must be < lr_max");
  if (n_lo < 1 || n_hi < n_lo) throw UsageError("train config: bad n range");
  if (batch_size < 1 || cycle_length < 2) throw UsageError("train config: bad sizes");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},   {"n_lo", c.n_lo},
          {"n_hi", c.n_hi},               {"lr_max", c.lr_max},
          {"lr_min", c.lr_min},           {"cycle_length", c.cycle_length},
          {"total_steps", c.total_steps}, {"master_seed", c.master_seed},
          {"eval_every", c.eval_every},   {"val_domains", c.val_domains},
          {"workers", c.workers}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.value("batch_size", c.batch_size);
  c.n_lo = j.value("n_lo", c.n_lo);
  c.n_hi = j.value("n_hi", c.n_hi);
  c.lr_max = j.value("lr_max", c.lr_max);
  c.lr_min = j.value("lr_min", c.lr_min);
  c.cycle_length = j.value("cycle_length", c.cycle_length);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.master_seed = j.value("master_seed", c.master_seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.val_domains = j.value("val_domains", c.val_domains);
  c.workers = j.value("workers", c.workers);
  return c;
}

double cyclical_lr(int step, const TrainConfig& config) {
  if (step < 0) throw UsageError("cyclical_lr: step must be >= 0");
  const int pos = step % config.cycle_length;
  const double half = static_cast<double>(config.cycle_length) / 2.0;
  const double frac = pos <= half ? static_cast<double>(pos) / half
                                  : static_cast<double>(config.cycle_length - pos) / half;
  return config.lr_min + (config.lr_max - config.lr_min) * frac;
}

TrainingSet make_training_set(const DomainCollection& collection, const Scaler& scaler) {
  TrainingSet set;
  for (const auto& d : collection.domains) {
    set.domain_ids.push_back(d.domain_id);
    std::vector<int> dates;
    dates.reserve(d.samples.size());
    for (const auto& s : d.samples) dates.push_back(s.day_of_year);
    set.date_ids.push_back(std::move(dates));
    set.data.push_back(scaler.apply(domain_matrix(d)));
  }
  return set;
}

std::vector<Episode> make_episode(const TrainingSet& source, const SphericalGmm& theta_o,
                                  const TrainConfig& config, const EncoderConfig& enc,
                                  int step) {
  if (source.data.empty()) throw UsageError("make_episode: empty source collection");
  if (config.batch_size > static_cast<int>(source.data.size()))
    throw UsageError("make_episode: batch_size exceeds source domain count");
  if (config.n_hi > enc.n_max) throw UsageError("make_episode: n_hi exceeds n_max");

  Rng rng(mix_seed(config.master_seed, 0xba7c4, static_cast<std::uint64_t>(step)));
  const auto picks = rng.sample_without_replacement(
      source.data.size(), static_cast<std::size_t>(config.batch_size));

  std::vector<Episode> batch;
  batch.reserve(picks.size());
  for (std::size_t b = 0; b < picks.size(); ++b) {
    const std::size_t d = picks[b];
    const Eigen::MatrixXd& full = source.data[d];
    const int n = rng.uniform_int(config.n_lo, config.n_hi);
    const auto idx =
        rng.sample_without_replacement(static_cast<std::size_t>(full.rows()),
                                       static_cast<std::size_t>(n));
    Episode ep;
    ep.domain_id = source.domain_ids[d];
    ep.shots.resize(n, full.cols());
    ep.date_ids.resize(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
      ep.shots.row(s) = full.row(static_cast<Eigen::Index>(idx[static_cast<std::size_t>(s)]));
      ep.date_ids[static_cast<std::size_t>(s)] = source.date_ids[d][idx[static_cast<std::size_t>(s)]];
    }
    ep.theta_e = within_domain_tuning(theta_o, ep.shots, z_schedule(n), enc.sigma_floor);
    ep.full_domain = &full;
    batch.push_back(std::move(ep));
  }
  return batch;
}

StepResult train_step(EncoderModel& model, const std::vector<Episode>& batch,
                      AdamState& adam, double lr, int workers) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  std::vector<std::string> names;
  names.reserve(model.params.size());
  for (const auto& [name, v] : model.params) names.push_back(name);

  std::vector<EpisodeGrads> per_episode(batch.size());
  run_parallel(static_cast<int>(batch.size()), workers, [&](int i) {
    per_episode[static_cast<std::size_t>(i)] =
        episode_backward(model, batch[static_cast<std::size_t>(i)], names);
  });

  // Deterministic reduction in episode order.
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  std::vector<Eigen::ArrayXd> grads;
  grads.reserve(names.size());
  for (std::size_t p = 0; p < names.size(); ++p)
    grads.push_back(Eigen::ArrayXd::Zero(per_episode[0].grads[p].size()));
  for (const auto& epg : per_episode) {
    loss += epg.loss * inv_b;
    for (std::size_t p = 0; p < names.size(); ++p) grads[p] += epg.grads[p] * inv_b;
  }

  StepResult result;
  result.loss = loss;
  if (!std::isfinite(loss)) return result;

  double sq_norm = 0.0;
  for (const auto& g : grads) sq_norm += g.square().sum();
  if (!std::isfinite(sq_norm)) return result;
  const double norm = std::sqrt(sq_norm);
  const double clip = norm > kGradClipNorm ? kGradClipNorm / norm : 1.0;

  if (adam.m.empty()) {
    for (std::size_t p = 0; p < names.size(); ++p) {
      adam.m[names[p]] = Eigen::ArrayXd::Zero(grads[p].size());
      adam.v[names[p]] = Eigen::ArrayXd::Zero(grads[p].size());
    }
  }
  adam.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(adam.t));
  for (std::size_t p = 0; p < names.size(); ++p) {
    const Eigen::ArrayXd g = grads[p] * clip;
    Eigen::ArrayXd& m = adam.m[names[p]];
    Eigen::ArrayXd& v = adam.v[names[p]];
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g.square();
    quantize_f32(m);
    quantize_f32(v);
    Eigen::ArrayXd& param = model.params[names[p]];
    param -= lr * (m / bc1) / ((v / bc2).sqrt() + kAdamEps);
    quantize_f32(param);
  }
  result.applied = true;
  return result;
}

TrainOutput train(const TrainConfig& config, const DatasetArtifact& dataset,
                  const GmmArtifact& theta_o, const EncoderConfig& enc,
                  const std::string& out_dir, std::int64_t start_step,
                  const Checkpoint* resume_from) {
  config.validate();
  enc.validate();
  if (theta_o.gmm.J != enc.J || theta_o.gmm.T != enc.T)
    throw UsageError("train: theta_o shape does not match encoder config");
  std::filesystem::create_directories(out_dir);

  const TrainingSet source = make_training_set(dataset.source, dataset.scaler);
  const TrainingSet validation = make_training_set(dataset.validation, dataset.scaler);

  Checkpoint ckpt;
  AdamState adam;
  if (resume_from) {
    ckpt = *resume_from;
    adam.m = ckpt.adam_m;
    adam.v = ckpt.adam_v;
    adam.t = ckpt.adam_t;
  } else {
    ckpt.model = init_model(enc, config.master_seed);
    ckpt.theta_o = theta_o.gmm;
    ckpt.scaler = dataset.scaler;
    ckpt.master_seed = config.master_seed;
  }

  TrainOutput out;
  out.best_checkpoint = out_dir + "/ckpt_best.bin";
  out.last_checkpoint = out_dir + "/ckpt_last.bin";
  out.log_path = out_dir + "/train_log.csv";

  std::ofstream log(out.log_path, start_step > 0 ? std::ios::app : std::ios::out);
  if (!log) throw FormatError("cannot write training log: " + out.log_path);
  if (start_step == 0) log << "step,lr,train_loss,val_mmd\n";

  double lr_scale = 1.0;
  double best_val = std::numeric_limits<double>::infinity();

  auto save = [&](const std::string& path, std::int64_t step) {
    ckpt.step = step;
    ckpt.adam_t = adam.t;
    ckpt.adam_m = adam.m;
    ckpt.adam_v = adam.v;
    save_checkpoint(path, ckpt);
  };

  for (std::int64_t step = start_step; step < config.total_steps; ++step) {
    const double lr = cyclical_lr(static_cast<int>(step), config) * lr_scale;
    const auto batch =
        make_episode(source, ckpt.theta_o, config, enc, static_cast<int>(step));
    const StepResult sr = train_step(ckpt.model, batch, adam, lr, config.workers);
    if (!sr.applied) {
      // Non-finite loss: skip the update and halve the lr ladder.
      lr_scale *= 0.5;
      log << step << "," << format_g17(lr) << ",nan,\n";
      continue;
    }
    log << step << "," << format_g17(lr) << "," << format_g17(sr.loss);
    if (config.eval_every > 0 && (step + 1) % config.eval_every == 0 &&
        !validation.data.empty()) {
      const double val = validation_mmd(ckpt, validation, config.val_domains,
                                        mix_seed(config.master_seed, 0xea1,
                                                 static_cast<std::uint64_t>(step)));
      log << "," << format_g17(val) << "\n";
      if (val < best_val) {
        best_val = val;
        save(out.best_checkpoint, step + 1);
      }
    } else {
      log << ",\n";
    }
    log.flush();
  }

  save(out.last_checkpoint, config.total_steps);
  if (!std::filesystem::exists(out.best_checkpoint))
    save(out.best_checkpoint, config.total_steps);
  return out;
}

SphericalGmm predict_theta_r(const Checkpoint& ckpt, const Eigen::MatrixXd& shots_scaled,
                             const std::vector<int>& date_ids) {
  const int n = static_cast<int>(shots_scaled.rows());
  if (n < 1 || n > ckpt.model.config.n_max)
    throw UsageError("estimate: shot count out of [1, n_max]");
  const SphericalGmm theta_e = within_domain_tuning(
      ckpt.theta_o, shots_scaled, z_schedule(n), ckpt.model.config.sigma_floor);
  const TokenSequence ts = tokenize(ckpt.model, shots_scaled, date_ids, theta_e);
  const ShiftVector shift = encode(ckpt.model, ts);
  return apply_shift(theta_e, shift, ckpt.model.config);
}

GmmArtifact estimate(const Checkpoint& ckpt, const std::vector<EcpSample>& shots_physical) {
  if (shots_physical.empty()) throw UsageError("estimate: no shots provided");
  Eigen::MatrixXd shots = ckpt.scaler.apply(samples_matrix(shots_physical));
  std::vector<int> dates;
  dates.reserve(shots_physical.size());
  for (const auto& s : shots_physical) dates.push_back(s.day_of_year);
  GmmArtifact out;
  out.gmm = predict_theta_r(ckpt, shots, dates);
  out.scaler = ckpt.scaler;
  out.space = Space::scaled;
  return out;
}

}  // namespace fewshot
