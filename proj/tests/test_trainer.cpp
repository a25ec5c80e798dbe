#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "fewshot/artifact.hpp"
#include "fewshot/synth.hpp"
#include "fewshot/trainer.hpp"

using namespace fewshot;

namespace {

EncoderConfig small_encoder(int T, int J) {
  EncoderConfig e;
  e.d_model = 16;
  e.n_layers = 1;
  e.n_heads = 2;
  e.d_ff = 32;
  e.T = T;
  e.J = J;
  e.n_max = 8;
  return e;
}

DatasetArtifact small_dataset(std::uint64_t seed, int n_source = 10, int n_val = 3) {
  SynthConfig cfg;
  cfg.T = 6;
  cfg.J_true = 2;
  cfg.samples_per_domain = 40;
  cfg.master_seed = seed;

  DatasetArtifact art;
  art.T = cfg.T;
  art.synthetic = true;
  cfg.n_domains = n_source;
  cfg.id_prefix = "src";
  art.source = gen_collection(cfg).collection;
  cfg.n_domains = n_val;
  cfg.id_prefix = "val";
  cfg.master_seed = seed + 1;
  art.validation = gen_collection(cfg, RoleTag::validation).collection;
  cfg.n_domains = 2;
  cfg.id_prefix = "tgt";
  cfg.master_seed = seed + 2;
  art.test = gen_collection(cfg, RoleTag::target).collection;
  art.scaler = fit_scaler(art.source);
  return art;
}

GmmArtifact theta_for(const DatasetArtifact& art, int J) {
  Eigen::MatrixXd pooled(0, art.T);
  for (const auto& d : art.source.domains) {
    const Eigen::MatrixXd m = art.scaler.apply(domain_matrix(d));
    pooled.conservativeResize(pooled.rows() + m.rows(), art.T);
    pooled.bottomRows(m.rows()) = m;
  }
  GmmArtifact g;
  g.gmm = init_theta_o(pooled, J, 3);
  g.scaler = art.scaler;
  g.space = Space::scaled;
  return g;
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("cyclical_lr: triangular schedule endpoints") {
  TrainConfig c;
  c.lr_min = 1e-5;
  c.lr_max = 1e-3;
  c.cycle_length = 2000;
  CHECK(cyclical_lr(0, c) == doctest::Approx(1e-5));
  CHECK(cyclical_lr(1000, c) == doctest::Approx(1e-3));
  CHECK(cyclical_lr(500, c) == doctest::Approx(5.05e-4));
  CHECK(cyclical_lr(2000, c) == doctest::Approx(1e-5));  // next cycle start
  CHECK(cyclical_lr(1500, c) == doctest::Approx(5.05e-4));
}

TEST_CASE("train_config JSON round trip") {
  TrainConfig c;
  c.batch_size = 17;
  c.n_lo = 2;
  c.n_hi = 9;
  c.lr_max = 2e-3;
  c.cycle_length = 123;
  c.total_steps = 777;
  c.master_seed = 99;
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(back.batch_size == 17);
  CHECK(back.n_lo == 2);
  CHECK(back.n_hi == 9);
  CHECK(back.lr_max == 2e-3);
  CHECK(back.cycle_length == 123);
  CHECK(back.total_steps == 777);
  CHECK(back.master_seed == 99);
}

TEST_CASE("make_episode: determinism and shot-count control") {
  const DatasetArtifact art = small_dataset(1);
  const GmmArtifact theta = theta_for(art, 2);
  const TrainingSet set = make_training_set(art.source, art.scaler);
  const EncoderConfig enc = small_encoder(art.T, 2);

  TrainConfig c;
  c.batch_size = 4;
  c.n_lo = 4;
  c.n_hi = 8;

  SUBCASE("same (seed, step) twice gives the identical batch") {
    const auto a = make_episode(set, theta.gmm, c, enc, 3);
    const auto b = make_episode(set, theta.gmm, c, enc, 3);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].domain_id == b[i].domain_id);
      CHECK((a[i].shots.array() == b[i].shots.array()).all());
      CHECK((a[i].theta_e.means.array() == b[i].theta_e.means.array()).all());
    }
    const auto other = make_episode(set, theta.gmm, c, enc, 4);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].domain_id != other[i].domain_id ||
          a[i].shots.rows() != other[i].shots.rows() ||
          (a[i].shots.rows() == other[i].shots.rows() &&
           (a[i].shots.array() != other[i].shots.array()).any()))
        any_diff = true;
    CHECK(any_diff);
  }
  SUBCASE("degenerate shot interval pins n") {
    c.n_lo = c.n_hi = 4;
    for (const auto& ep : make_episode(set, theta.gmm, c, enc, 0))
      CHECK(ep.shots.rows() == 4);
  }
  SUBCASE("batch larger than the source throws") {
    c.batch_size = static_cast<int>(set.data.size()) + 1;
    CHECK_THROWS_AS(make_episode(set, theta.gmm, c, enc, 0), UsageError);
  }
  SUBCASE("theta_e comes from z-schedule-depth tuning") {
    const auto eps = make_episode(set, theta.gmm, c, enc, 0);
    for (const auto& ep : eps) {
      const int z = z_schedule(static_cast<int>(ep.shots.rows()));
      const SphericalGmm expect = within_domain_tuning(theta.gmm, ep.shots, z);
      CHECK((ep.theta_e.means - expect.means).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("train_step: identity-shift loss and lr=0 behavior") {
  const DatasetArtifact art = small_dataset(2);
  const GmmArtifact theta = theta_for(art, 2);
  const TrainingSet set = make_training_set(art.source, art.scaler);
  const EncoderConfig enc = small_encoder(art.T, 2);
  TrainConfig c;
  c.batch_size = 3;
  c.n_lo = 4;
  c.n_hi = 6;
  const auto batch = make_episode(set, theta.gmm, c, enc, 0);

  EncoderModel model = init_model(enc, 5);

  SUBCASE("zero heads: loss equals the mean per-sample nll of theta_e") {
    double expected = 0.0;
    for (const auto& ep : batch)
      expected += nll(ep.theta_e, *ep.full_domain) / static_cast<double>(ep.full_domain->rows());
    expected /= static_cast<double>(batch.size());

    AdamState adam;
    const StepResult r = train_step(model, batch, adam, 0.0);
    CHECK(r.applied);
    CHECK(r.loss == doctest::Approx(expected).epsilon(1e-10));
  }
  SUBCASE("lr=0 leaves parameters unchanged") {
    const EncoderModel before = model;
    AdamState adam;
    train_step(model, batch, adam, 0.0);
    for (const auto& [name, arr] : model.params)
      CHECK((arr == before.params.at(name)).all());
  }
  SUBCASE("worker count does not change the applied update") {
    EncoderModel m1 = init_model(enc, 5);
    EncoderModel m2 = init_model(enc, 5);
    AdamState a1, a2;
    const StepResult r1 = train_step(m1, batch, a1, 1e-3, 1);
    const StepResult r2 = train_step(m2, batch, a2, 1e-3, 3);
    CHECK(r1.loss == r2.loss);
    for (const auto& [name, arr] : m1.params)
      CHECK((arr == m2.params.at(name)).all());
  }
  SUBCASE("parameters stay on the float32 grid after an update") {
    AdamState adam;
    train_step(model, batch, adam, 1e-3);
    for (const auto& [name, arr] : model.params) {
      Eigen::ArrayXd q = arr;
      quantize_f32(q);
      CHECK((q == arr).all());
    }
  }
}

TEST_CASE("train: total_steps=0 emits only the initial checkpoint") {
  const DatasetArtifact art = small_dataset(3);
  const GmmArtifact theta = theta_for(art, 2);
  TrainConfig c;
  c.batch_size = 3;
  c.total_steps = 0;
  c.eval_every = 0;
  c.master_seed = 4;
  const std::string dir = temp_dir("train_zero_steps");
  const TrainOutput out = train(c, art, theta, small_encoder(art.T, 2), dir);
  CHECK(std::filesystem::exists(out.last_checkpoint));
  const Checkpoint ckpt = load_checkpoint(out.last_checkpoint);
  CHECK(ckpt.step == 0);
  // a second zero-step run with the same master seed stores the same model
  const Checkpoint again = load_checkpoint(
      train(c, art, theta, small_encoder(art.T, 2), temp_dir("train_zero_steps2"))
          .last_checkpoint);
  for (const auto& [name, arr] : ckpt.model.params)
    CHECK((arr == again.model.params.at(name)).all());
  std::filesystem::remove_all(dir);
}

TEST_CASE("train: short run decreases the loss and replays bitwise") {
  const DatasetArtifact art = small_dataset(4, 16, 4);
  const GmmArtifact theta = theta_for(art, 2);
  TrainConfig c;
  c.batch_size = 4;
  c.n_lo = 4;
  c.n_hi = 8;
  c.total_steps = 60;
  c.cycle_length = 60;
  c.eval_every = 0;
  c.master_seed = 9;
  c.workers = 2;
  const EncoderConfig enc = small_encoder(art.T, 2);

  const std::string dir1 = temp_dir("train_short_1");
  const TrainOutput o1 = train(c, art, theta, enc, dir1);

  // parse the loss log: mean of the first 10 losses vs the last 10
  std::ifstream log(o1.log_path);
  std::string line;
  std::getline(log, line);
  CHECK(line == "step,lr,train_loss,val_mmd");
  std::vector<double> losses;
  while (std::getline(log, line)) {
    const auto c1 = line.find(','), c2 = line.find(',', line.find(',') + 1);
    const auto c3 = line.find(',', c2 + 1);
    losses.push_back(std::stod(line.substr(c2 + 1, c3 - c2 - 1)));
  }
  REQUIRE(losses.size() == 60);
  const double head = std::accumulate(losses.begin(), losses.begin() + 10, 0.0) / 10.0;
  const double tail = std::accumulate(losses.end() - 10, losses.end(), 0.0) / 10.0;
  CHECK(tail < head);

  // bitwise replay of the log and final checkpoint
  const std::string dir2 = temp_dir("train_short_2");
  const TrainOutput o2 = train(c, art, theta, enc, dir2);
  CHECK(file_bytes(o1.log_path) == file_bytes(o2.log_path));
  CHECK(file_bytes(o1.last_checkpoint) == file_bytes(o2.last_checkpoint));

  // resume from the midpoint reproduces the full run bitwise
  TrainConfig half = c;
  half.total_steps = 30;
  const std::string dir3 = temp_dir("train_short_3");
  const TrainOutput oh = train(half, art, theta, enc, dir3);
  const Checkpoint mid = load_checkpoint(oh.last_checkpoint);
  const std::string dir4 = temp_dir("train_short_4");
  const TrainOutput or2 = train(c, art, theta, enc, dir4, mid.step, &mid);
  CHECK(file_bytes(o1.last_checkpoint) == file_bytes(or2.last_checkpoint));

  for (const auto& d : {dir1, dir2, dir3, dir4}) std::filesystem::remove_all(d);
}

TEST_CASE("predict_theta_r and estimate are deterministic") {
  const DatasetArtifact art = small_dataset(6);
  const GmmArtifact theta = theta_for(art, 2);
  TrainConfig c;
  c.batch_size = 3;
  c.n_lo = 4;
  c.n_hi = 8;
  c.total_steps = 5;
  c.eval_every = 0;
  c.master_seed = 2;
  const std::string dir = temp_dir("predict_det");
  const TrainOutput out = train(c, art, theta, small_encoder(art.T, 2), dir);
  const Checkpoint ckpt = load_checkpoint(out.last_checkpoint);

  std::vector<EcpSample> shots;
  for (int i = 0; i < 4; ++i) shots.push_back(art.test.domains[0].samples[i]);

  const GmmArtifact e1 = estimate(ckpt, shots);
  const GmmArtifact e2 = estimate(ckpt, shots);
  CHECK((e1.gmm.means.array() == e2.gmm.means.array()).all());
  CHECK((e1.gmm.sigmas.array() == e2.gmm.sigmas.array()).all());
  CHECK(e1.space == Space::scaled);
  CHECK((e1.gmm.sigmas.array() >= kSigmaFloor).all());
  std::filesystem::remove_all(dir);
}

TEST_CASE("gmm artifact round trip is byte exact") {
  GmmArtifact g;
  g.gmm.J = 2;
  g.gmm.T = 3;
  g.gmm.weights = fixed_weights(2);
  g.gmm.means = Eigen::MatrixXd::Random(2, 3);
  g.gmm.sigmas = Eigen::MatrixXd::Random(2, 3).cwiseAbs().array() + 0.1;
  g.scaler = {2.5, 3.0};
  g.space = Space::scaled;

  const std::string dir = temp_dir("gmm_artifact");
  const std::string p1 = dir + "/a.json";
  const std::string p2 = dir + "/b.json";
  save_gmm_artifact(p1, g);
  const GmmArtifact back = load_gmm_artifact(p1);
  CHECK((back.gmm.means.array() == g.gmm.means.array()).all());
  CHECK((back.gmm.sigmas.array() == g.gmm.sigmas.array()).all());
  CHECK(back.scaler.scale == 2.5);
  save_gmm_artifact(p2, back);
  CHECK(file_bytes(p1) == file_bytes(p2));
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset artifact round trip preserves data and truths") {
  SynthConfig cfg;
  cfg.n_domains = 3;
  cfg.T = 5;
  cfg.samples_per_domain = 10;
  cfg.master_seed = 8;
  const SynthResult r = gen_collection(cfg);

  DatasetArtifact art;
  art.T = 5;
  art.window = 10;
  art.seed = 8;
  art.synthetic = true;
  art.source = r.collection;
  art.scaler = fit_scaler(art.source);
  for (std::size_t i = 0; i < r.truths.size(); ++i)
    art.truths[art.source.domains[i].domain_id] = r.truths[i];

  const std::string dir = temp_dir("dataset_artifact");
  save_dataset_artifact(dir, art);
  const DatasetArtifact back = load_dataset_artifact(dir);
  CHECK(back.T == 5);
  CHECK(back.scaler.scale == art.scaler.scale);
  CHECK(back.synthetic);
  REQUIRE(back.source.domains.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& a = art.source.domains[i];
    const auto& b = back.source.domains[i];
    CHECK(a.domain_id == b.domain_id);
    REQUIRE(a.samples.size() == b.samples.size());
    for (std::size_t k = 0; k < a.samples.size(); ++k) {
      CHECK(a.samples[k].day_of_year == b.samples[k].day_of_year);
      CHECK(a.samples[k].values == b.samples[k].values);  // %.17g is lossless
    }
    const auto& ta = art.truths.at(a.domain_id);
    const auto& tb = back.truths.at(a.domain_id);
    CHECK((ta.means.array() == tb.means.array()).all());
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint round trip is bitwise stable") {
  const EncoderConfig enc = small_encoder(6, 2);
  Checkpoint ckpt;
  ckpt.model = init_model(enc, 21);
  ckpt.theta_o.J = 2;
  ckpt.theta_o.T = 6;
  ckpt.theta_o.weights = fixed_weights(2);
  ckpt.theta_o.means = Eigen::MatrixXd::Random(2, 6);
  ckpt.theta_o.sigmas = Eigen::MatrixXd::Random(2, 6).cwiseAbs().array() + 0.1;
  ckpt.scaler = {1.5, 3.0};
  ckpt.step = 42;
  ckpt.master_seed = 7;
  ckpt.adam_t = 42;
  for (const auto& [name, arr] : ckpt.model.params) {
    Eigen::ArrayXd m = 0.01 * Eigen::ArrayXd::Random(arr.size());
    Eigen::ArrayXd v = 0.01 * Eigen::ArrayXd::Random(arr.size()).abs();
    quantize_f32(m);
    quantize_f32(v);
    ckpt.adam_m[name] = m;
    ckpt.adam_v[name] = v;
  }

  const std::string dir = temp_dir("ckpt_roundtrip");
  const std::string p1 = dir + "/a.bin";
  const std::string p2 = dir + "/b.bin";
  save_checkpoint(p1, ckpt);
  const Checkpoint back = load_checkpoint(p1);
  CHECK(back.step == 42);
  CHECK(back.master_seed == 7);
  CHECK(back.adam_t == 42);
  for (const auto& [name, arr] : ckpt.model.params)
    CHECK((arr == back.model.params.at(name)).all());
  for (const auto& [name, arr] : ckpt.adam_m)
    CHECK((arr == back.adam_m.at(name)).all());
  save_checkpoint(p2, back);
  CHECK(file_bytes(p1) == file_bytes(p2));
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.n_lo = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = TrainConfig{};
  c.lr_min = 1e-2;  // above lr_max
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
}
