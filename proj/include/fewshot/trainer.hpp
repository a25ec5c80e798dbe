#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fewshot/artifact.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/encoder.hpp"
#include "fewshot/gmm.hpp"

namespace fewshot {

// One meta-training unit: a domain, its shots, the early-stopped EM
// parameters and the complete (scaled) domain data.
struct Episode {
  std::string domain_id;
  Eigen::MatrixXd shots;  // n x T, scaled
  std::vector<int> date_ids;
  SphericalGmm theta_e;
  const Eigen::MatrixXd* full_domain = nullptr;  // owned by the training set
};

struct TrainConfig {
  int batch_size = 128;
  int n_lo = 4;
  int n_hi = 25;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  int cycle_length = 2000;
  int total_steps = 5000;
  std::uint64_t master_seed = 0;
  int eval_every = 500;
  int val_domains = 32;  // validation domains scored per evaluation
  int workers = 1;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

double cyclical_lr(int step, const TrainConfig& config);

// Scaled, matrix-backed view of a domain collection.
struct TrainingSet {
  std::vector<std::string> domain_ids;
  std::vector<std::vector<int>> date_ids;       // per domain, aligned with rows
  std::vector<Eigen::MatrixXd> data;            // scaled, one matrix per domain
};

TrainingSet make_training_set(const DomainCollection& collection, const Scaler& scaler);

std::vector<Episode> make_episode(const TrainingSet& source, const SphericalGmm& theta_o,
                                  const TrainConfig& config, const EncoderConfig& enc,
                                  int step);

struct AdamState {
  std::map<std::string, Eigen::ArrayXd> m;
  std::map<std::string, Eigen::ArrayXd> v;
  std::int64_t t = 0;
};

struct StepResult {
  double loss = 0.0;
  bool applied = false;  // false when a non-finite loss aborted the step
};

// Mean per-sample nll over the batch; gradients clipped at global norm 1
// and applied with Adam. Parameters stay on the float32 grid.
StepResult train_step(EncoderModel& model, const std::vector<Episode>& batch,
                      AdamState& adam, double lr, int workers = 1);

struct TrainOutput {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log_path;
};

TrainOutput train(const TrainConfig& config, const DatasetArtifact& dataset,
                  const GmmArtifact& theta_o, const EncoderConfig& enc,
                  const std::string& out_dir, std::int64_t start_step = 0,
                  const Checkpoint* resume_from = nullptr);

// Inference: scaled shots to the predicted full-data parameters.
SphericalGmm predict_theta_r(const Checkpoint& ckpt, const Eigen::MatrixXd& shots_scaled,
                             const std::vector<int>& date_ids);

// Inference from physical-unit shots; emits a scaled-space parameter set.
GmmArtifact estimate(const Checkpoint& ckpt, const std::vector<EcpSample>& shots_physical);

}  // namespace fewshot
