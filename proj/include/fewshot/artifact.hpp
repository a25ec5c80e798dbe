#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewshot/common.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/encoder.hpp"
#include "fewshot/gmm.hpp"

namespace fewshot {

inline constexpr int kArtifactFormatVersion = 1;

// A GMM parameter file: mixture + scaler + value space.
struct GmmArtifact {
  SphericalGmm gmm;
  Scaler scaler;
  Space space = Space::scaled;
};

nlohmann::json gmm_to_json(const SphericalGmm& gmm);
SphericalGmm gmm_from_json(const nlohmann::json& j);

void save_gmm_artifact(const std::string& path, const GmmArtifact& artifact);
GmmArtifact load_gmm_artifact(const std::string& path);

// Prepared-dataset directory: manifest.json plus one CSV per split
// (and truths.json for synthetic data).
struct DatasetArtifact {
  int T = 24;
  int window = 250;
  std::uint64_t seed = 0;
  Scaler scaler;
  bool synthetic = false;
  nlohmann::json counts;  // free-form ingestion statistics
  DomainCollection source;
  DomainCollection test;
  DomainCollection validation;
  std::map<std::string, SphericalGmm> truths;  // synthetic only
};

void save_dataset_artifact(const std::string& dir, const DatasetArtifact& artifact);
DatasetArtifact load_dataset_artifact(const std::string& dir);

// One split CSV (domain_id,household_id,day_of_year,v0..v{T-1}) on its own.
DomainCollection read_split_csv(const std::string& path, int T, RoleTag tag);

// Encoder checkpoint: magic + versioned JSON header + named float32 blocks.
struct Checkpoint {
  EncoderModel model;
  SphericalGmm theta_o;
  Scaler scaler;
  std::int64_t step = 0;
  std::uint64_t master_seed = 0;
  std::int64_t adam_t = 0;
  std::map<std::string, Eigen::ArrayXd> adam_m;
  std::map<std::string, Eigen::ArrayXd> adam_v;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

nlohmann::json encoder_config_to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// FNV-1a over file bytes, for run.json provenance.
std::uint64_t file_hash(const std::string& path);

}  // namespace fewshot
