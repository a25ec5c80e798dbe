#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fewshot/common.hpp"
#include "fewshot/data_model.hpp"
#include "fewshot/diffable.hpp"
#include "fewshot/gmm.hpp"

namespace fewshot {

enum class SigmaShiftSpace { additive_floored, log_additive };

struct EncoderConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int T = 24;
  int J = 6;
  int n_max = 25;
  double sigma_floor = kSigmaFloor;
  SigmaShiftSpace sigma_shift_space = SigmaShiftSpace::additive_floored;

  int seq_len() const { return n_max + 2 * J; }
  void validate() const;
};

enum class TokenKind : char { sample = 0, mu = 1, sigma = 2, pad = 3 };

// Raw, parameter-free inputs the token block is built from.
struct TokenInputs {
  Eigen::MatrixXd shots;  // n x T, scaled units
  std::vector<int> date_ids;
  Eigen::MatrixXd mu_e;     // J x T
  Eigen::MatrixXd sigma_e;  // J x T
};

struct TokenSequence {
  Eigen::MatrixXd tokens;  // seq_len x d_model, computed embeddings
  std::vector<TokenKind> kind;
  std::vector<bool> attn_mask;  // false for pads
  std::vector<int> date_ids;    // per sample token
  std::vector<int> component_ids;
  TokenInputs inputs;
};

struct ShiftVector {
  Eigen::MatrixXd d_mu;     // J x T
  Eigen::MatrixXd d_sigma;  // J x T
};

// Named parameter store; std::map keeps iteration order deterministic.
struct EncoderModel {
  EncoderConfig config;
  std::map<std::string, Eigen::ArrayXd> params;           // flat row-major
  std::map<std::string, std::pair<int, int>> shapes;

  Eigen::ArrayXd& at(const std::string& name);
  const Eigen::ArrayXd& at(const std::string& name) const;
};

std::size_t param_count(const EncoderConfig& config);
EncoderModel init_model(const EncoderConfig& config, std::uint64_t seed);

// Rounds every parameter to its float32 value so checkpoints are lossless.
void quantize_f32(Eigen::ArrayXd& a);

TokenSequence tokenize(const EncoderModel& model, const Eigen::MatrixXd& shots_scaled,
                       const std::vector<int>& date_ids, const SphericalGmm& theta_e);
TokenSequence tokenize(const EncoderModel& model, const ShotSet& shots_scaled,
                       const SphericalGmm& theta_e);

ShiftVector encode(const EncoderModel& model, const TokenSequence& tokens);

SphericalGmm apply_shift(const SphericalGmm& theta_e, const ShiftVector& shift,
                         const EncoderConfig& config);

// --- graph-building pieces shared by inference and training ---

struct ParamNodes {
  std::map<std::string, diff::Ptr> nodes;
  const diff::Ptr& at(const std::string& name) const;
};

ParamNodes make_param_nodes(diff::Tape& tape, const EncoderModel& model,
                            bool requires_grad);

// Additive attention mask, 1 x seq_len: 0 for live tokens, -1e30 for pads.
Eigen::ArrayXd attention_mask(const EncoderConfig& config, int n_shots);

diff::Ptr build_tokens(diff::Tape& tape, const ParamNodes& params,
                       const TokenInputs& inputs, const EncoderConfig& config);

struct ShiftNodes {
  diff::Ptr d_mu;
  diff::Ptr d_sigma;
};

ShiftNodes encode_graph(diff::Tape& tape, const ParamNodes& params, diff::Ptr tokens,
                        const Eigen::ArrayXd& mask, const EncoderConfig& config);

// theta_hat nodes after the shift, ready for the nll graph.
struct GmmNodes {
  diff::Ptr means;   // J x T
  diff::Ptr sigmas;  // J x T
};

GmmNodes apply_shift_graph(diff::Tape& tape, const SphericalGmm& theta_e,
                           const ShiftNodes& shift, const EncoderConfig& config);

// Mixture nll of a fixed sample matrix under graph-valued parameters.
diff::Ptr nll_graph(diff::Tape& tape, const GmmNodes& gmm, const Eigen::VectorXd& weights,
                    const Eigen::MatrixXd& samples);

}  // namespace fewshot
