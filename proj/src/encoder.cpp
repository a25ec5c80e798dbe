#include "fewshot/encoder.hpp"

#include <cmath>
#include <numbers>

#include "fewshot/rng.hpp"

namespace fewshot {

namespace {
constexpr int kDateVocab = 366;
constexpr int kKindVocab = 4;
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::ArrayXd uniform_init(Rng& rng, int fan_in, int fan_out, Eigen::Index size) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Eigen::ArrayXd a(size);
  for (Eigen::Index i = 0; i < size; ++i) a(i) = rng.uniform(-bound, bound);
  return a;
}

Eigen::ArrayXd normal_init(Rng& rng, double std_dev, Eigen::Index size) {
  Eigen::ArrayXd a(size);
  for (Eigen::Index i = 0; i < size; ++i) a(i) = std_dev * rng.normal();
  return a;
}

Eigen::MatrixXd node_to_matrix(const diff::Ptr& n) {
  return Eigen::MatrixXd(n->mat());
}

}  // namespace

void EncoderConfig::validate() const {
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
  if (n_max < 1) throw UsageError("n_max must be >= 1");
  if (d_model < 1 || n_layers < 1 || d_ff < 1 || T < 1 || J < 1)
    throw UsageError("invalid encoder config");
}

Eigen::ArrayXd& EncoderModel::at(const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

const Eigen::ArrayXd& EncoderModel::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

std::size_t param_count(const EncoderConfig& c) {
  const std::size_t D = c.d_model, F = c.d_ff, T = c.T, J = c.J, L = c.n_layers;
  const std::size_t projections = 3 * (T * D + D);
  const std::size_t tables = (kDateVocab + J + kKindVocab) * D;
  const std::size_t per_layer = 4 * D * D + 2 * D + 2 * D * F + F + D;
  const std::size_t heads = 2 * (D * T + T);
  return projections + tables + L * per_layer + heads;
}

void quantize_f32(Eigen::ArrayXd& a) {
  for (Eigen::Index i = 0; i < a.size(); ++i)
    a(i) = static_cast<double>(static_cast<float>(a(i)));
}

EncoderModel init_model(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderModel m;
  m.config = config;
  const int D = config.d_model, F = config.d_ff, T = config.T, J = config.J;
  Rng r(mix_seed(seed, 0xe0c0de));

  auto put = [&](const std::string& name, int rows, int cols, Eigen::ArrayXd v) {
    m.shapes[name] = {rows, cols};
    m.params[name] = std::move(v);
  };

  put("proj_sample.w", T, D, uniform_init(r, T, D, static_cast<Eigen::Index>(T) * D));
  put("proj_sample.b", 1, D, Eigen::ArrayXd::Zero(D));
  put("proj_mu.w", T, D, uniform_init(r, T, D, static_cast<Eigen::Index>(T) * D));
  put("proj_mu.b", 1, D, Eigen::ArrayXd::Zero(D));
  put("proj_sigma.w", T, D, uniform_init(r, T, D, static_cast<Eigen::Index>(T) * D));
  put("proj_sigma.b", 1, D, Eigen::ArrayXd::Zero(D));

  put("emb.date", kDateVocab, D, normal_init(r, 0.02, static_cast<Eigen::Index>(kDateVocab) * D));
  put("emb.comp", J, D, normal_init(r, 0.02, static_cast<Eigen::Index>(J) * D));
  put("emb.kind", kKindVocab, D, normal_init(r, 0.02, static_cast<Eigen::Index>(kKindVocab) * D));

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    put(p + "attn_norm.gain", 1, D, Eigen::ArrayXd::Ones(D));
    for (const char* w : {"wq", "wk", "wv", "wo"})
      put(p + w, D, D, uniform_init(r, D, D, static_cast<Eigen::Index>(D) * D));
    put(p + "ffn_norm.gain", 1, D, Eigen::ArrayXd::Ones(D));
    put(p + "ffn.w1", D, F, uniform_init(r, D, F, static_cast<Eigen::Index>(D) * F));
    put(p + "ffn.b1", 1, F, Eigen::ArrayXd::Zero(F));
    put(p + "ffn.w2", F, D, uniform_init(r, F, D, static_cast<Eigen::Index>(F) * D));
    put(p + "ffn.b2", 1, D, Eigen::ArrayXd::Zero(D));
  }

  // Zero heads: the initial prediction is the identity shift.
  put("head_mu.w", D, T, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(D) * T));
  put("head_mu.b", 1, T, Eigen::ArrayXd::Zero(T));
  put("head_sigma.w", D, T, Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(D) * T));
  put("head_sigma.b", 1, T, Eigen::ArrayXd::Zero(T));

  for (auto& [name, v] : m.params) quantize_f32(v);
  return m;
}

const diff::Ptr& ParamNodes::at(const std::string& name) const {
  auto it = nodes.find(name);
  if (it == nodes.end()) throw UsageError("unknown parameter node: " + name);
  return it->second;
}

ParamNodes make_param_nodes(diff::Tape& tape, const EncoderModel& model,
                            bool requires_grad) {
  ParamNodes out;
  for (const auto& [name, v] : model.params) {
    const auto [rows, cols] = model.shapes.at(name);
    out.nodes.emplace(name, tape.leaf(rows, cols, v, requires_grad));
  }
  return out;
}

Eigen::ArrayXd attention_mask(const EncoderConfig& config, int n_shots) {
  Eigen::ArrayXd mask = Eigen::ArrayXd::Zero(config.seq_len());
  for (int i = n_shots; i < config.n_max; ++i) mask(i) = -1e30;
  return mask;
}

diff::Ptr build_tokens(diff::Tape& tape, const ParamNodes& params,
                       const TokenInputs& inputs, const EncoderConfig& config) {
  const int n = static_cast<int>(inputs.shots.rows());
  if (n > config.n_max) throw UsageError("tokenize: more shots than n_max");
  if (n < 1) throw UsageError("tokenize: need at least one shot");
  if (inputs.shots.cols() != config.T || inputs.mu_e.rows() != config.J ||
      inputs.mu_e.cols() != config.T)
    throw UsageError("tokenize: shape mismatch with config");
  for (int id : inputs.date_ids)
    if (id < 1 || id > kDateVocab) throw UsageError("tokenize: day_of_year out of range");

  const auto& kind = params.at("emb.kind");
  auto kind_row = [&](TokenKind k) {
    return tape.slice_rows(kind, static_cast<int>(k), static_cast<int>(k) + 1);
  };

  std::vector<int> zero_based_dates;
  zero_based_dates.reserve(inputs.date_ids.size());
  for (int id : inputs.date_ids) zero_based_dates.push_back(id - 1);

  auto sample_block = tape.add(
      tape.add(tape.matmul(tape.constant(inputs.shots), params.at("proj_sample.w")),
               tape.broadcast_rows(params.at("proj_sample.b"), n)),
      tape.add(tape.embedding_lookup(params.at("emb.date"), zero_based_dates),
               tape.broadcast_rows(kind_row(TokenKind::sample), n)));

  auto mu_block = tape.add(
      tape.add(tape.matmul(tape.constant(inputs.mu_e), params.at("proj_mu.w")),
               tape.broadcast_rows(params.at("proj_mu.b"), config.J)),
      tape.add(params.at("emb.comp"),
               tape.broadcast_rows(kind_row(TokenKind::mu), config.J)));

  auto sigma_block = tape.add(
      tape.add(tape.matmul(tape.constant(inputs.sigma_e), params.at("proj_sigma.w")),
               tape.broadcast_rows(params.at("proj_sigma.b"), config.J)),
      tape.add(params.at("emb.comp"),
               tape.broadcast_rows(kind_row(TokenKind::sigma), config.J)));

  std::vector<diff::Ptr> blocks;
  blocks.push_back(sample_block);
  if (n < config.n_max)
    blocks.push_back(tape.broadcast_rows(kind_row(TokenKind::pad), config.n_max - n));
  blocks.push_back(mu_block);
  blocks.push_back(sigma_block);
  return tape.concat_rows(blocks);
}

ShiftNodes encode_graph(diff::Tape& tape, const ParamNodes& params, diff::Ptr x,
                        const Eigen::ArrayXd& mask, const EncoderConfig& config) {
  const int S = config.seq_len();
  if (x->rows != S || x->cols != config.d_model)
    throw UsageError("encode: token matrix shape mismatch");
  const int dh = config.d_model / config.n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto mask_node = tape.leaf(1, S, mask, false);

  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    auto h = tape.rms_norm(x, params.at(p + "attn_norm.gain"));
    auto q = tape.matmul(h, params.at(p + "wq"));
    auto k = tape.matmul(h, params.at(p + "wk"));
    auto v = tape.matmul(h, params.at(p + "wv"));
    std::vector<diff::Ptr> head_outs;
    for (int hd = 0; hd < config.n_heads; ++hd) {
      auto qh = tape.slice_cols(q, hd * dh, (hd + 1) * dh);
      auto kh = tape.slice_cols(k, hd * dh, (hd + 1) * dh);
      auto vh = tape.slice_cols(v, hd * dh, (hd + 1) * dh);
      auto scores = tape.scalar_mul(tape.matmul_nt(qh, kh), scale);
      auto probs = tape.softmax_masked(scores, mask_node);
      head_outs.push_back(tape.matmul(probs, vh));
    }
    x = tape.add(x, tape.matmul(tape.concat_cols(head_outs), params.at(p + "wo")));

    auto f = tape.rms_norm(x, params.at(p + "ffn_norm.gain"));
    auto hidden = tape.gelu(tape.add(tape.matmul(f, params.at(p + "ffn.w1")),
                                     tape.broadcast_rows(params.at(p + "ffn.b1"), S)));
    x = tape.add(x, tape.add(tape.matmul(hidden, params.at(p + "ffn.w2")),
                             tape.broadcast_rows(params.at(p + "ffn.b2"), S)));
  }

  auto mu_rows = tape.slice_rows(x, config.n_max, config.n_max + config.J);
  auto sigma_rows = tape.slice_rows(x, config.n_max + config.J, config.n_max + 2 * config.J);
  ShiftNodes out;
  out.d_mu = tape.add(tape.matmul(mu_rows, params.at("head_mu.w")),
                      tape.broadcast_rows(params.at("head_mu.b"), config.J));
  out.d_sigma = tape.add(tape.matmul(sigma_rows, params.at("head_sigma.w")),
                         tape.broadcast_rows(params.at("head_sigma.b"), config.J));
  return out;
}

GmmNodes apply_shift_graph(diff::Tape& tape, const SphericalGmm& theta_e,
                           const ShiftNodes& shift, const EncoderConfig& config) {
  GmmNodes out;
  out.means = tape.add(tape.constant(theta_e.means), shift.d_mu);
  if (config.sigma_shift_space == SigmaShiftSpace::additive_floored) {
    out.sigmas = tape.clamp_min(tape.add(tape.constant(theta_e.sigmas), shift.d_sigma),
                                config.sigma_floor);
  } else {
    Eigen::MatrixXd log_sigma = theta_e.sigmas.array().log();
    out.sigmas = tape.clamp_min(
        tape.exp_(tape.add(tape.constant(log_sigma), shift.d_sigma)), config.sigma_floor);
  }
  return out;
}

diff::Ptr nll_graph(diff::Tape& tape, const GmmNodes& gmm, const Eigen::VectorXd& weights,
                    const Eigen::MatrixXd& samples) {
  const int J = static_cast<int>(weights.size());
  const Eigen::Index N = samples.rows();
  const int T = static_cast<int>(samples.cols());
  auto x = tape.constant(samples);

  std::vector<diff::Ptr> log_probs;  // each N x 1
  for (int j = 0; j < J; ++j) {
    auto mu_row = tape.slice_rows(gmm.means, j, j + 1);
    auto sigma_row = tape.slice_rows(gmm.sigmas, j, j + 1);
    auto z = tape.div(tape.sub(x, tape.broadcast_rows(mu_row, N)),
                      tape.broadcast_rows(sigma_row, N));
    auto quad = tape.rowwise_sum(tape.mul(z, z));  // N x 1
    auto log_det = tape.reduce_sum(tape.log_(sigma_row));
    auto lp = tape.sub(tape.scalar_mul(quad, -0.5),
                       tape.broadcast_rows(log_det, N));
    log_probs.push_back(
        tape.scalar_add(lp, std::log(weights(j)) - 0.5 * T * kLog2Pi));
  }

  // log-sum-exp over components with a detached per-row max
  Eigen::ArrayXd row_max = log_probs[0]->value;
  for (int j = 1; j < J; ++j) row_max = row_max.max(log_probs[j]->value);
  auto max_node = tape.leaf(N, 1, row_max, false);

  diff::Ptr acc = tape.exp_(tape.sub(log_probs[0], max_node));
  for (int j = 1; j < J; ++j)
    acc = tape.add(acc, tape.exp_(tape.sub(log_probs[j], max_node)));
  auto ll = tape.add(tape.log_(acc), max_node);
  return tape.scalar_mul(tape.reduce_sum(ll), -1.0);
}

TokenSequence tokenize(const EncoderModel& model, const Eigen::MatrixXd& shots_scaled,
                       const std::vector<int>& date_ids, const SphericalGmm& theta_e) {
  const EncoderConfig& c = model.config;
  if (theta_e.T != c.T || theta_e.J != c.J)
    throw UsageError("tokenize: theta_e shape does not match config");
  if (static_cast<int>(date_ids.size()) != shots_scaled.rows())
    throw UsageError("tokenize: one date id per shot required");

  TokenSequence ts;
  ts.inputs.shots = shots_scaled;
  ts.inputs.date_ids = date_ids;
  ts.inputs.mu_e = theta_e.means;
  ts.inputs.sigma_e = theta_e.sigmas;

  diff::Tape tape;
  auto params = make_param_nodes(tape, model, false);
  auto tokens = build_tokens(tape, params, ts.inputs, c);
  ts.tokens = node_to_matrix(tokens);

  const int n = static_cast<int>(shots_scaled.rows());
  ts.kind.resize(c.seq_len());
  ts.attn_mask.resize(c.seq_len());
  ts.component_ids.assign(c.seq_len(), 0);
  for (int i = 0; i < c.seq_len(); ++i) {
    if (i < n) ts.kind[i] = TokenKind::sample;
    else if (i < c.n_max) ts.kind[i] = TokenKind::pad;
    else if (i < c.n_max + c.J) { ts.kind[i] = TokenKind::mu; ts.component_ids[i] = i - c.n_max + 1; }
    else { ts.kind[i] = TokenKind::sigma; ts.component_ids[i] = i - c.n_max - c.J + 1; }
    ts.attn_mask[i] = !(ts.kind[i] == TokenKind::pad);
  }
  ts.date_ids = date_ids;
  return ts;
}

TokenSequence tokenize(const EncoderModel& model, const ShotSet& shots_scaled,
                       const SphericalGmm& theta_e) {
  std::vector<int> dates;
  dates.reserve(shots_scaled.shots.size());
  for (const auto& s : shots_scaled.shots) dates.push_back(s.day_of_year);
  return tokenize(model, samples_matrix(shots_scaled.shots), dates, theta_e);
}

ShiftVector encode(const EncoderModel& model, const TokenSequence& ts) {
  const EncoderConfig& c = model.config;
  diff::Tape tape;
  auto params = make_param_nodes(tape, model, false);
  auto tokens = tape.constant(ts.tokens);
  Eigen::ArrayXd mask(c.seq_len());
  for (int i = 0; i < c.seq_len(); ++i) mask(i) = ts.attn_mask[i] ? 0.0 : -1e30;
  auto shift = encode_graph(tape, params, tokens, mask, c);
  return {node_to_matrix(shift.d_mu), node_to_matrix(shift.d_sigma)};
}

SphericalGmm apply_shift(const SphericalGmm& theta_e, const ShiftVector& shift,
                         const EncoderConfig& config) {
  if (shift.d_mu.rows() != theta_e.J || shift.d_mu.cols() != theta_e.T)
    throw UsageError("apply_shift: shape mismatch");
  SphericalGmm out = theta_e;
  out.means = theta_e.means + shift.d_mu;
  if (config.sigma_shift_space == SigmaShiftSpace::additive_floored) {
    out.sigmas = (theta_e.sigmas + shift.d_sigma).array().max(config.sigma_floor);
  } else {
    out.sigmas =
        (theta_e.sigmas.array().log() + shift.d_sigma.array()).exp().max(config.sigma_floor);
  }
  return out;
}

}  // namespace fewshot
