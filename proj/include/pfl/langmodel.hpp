#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>

namespace pfl {

struct ModelConfig {
  int vocab_size = 2000;
  int embed_dim = 64;
  int hidden_dim = 128;
  int seq_len = 10;
  int pad_id = -1;  // excluded from loss; -1 disables masking
  int bos_id = -1;  // input-only: never a loss target

  void validate() const;
};

/// Closed-form parameter count:
///   V*E + 4*(H*(E+H) + H) + H*V + V
int64_t param_count(const ModelConfig& cfg);

/// Single-layer word-level LSTM LM held as one flat vector with named views.
/// Layout (column-major blocks, in order):
///   embedding   E x V
///   w_ih        4H x E   gate order: input, forget, cell, output
///   w_hh        4H x H
///   b           4H
///   w_out       V x H
///   b_out       V
struct ModelParams {
  ModelConfig cfg;
  Eigen::VectorXd flat;

  using MatMap = Eigen::Map<Eigen::MatrixXd>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using CMatMap = Eigen::Map<const Eigen::MatrixXd>;
  using CVecMap = Eigen::Map<const Eigen::VectorXd>;

  MatMap embedding();
  MatMap w_ih();
  MatMap w_hh();
  VecMap b();
  MatMap w_out();
  VecMap b_out();
  CMatMap embedding() const;
  CMatMap w_ih() const;
  CMatMap w_hh() const;
  CVecMap b() const;
  CMatMap w_out() const;
  CVecMap b_out() const;
};

/// Gradient w.r.t. ModelParams, same flat layout.
struct Gradients {
  Eigen::VectorXd flat;
};

struct LossAndGrad {
  double loss = 0;
  Gradients grad;
};

/// Uniform(-s, s) init with s = 1/sqrt(hidden_dim); forget-gate bias set
/// to 1. Deterministic by seed.
ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

/// Weighted mean next-token NLL in nats per non-masked target token:
///   sum_x w_x * NLL(x) / sum_x w_x * (valid target count of x)
/// batch is seq_len x B token ids; targets that are PAD or BOS are masked.
double forward_nll(const ModelParams& params, const Eigen::MatrixXi& batch,
                   const Eigen::VectorXd& weights);

/// Exact reverse-mode gradient of forward_nll.
LossAndGrad grad(const ModelParams& params, const Eigen::MatrixXi& batch,
                 const Eigen::VectorXd& weights);

/// exp(mean per-token NLL) over non-masked targets.
double perplexity(const ModelParams& params, const Eigen::MatrixXi& data);

/// Binary checkpoint: magic "PFLM", version, config, flat doubles
/// (little-endian). Stable across runs.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace pfl
