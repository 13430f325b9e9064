#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hitl/env.hpp"

namespace hitl::nn {

/// Column-per-sample: rows are features, columns are batch entries.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Identity, Relu, Mish };

struct MlpSpec {
  std::vector<int> sizes;                  // input, hidden..., output
  Activation hidden = Activation::Relu;    // applied to every layer but the last
  double dropout = 0.0;                    // on hidden activations, training only
  double input_noise = 0.0;                // gaussian stddev on inputs, training only
};

/// Dense feed-forward network over a single flat parameter vector. Layer l
/// owns W_l (out x in, column-major) followed by b_l.
class Mlp {
 public:
  struct Layer {
    int in = 0;
    int out = 0;
    std::size_t offset = 0;
  };

  /// Cached activations for one training forward pass.
  struct Tape {
    std::vector<Matrix> inputs;  // input seen by each layer (after noise/dropout)
    std::vector<Matrix> pre;     // pre-activations per layer
    std::vector<Matrix> masks;   // dropout masks on hidden outputs (empty if none)
  };

  Mlp() = default;
  /// He-uniform weights, zero biases.
  Mlp(MlpSpec spec, std::uint64_t seed);

  const MlpSpec& spec() const { return spec_; }
  int input_dim() const { return spec_.sizes.front(); }
  int output_dim() const { return spec_.sizes.back(); }
  std::size_t num_layers() const { return layers_.size(); }
  const Layer& layer(std::size_t l) const { return layers_[l]; }
  std::size_t num_params() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  Eigen::Map<Matrix> weight(std::size_t l);
  Eigen::Map<const Matrix> weight(std::size_t l) const;
  Eigen::Map<Vector> bias(std::size_t l);
  Eigen::Map<const Vector> bias(std::size_t l) const;

  /// Inference pass: no noise, no dropout.
  Matrix forward(const Matrix& x) const;
  /// Training pass; noise/dropout only when `rng` is non-null.
  Matrix forward(const Matrix& x, Tape& tape, std::mt19937_64* rng = nullptr) const;
  /// Accumulates dLoss/dParams into `grad` given dLoss/dOutput.
  void backward(const Tape& tape, const Matrix& d_out, std::span<double> grad) const;

 private:
  MlpSpec spec_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

/// Dueling Q-network: shared trunk, scalar value head and per-action advantage
/// head, combined as Q = V + (A - mean A). The two heads are stored as one
/// output layer: row 0 is V, rows 1..actions are A.
class DuelingNet {
 public:
  struct Heads {
    Eigen::RowVectorXd value;
    Matrix advantage;
  };

  DuelingNet() = default;
  explicit DuelingNet(std::uint64_t seed, int obs_dim = static_cast<int>(kObsDim),
                      std::vector<int> hidden = {128, 128}, int actions = kNumActions);

  int obs_dim() const { return body_.input_dim(); }
  int num_actions() const { return body_.output_dim() - 1; }
  const std::vector<int>& layer_sizes() const { return body_.spec().sizes; }

  Mlp& body() { return body_; }
  const Mlp& body() const { return body_; }
  std::span<double> params() { return body_.params(); }
  std::span<const double> params() const { return body_.params(); }
  std::size_t num_params() const { return body_.num_params(); }

  /// Q-values, actions x batch. Throws ShapeError on input-dimension mismatch.
  Matrix forward(const Matrix& obs) const;
  Matrix forward(const Matrix& obs, Mlp::Tape& tape) const;
  Heads heads(const Matrix& obs) const;
  /// Accumulates parameter gradients given dLoss/dQ (actions x batch).
  void backward(const Mlp::Tape& tape, const Matrix& d_q, std::span<double> grad) const;

  Eigen::VectorXd q_values(const Observation& obs) const;

 private:
  Mlp body_;
};

Matrix combine_dueling(const Matrix& heads);

/// Packs observations column-wise.
Matrix to_matrix(std::span<const Observation> batch);
Matrix to_matrix(const Observation& obs);

/// Lowest index among maximal entries.
int argmax(const Eigen::Ref<const Eigen::VectorXd>& values);

struct LossResult {
  double loss = 0.0;
  std::vector<double> gradients;
};

/// Importance-weighted squared TD loss, mean over the batch:
/// L = (1/B) sum_b w_b (target_b - Q(s_b, a_b))^2.
LossResult loss_and_gradients(const DuelingNet& net, const Matrix& obs, std::span<const int> actions,
                              std::span<const double> targets, std::span<const double> is_weights);

struct AdamConfig {
  double lr = 0.00025;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool nesterov = false;  // Nadam variant
};

struct AdamState {
  AdamConfig cfg;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig config) : cfg(config), m(n, 0.0), v(n, 0.0) {}
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state);

/// target <- tau * online + (1 - tau) * target. Throws InvalidInput for tau outside [0,1].
void soft_update(std::span<double> target, std::span<const double> online, double tau);

/// Two online dueling nets with their target copies and optimizer states.
struct DuelingNetPair {
  DuelingNet q1;
  DuelingNet q2;
  DuelingNet target1;
  DuelingNet target2;
  AdamState adam1;
  AdamState adam2;

  DuelingNetPair() = default;
  DuelingNetPair(std::uint64_t seed, AdamConfig adam);
};

/// Batch used by the finite-difference harness.
struct FdBatch {
  Matrix obs;
  std::vector<int> actions;
  std::vector<double> targets;
  std::vector<double> weights;
};

FdBatch random_fd_batch(const DuelingNet& net, std::size_t batch, std::uint64_t seed);

struct FdCheckOptions {
  std::size_t n_probes = 100;
  double h = 1e-4;
  std::uint64_t seed = 11;
  /// Test hook applied to the analytic gradient before comparison.
  std::function<void(std::span<double>)> corrupt_gradient;
};

/// Worst relative error between analytic and central-difference gradients of
/// the weighted TD loss over randomly probed parameters. Probes cycle through
/// trunk layers, the value head and the advantage head; probes whose +/-h
/// perturbation flips a rectifier are redrawn.
double finite_diff_check(const DuelingNet& net, const FdBatch& batch, const FdCheckOptions& opts);
double finite_diff_check(const DuelingNet& net, std::size_t n_probes, std::uint64_t seed = 11);

}  // namespace hitl::nn
