#include "hitl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "hitl/error.hpp"

namespace hitl::nn {

namespace {

double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

void activate(Activation act, Matrix& z_to_a) {
  switch (act) {
    case Activation::Identity:
      break;
    case Activation::Relu:
      z_to_a = z_to_a.cwiseMax(0.0);
      break;
    case Activation::Mish:
      z_to_a = z_to_a.unaryExpr([](double x) { return x * std::tanh(softplus(x)); });
      break;
  }
}

// d act(z) / dz, elementwise, multiplied into `grad`.
void activation_backward(Activation act, const Matrix& pre, Matrix& grad) {
  switch (act) {
    case Activation::Identity:
      break;
    case Activation::Relu:
      grad = grad.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
      break;
    case Activation::Mish:
      grad = grad.cwiseProduct(pre.unaryExpr([](double x) {
        const double sp = softplus(x);
        const double t = std::tanh(sp);
        const double sig = 1.0 / (1.0 + std::exp(-x));
        return t + x * (1.0 - t * t) * sig;
      }));
      break;
  }
}

}  // namespace

Mlp::Mlp(MlpSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  if (spec_.sizes.size() < 2) throw ConfigError("Mlp needs at least input and output sizes");
  std::size_t offset = 0;
  for (std::size_t l = 0; l + 1 < spec_.sizes.size(); ++l) {
    Layer layer{spec_.sizes[l], spec_.sizes[l + 1], offset};
    if (layer.in <= 0 || layer.out <= 0) throw ConfigError("Mlp layer sizes must be positive");
    offset += static_cast<std::size_t>(layer.in) * layer.out + layer.out;
    layers_.push_back(layer);
  }
  params_.assign(offset, 0.0);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const double limit = std::sqrt(6.0 / layers_[l].in);
    std::uniform_real_distribution<double> init(-limit, limit);
    auto w = weight(l);
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = init(rng);
    }
  }
}

Eigen::Map<Matrix> Mlp::weight(std::size_t l) {
  const auto& ly = layers_[l];
  return {params_.data() + ly.offset, ly.out, ly.in};
}
Eigen::Map<const Matrix> Mlp::weight(std::size_t l) const {
  const auto& ly = layers_[l];
  return {params_.data() + ly.offset, ly.out, ly.in};
}
Eigen::Map<Vector> Mlp::bias(std::size_t l) {
  const auto& ly = layers_[l];
  return {params_.data() + ly.offset + static_cast<std::size_t>(ly.in) * ly.out, ly.out};
}
Eigen::Map<const Vector> Mlp::bias(std::size_t l) const {
  const auto& ly = layers_[l];
  return {params_.data() + ly.offset + static_cast<std::size_t>(ly.in) * ly.out, ly.out};
}

Matrix Mlp::forward(const Matrix& x) const {
  if (x.rows() != input_dim()) {
    throw ShapeError("Mlp input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(input_dim()));
  }
  Matrix a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Matrix z = weight(l) * a;
    z.colwise() += bias(l);
    if (l + 1 < layers_.size()) activate(spec_.hidden, z);
    a = std::move(z);
  }
  return a;
}

Matrix Mlp::forward(const Matrix& x, Tape& tape, std::mt19937_64* rng) const {
  if (x.rows() != input_dim()) {
    throw ShapeError("Mlp input has " + std::to_string(x.rows()) + " rows, expected " + std::to_string(input_dim()));
  }
  tape.inputs.resize(layers_.size());
  tape.pre.resize(layers_.size());
  tape.masks.assign(layers_.size(), Matrix());

  Matrix a = x;
  if (rng != nullptr && spec_.input_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, spec_.input_noise);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) += noise(*rng);
    }
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    tape.inputs[l] = a;
    Matrix z = weight(l) * a;
    z.colwise() += bias(l);
    tape.pre[l] = z;
    if (l + 1 < layers_.size()) {
      activate(spec_.hidden, z);
      if (rng != nullptr && spec_.dropout > 0.0) {
        const double keep = 1.0 - spec_.dropout;
        std::bernoulli_distribution kept(keep);
        Matrix mask(z.rows(), z.cols());
        for (Eigen::Index j = 0; j < mask.cols(); ++j) {
          for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = kept(*rng) ? 1.0 / keep : 0.0;
        }
        z = z.cwiseProduct(mask);
        tape.masks[l] = std::move(mask);
      }
    }
    a = std::move(z);
  }
  return a;
}

void Mlp::backward(const Tape& tape, const Matrix& d_out, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw ShapeError("gradient buffer size mismatch");
  Matrix delta = d_out;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    if (l + 1 < layers_.size()) activation_backward(spec_.hidden, tape.pre[l], delta);
    const auto& ly = layers_[l];
    Eigen::Map<Matrix> dw(grad.data() + ly.offset, ly.out, ly.in);
    Eigen::Map<Vector> db(grad.data() + ly.offset + static_cast<std::size_t>(ly.in) * ly.out, ly.out);
    dw.noalias() += delta * tape.inputs[l].transpose();
    db += delta.rowwise().sum();
    if (l > 0) {
      Matrix prev = weight(l).transpose() * delta;
      if (tape.masks[l - 1].size() > 0) prev = prev.cwiseProduct(tape.masks[l - 1]);
      delta = std::move(prev);
    }
  }
}

DuelingNet::DuelingNet(std::uint64_t seed, int obs_dim, std::vector<int> hidden, int actions) {
  MlpSpec spec;
  spec.sizes.push_back(obs_dim);
  for (int h : hidden) spec.sizes.push_back(h);
  spec.sizes.push_back(actions + 1);
  spec.hidden = Activation::Relu;
  body_ = Mlp(std::move(spec), seed);
}

Matrix combine_dueling(const Matrix& heads) {
  const Eigen::Index actions = heads.rows() - 1;
  const auto adv = heads.bottomRows(actions);
  const Eigen::RowVectorXd shift = heads.row(0) - adv.colwise().mean();
  Matrix q = adv;
  q.rowwise() += shift;
  return q;
}

Matrix DuelingNet::forward(const Matrix& obs) const { return combine_dueling(body_.forward(obs)); }

Matrix DuelingNet::forward(const Matrix& obs, Mlp::Tape& tape) const {
  return combine_dueling(body_.forward(obs, tape));
}

DuelingNet::Heads DuelingNet::heads(const Matrix& obs) const {
  const Matrix h = body_.forward(obs);
  return {h.row(0), h.bottomRows(h.rows() - 1)};
}

void DuelingNet::backward(const Mlp::Tape& tape, const Matrix& d_q, std::span<double> grad) const {
  const Eigen::Index actions = d_q.rows();
  Matrix d_heads(actions + 1, d_q.cols());
  d_heads.row(0) = d_q.colwise().sum();
  const Eigen::RowVectorXd mean = d_q.colwise().mean();
  d_heads.bottomRows(actions) = d_q;
  d_heads.bottomRows(actions).rowwise() -= mean;
  body_.backward(tape, d_heads, grad);
}

Eigen::VectorXd DuelingNet::q_values(const Observation& obs) const { return forward(to_matrix(obs)).col(0); }

Matrix to_matrix(std::span<const Observation> batch) {
  Matrix m(static_cast<Eigen::Index>(kObsDim), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = 0; i < kObsDim; ++i) m(i, b) = batch[b][i];
  }
  return m;
}

Matrix to_matrix(const Observation& obs) { return to_matrix(std::span<const Observation>(&obs, 1)); }

int argmax(const Eigen::Ref<const Eigen::VectorXd>& values) {
  int best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i) {
    if (values(i) > values(best)) best = static_cast<int>(i);
  }
  return best;
}

LossResult loss_and_gradients(const DuelingNet& net, const Matrix& obs, std::span<const int> actions,
                              std::span<const double> targets, std::span<const double> is_weights) {
  const auto batch = static_cast<std::size_t>(obs.cols());
  if (actions.size() != batch || targets.size() != batch || is_weights.size() != batch) {
    throw ShapeError("loss_and_gradients: batch components disagree in length");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (!std::isfinite(targets[b])) {
      std::ostringstream msg;
      msg << "non-finite TD target at batch index " << b << " (action " << actions[b] << ", weight "
          << is_weights[b] << ")";
      throw TrainingFault(msg.str());
    }
  }
  Mlp::Tape tape;
  const Matrix q = net.forward(obs, tape);
  Matrix d_q = Matrix::Zero(q.rows(), q.cols());
  LossResult out;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto col = static_cast<Eigen::Index>(b);
    const double err = targets[b] - q(actions[b], col);
    out.loss += is_weights[b] * err * err * inv_b;
    d_q(actions[b], col) = -2.0 * is_weights[b] * err * inv_b;
  }
  out.gradients.assign(net.num_params(), 0.0);
  net.backward(tape, d_q, out.gradients);
  return out;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st) {
  if (params.size() != grads.size() || st.m.size() != params.size() || st.v.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
  }
  st.t += 1;
  const auto& c = st.cfg;
  const double t = static_cast<double>(st.t);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
    double m_hat = st.m[i] / bc1;
    if (c.nesterov) m_hat = c.beta1 * m_hat + (1.0 - c.beta1) * g / bc1;
    const double v_hat = st.v[i] / bc2;
    params[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
  }
}

void soft_update(std::span<double> target, std::span<const double> online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw InvalidInput("soft_update: tau must lie in [0,1]");
  if (target.size() != online.size()) throw ShapeError("soft_update: size mismatch");
  if (tau == 1.0) {
    std::copy(online.begin(), online.end(), target.begin());
    return;
  }
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = tau * online[i] + (1.0 - tau) * target[i];
}

DuelingNetPair::DuelingNetPair(std::uint64_t seed, AdamConfig adam)
    : q1(mix_seed(seed, 101)), q2(mix_seed(seed, 202)), target1(q1), target2(q2),
      adam1(q1.num_params(), adam), adam2(q2.num_params(), adam) {}

FdBatch random_fd_batch(const DuelingNet& net, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> weight(0.1, 1.0);
  std::uniform_int_distribution<int> action(0, net.num_actions() - 1);
  FdBatch fb;
  fb.obs = Matrix(net.obs_dim(), static_cast<Eigen::Index>(batch));
  for (Eigen::Index j = 0; j < fb.obs.cols(); ++j) {
    for (Eigen::Index i = 0; i < fb.obs.rows(); ++i) fb.obs(i, j) = unit(rng);
  }
  for (std::size_t b = 0; b < batch; ++b) {
    fb.actions.push_back(action(rng));
    fb.targets.push_back(2.0 * unit(rng));
    fb.weights.push_back(weight(rng));
  }
  return fb;
}

namespace {

double weighted_loss(const DuelingNet& net, const FdBatch& fb, std::vector<Matrix>* relu_masks) {
  Mlp::Tape tape;
  const Matrix q = net.forward(fb.obs, tape);
  if (relu_masks != nullptr) {
    relu_masks->clear();
    for (std::size_t l = 0; l + 1 < tape.pre.size(); ++l) {
      relu_masks->push_back((tape.pre[l].array() > 0.0).cast<double>().matrix());
    }
  }
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(fb.actions.size());
  for (std::size_t b = 0; b < fb.actions.size(); ++b) {
    const double err = fb.targets[b] - q(fb.actions[b], static_cast<Eigen::Index>(b));
    loss += fb.weights[b] * err * err * inv_b;
  }
  return loss;
}

}  // namespace

double finite_diff_check(const DuelingNet& net, const FdBatch& fb, const FdCheckOptions& opts) {
  if (opts.n_probes == 0) throw InvalidInput("finite_diff_check: n_probes must be >= 1");
  auto analytic = loss_and_gradients(net, fb.obs, fb.actions, fb.targets, fb.weights).gradients;
  if (opts.corrupt_gradient) opts.corrupt_gradient(analytic);

  const Mlp& body = net.body();
  const std::size_t last = body.num_layers() - 1;
  const auto& out_layer = body.layer(last);
  // Probe groups: each trunk layer, value head row, advantage head rows.
  const std::size_t groups = body.num_layers() + 1;

  std::mt19937_64 rng(opts.seed);
  DuelingNet probe = net;
  double worst = 0.0;
  for (std::size_t p = 0; p < opts.n_probes; ++p) {
    const std::size_t group = p % groups;
    for (int attempt = 0; attempt < 32; ++attempt) {
      std::size_t idx = 0;
      if (group < last) {
        const auto& ly = body.layer(group);
        const std::size_t count = static_cast<std::size_t>(ly.in) * ly.out + ly.out;
        idx = ly.offset + std::uniform_int_distribution<std::size_t>(0, count - 1)(rng);
      } else {
        // Output layer: row 0 = value head, rows 1.. = advantage head.
        const bool value_head = group == last;
        const int rows = value_head ? 1 : out_layer.out - 1;
        const int row = (value_head ? 0 : 1) + std::uniform_int_distribution<int>(0, rows - 1)(rng);
        const int col = std::uniform_int_distribution<int>(0, out_layer.in)(rng);  // == in selects bias
        idx = col == out_layer.in
                  ? out_layer.offset + static_cast<std::size_t>(out_layer.in) * out_layer.out + row
                  : out_layer.offset + static_cast<std::size_t>(col) * out_layer.out + row;
      }
      const double saved = probe.params()[idx];
      std::vector<Matrix> mask_plus, mask_minus;
      probe.params()[idx] = saved + opts.h;
      const double lp = weighted_loss(probe, fb, &mask_plus);
      probe.params()[idx] = saved - opts.h;
      const double lm = weighted_loss(probe, fb, &mask_minus);
      probe.params()[idx] = saved;
      bool kink = false;
      for (std::size_t l = 0; l < mask_plus.size(); ++l) kink = kink || mask_plus[l] != mask_minus[l];
      if (kink && attempt + 1 < 32) continue;

      const double numeric = (lp - lm) / (2.0 * opts.h);
      const double a = analytic[idx];
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double diff = std::abs(a - numeric);
      const double rel = diff == 0.0 ? 0.0 : diff / scale;
      worst = std::max(worst, rel);
      break;
    }
  }
  return worst;
}

double finite_diff_check(const DuelingNet& net, std::size_t n_probes, std::uint64_t seed) {
  FdCheckOptions opts;
  opts.n_probes = n_probes;
  opts.seed = seed;
  return finite_diff_check(net, random_fd_batch(net, 16, mix_seed(seed, 1)), opts);
}

}  // namespace hitl::nn
