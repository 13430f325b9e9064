#include "hitl/epm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "hitl/error.hpp"

namespace hitl {

void EpmConfig::validate() const {
  if (horizon == 0) throw ConfigError("epm.horizon must be >= 1");
  if (!(lr_predictive > 0.0) || !(lr_classifier > 0.0)) throw ConfigError("epm learning rates must be > 0");
  if (batch == 0) throw ConfigError("epm.batch must be > 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("epm.dropout must lie in [0, 1)");
  if (input_noise < 0.0) throw ConfigError("epm.input_noise must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("epm.threshold must lie in (0, 1)");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("epm.holdout_fraction must lie in (0, 1)");
  if (!(min_crash_share >= 0.0 && min_crash_share < 1.0)) throw ConfigError("epm.min_crash_share must lie in [0, 1)");
}

std::vector<ModelSample> samples_from_records(std::span<const EvaluativeRecord> records) {
  std::vector<ModelSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto& t = r.transition;
    out.push_back(ModelSample{t.s, t.executed_action(), t.reward, t.s_next, r.crashed});
  }
  return out;
}

namespace {

nn::MlpSpec model_spec(int in, int out, const EpmConfig& cfg) {
  nn::MlpSpec spec;
  spec.sizes.push_back(in);
  spec.sizes.insert(spec.sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  spec.sizes.push_back(out);
  spec.dropout = cfg.dropout;
  spec.input_noise = cfg.input_noise;
  return spec;
}

void write_predictive_input(const Observation& s, int action, nn::Matrix& x, Eigen::Index col) {
  for (std::size_t i = 0; i < kObsDim; ++i) x(static_cast<Eigen::Index>(i), col) = s[i];
  for (int a = 0; a < kNumActions; ++a) x(static_cast<Eigen::Index>(kObsDim) + a, col) = a == action ? 1.0 : 0.0;
}

void write_classifier_input(const Observation& s, const Observation& s_next, nn::Matrix& x, Eigen::Index col) {
  for (std::size_t i = 0; i < kObsDim; ++i) {
    x(static_cast<Eigen::Index>(i), col) = s[i];
    x(static_cast<Eigen::Index>(kObsDim + i), col) = s_next[i];
  }
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Prediction decode(const Observation& s, const nn::Matrix& out, Eigen::Index col) {
  Prediction p;
  for (std::size_t i = 0; i < kObsDim; ++i) {
    const double v = s[i] + out(static_cast<Eigen::Index>(i), col);
    p.next[i] = std::clamp(v, observation_lower(i), observation_upper(i));
  }
  p.reward = std::clamp(out(static_cast<Eigen::Index>(kObsDim), col), -1.0, 1.0);
  return p;
}

double softmax_crash(const nn::Matrix& logits, Eigen::Index col) {
  const double z0 = logits(0, col);
  const double z1 = logits(1, col);
  return 1.0 / (1.0 + std::exp(z0 - z1));
}

}  // namespace

PredictiveModel::PredictiveModel(const EpmConfig& cfg, std::uint64_t seed)
    : net_(model_spec(kInputDim, static_cast<int>(kObsDim) + 1, cfg), seed) {}

Prediction PredictiveModel::predict(const Observation& s, int action) const {
  if (!loaded()) throw ConfigError("predictive model not loaded");
  nn::Matrix x(kInputDim, 1);
  write_predictive_input(s, action, x, 0);
  return decode(s, net_.forward(x), 0);
}

CrashClassifier::CrashClassifier(const EpmConfig& cfg, std::uint64_t seed)
    : threshold(cfg.threshold), net_(model_spec(kInputDim, 2, cfg), seed) {}

double CrashClassifier::probability(const Observation& s, const Observation& s_next) const {
  if (!loaded()) throw ConfigError("crash classifier not loaded");
  nn::Matrix x(kInputDim, 1);
  write_classifier_input(s, s_next, x, 0);
  return softmax_crash(net_.forward(x), 0);
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                             std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_hold = static_cast<std::size_t>(std::round(fraction * static_cast<double>(n)));
  std::vector<std::size_t> hold(idx.end() - static_cast<std::ptrdiff_t>(n_hold), idx.end());
  idx.resize(n - n_hold);
  return {idx, hold};
}

namespace {

template <class T>
std::vector<T> gather(std::span<const T> data, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

}  // namespace

PredictiveModel train_predictive(std::span<const ModelSample> data, const EpmConfig& cfg,
                                 PredictiveMetrics* metrics) {
  cfg.validate();
  if (data.size() < 1000) {
    throw InvalidInput("predictive model needs at least 1000 transitions, got " + std::to_string(data.size()));
  }
  auto [train_idx, hold_idx] = holdout_split(data.size(), cfg.holdout_fraction, mix_seed(cfg.seed, 31));
  PredictiveModel model(cfg, mix_seed(cfg.seed, 41));
  nn::Mlp& net = model.net();
  nn::AdamState adam(net.num_params(), nn::AdamConfig{.lr = cfg.lr_predictive});
  std::mt19937_64 order_rng(mix_seed(cfg.seed, 43));
  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 47));
  std::vector<double> grad(net.num_params());
  constexpr auto kState = static_cast<Eigen::Index>(kObsDim);
  double epoch_loss = 0.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs_predictive; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), order_rng);
    epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch) {
      const std::size_t end = std::min(train_idx.size(), start + cfg.batch);
      const auto b = static_cast<Eigen::Index>(end - start);
      nn::Matrix x(PredictiveModel::kInputDim, b);
      nn::Matrix y(kState + 1, b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const ModelSample& m = data[train_idx[start + static_cast<std::size_t>(c)]];
        write_predictive_input(m.s, m.action, x, c);
        for (std::size_t i = 0; i < kObsDim; ++i) y(static_cast<Eigen::Index>(i), c) = m.s_next[i] - m.s[i];
        y(kState, c) = m.reward;
      }
      nn::Mlp::Tape tape;
      const nn::Matrix out = net.forward(x, tape, &noise_rng);
      nn::Matrix d(out.rows(), out.cols());
      double loss = 0.0;
      const double inv_state = 1.0 / static_cast<double>(kState * b);
      const double inv_reward = 1.0 / static_cast<double>(b);
      for (Eigen::Index c = 0; c < b; ++c) {
        for (Eigen::Index i = 0; i <= kState; ++i) {
          const double e = out(i, c) - y(i, c);
          const double w = i < kState ? inv_state : inv_reward;
          loss += std::abs(e) * w;
          d(i, c) = sign(e) * w;
        }
      }
      if (!std::isfinite(loss)) {
        throw TrainingFault("predictive model diverged at epoch " + std::to_string(epoch) + ", batch starting " +
                            std::to_string(start));
      }
      epoch_loss += loss;
      ++batches;
      std::fill(grad.begin(), grad.end(), 0.0);
      net.backward(tape, d, grad);
      nn::adam_step(net.params(), grad, adam);
    }
    epoch_loss /= static_cast<double>(std::max<std::size_t>(1, batches));
  }
  if (metrics != nullptr) {
    const auto hold = gather(data, hold_idx);
    *metrics = evaluate_predictive(model, hold);
    metrics->train_loss = epoch_loss;
    metrics->n_train = train_idx.size();
  }
  return model;
}

PredictiveMetrics evaluate_predictive(const PredictiveModel& model, std::span<const ModelSample> data) {
  PredictiveMetrics m;
  m.n_holdout = data.size();
  if (data.empty()) return m;
  nn::Matrix x(PredictiveModel::kInputDim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) write_predictive_input(data[i].s, data[i].action, x, static_cast<Eigen::Index>(i));
  const nn::Matrix out = model.net().forward(x);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Prediction p = decode(data[i].s, out, static_cast<Eigen::Index>(i));
    for (std::size_t k = 0; k < kObsDim; ++k) m.state_mae += std::abs(p.next[k] - data[i].s_next[k]);
    m.reward_mae += std::abs(p.reward - data[i].reward);
  }
  m.state_mae /= static_cast<double>(data.size() * kObsDim);
  m.reward_mae /= static_cast<double>(data.size());
  return m;
}

CrashClassifier train_classifier(std::span<const ModelSample> data, const EpmConfig& cfg, ClassifierMetrics* metrics) {
  cfg.validate();
  const auto crashes = static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](const ModelSample& m) {
    return m.crashed;
  }));
  if (crashes == 0) throw InvalidInput("classifier dataset has no crash transitions (class 1 missing)");
  if (crashes == data.size()) throw InvalidInput("classifier dataset has no safe transitions (class 0 missing)");

  auto [train_idx, hold_idx] = holdout_split(data.size(), cfg.holdout_fraction, mix_seed(cfg.seed, 53));
  std::vector<std::size_t> pos;
  std::vector<std::size_t> neg;
  for (auto i : train_idx) (data[i].crashed ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw InvalidInput("classifier training split lacks one of the classes");

  CrashClassifier model(cfg, mix_seed(cfg.seed, 59));
  nn::Mlp& net = model.net();
  nn::AdamState adam(net.num_params(), nn::AdamConfig{.lr = cfg.lr_classifier});
  std::mt19937_64 rng(mix_seed(cfg.seed, 61));
  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 67));
  const double natural = static_cast<double>(pos.size()) / static_cast<double>(train_idx.size());
  const double share = std::max(cfg.min_crash_share, natural);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_neg(0, neg.size() - 1);
  const std::size_t per_epoch = (train_idx.size() + cfg.batch - 1) / cfg.batch;
  const auto b = static_cast<Eigen::Index>(cfg.batch);
  std::vector<double> grad(net.num_params());

  for (std::size_t epoch = 0; epoch < cfg.epochs_classifier; ++epoch) {
    for (std::size_t k = 0; k < per_epoch; ++k) {
      nn::Matrix x(CrashClassifier::kInputDim, b);
      std::vector<int> labels(cfg.batch);
      for (Eigen::Index c = 0; c < b; ++c) {
        const bool crash = coin(rng) < share;
        const ModelSample& m = data[crash ? pos[pick_pos(rng)] : neg[pick_neg(rng)]];
        write_classifier_input(m.s, m.s_next, x, c);
        labels[static_cast<std::size_t>(c)] = crash ? 1 : 0;
      }
      nn::Mlp::Tape tape;
      const nn::Matrix logits = net.forward(x, tape, &noise_rng);
      nn::Matrix d(2, b);
      const double inv_b = 1.0 / static_cast<double>(b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const double p1 = softmax_crash(logits, c);
        if (!std::isfinite(p1)) {
          throw TrainingFault("crash classifier diverged at epoch " + std::to_string(epoch));
        }
        const double y = labels[static_cast<std::size_t>(c)];
        d(1, c) = (p1 - y) * inv_b;
        d(0, c) = -(p1 - y) * inv_b;
      }
      std::fill(grad.begin(), grad.end(), 0.0);
      net.backward(tape, d, grad);
      nn::adam_step(net.params(), grad, adam);
    }
  }
  if (metrics != nullptr) {
    const auto hold = gather(data, hold_idx);
    *metrics = evaluate_classifier(model, hold);
    metrics->n_train = train_idx.size();
  }
  return model;
}

ClassifierMetrics evaluate_classifier(const CrashClassifier& model, std::span<const ModelSample> data) {
  ClassifierMetrics m;
  m.n_holdout = data.size();
  if (data.empty()) return m;
  nn::Matrix x(CrashClassifier::kInputDim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) write_classifier_input(data[i].s, data[i].s_next, x, static_cast<Eigen::Index>(i));
  const nn::Matrix logits = model.net().forward(x);
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const bool predicted = softmax_crash(logits, static_cast<Eigen::Index>(i)) >= model.threshold;
    if (predicted && data[i].crashed) ++tp;
    else if (predicted) ++fp;
    else if (data[i].crashed) ++fn;
    else ++tn;
  }
  m.holdout_crashes = tp + fn;
  m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(data.size());
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  if (tp + fp + fn == 0) m.f1 = 1.0;
  else m.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  return m;
}

void save_model(const std::filesystem::path& path, const nn::Mlp& net, const nlohmann::json& extra) {
  nlohmann::ordered_json j;
  j["schema"] = "hitl.model";
  j["v"] = 1;
  j["sizes"] = net.spec().sizes;
  j["dropout"] = net.spec().dropout;
  j["input_noise"] = net.spec().input_noise;
  if (!extra.is_null()) j["extra"] = extra;
  const auto p = net.params();
  j["params"] = std::vector<double>(p.begin(), p.end());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write model: " + path.string());
  out << j.dump() << '\n';
  if (!out) throw StorageError("write failed: " + path.string());
}

nn::Mlp load_model(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream in(path);
  if (!in) throw ConfigError("model file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(path.string() + ": " + e.what());
  }
  if (j.value("schema", std::string()) != "hitl.model") throw StorageError(path.string() + ": not a model file");
  nn::MlpSpec spec;
  spec.sizes = j.at("sizes").get<std::vector<int>>();
  spec.dropout = j.value("dropout", 0.0);
  spec.input_noise = j.value("input_noise", 0.0);
  nn::Mlp net(spec, 0);
  const auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != net.num_params()) {
    throw ShapeError(path.string() + ": parameter count " + std::to_string(params.size()) + " does not match layers");
  }
  std::copy(params.begin(), params.end(), net.params().begin());
  if (extra != nullptr) *extra = j.value("extra", nlohmann::json::object());
  return net;
}

void save_predictive(const std::filesystem::path& path, const PredictiveModel& m) {
  save_model(path, m.net(), nlohmann::json{{"kind", "predictive"}});
}

PredictiveModel load_predictive(const std::filesystem::path& path) {
  nlohmann::json extra;
  PredictiveModel m;
  m.net() = load_model(path, &extra);
  if (extra.value("kind", std::string()) != "predictive" || m.net().input_dim() != PredictiveModel::kInputDim ||
      m.net().output_dim() != static_cast<int>(kObsDim) + 1) {
    throw ShapeError(path.string() + ": not a predictive model");
  }
  return m;
}

void save_classifier(const std::filesystem::path& path, const CrashClassifier& m) {
  save_model(path, m.net(), nlohmann::json{{"kind", "classifier"}, {"threshold", m.threshold}});
}

CrashClassifier load_classifier(const std::filesystem::path& path) {
  nlohmann::json extra;
  CrashClassifier m;
  m.net() = load_model(path, &extra);
  if (extra.value("kind", std::string()) != "classifier" || m.net().input_dim() != CrashClassifier::kInputDim ||
      m.net().output_dim() != 2) {
    throw ShapeError(path.string() + ": not a crash classifier");
  }
  m.threshold = extra.value("threshold", 0.5);
  return m;
}

RolloutPolicy greedy_policy(const nn::DuelingNet& q1) {
  return [&q1](const Observation& obs, const VehicleState*) { return nn::argmax(q1.q_values(obs)); };
}

RolloutResult counterfactual_rollout(const EvaluativeRecord& onset, int first_action, const RolloutPolicy& policy,
                                     const EpmModels& models, std::size_t horizon, bool oracle_mode) {
  if (horizon == 0) throw InvalidInput("rollout horizon must be >= 1");
  RolloutResult res;
  int a = first_action;
  if (oracle_mode) {
    if (models.track == nullptr) throw ConfigError("oracle rollout needs the track");
    TrackEnv env(*models.track, models.env);
    env.restore(onset.state, onset.cum_reward);
    for (std::size_t i = 0; i < horizon; ++i) {
      const auto out = env.step(a);
      ++res.steps;
      if (out.crashed) {
        res.crashed = true;
        res.sum_reward = -1.0;
        return res;
      }
      res.sum_reward += out.reward.r_total;
      res.rewards.push_back(out.reward.r_total);
      if (out.done || out.truncated) break;
      if (i + 1 < horizon) a = policy(out.observation, &env.state());
    }
    return res;
  }
  if (models.predictive == nullptr || !models.predictive->loaded() || models.classifier == nullptr ||
      !models.classifier->loaded()) {
    throw ConfigError("EPM models not loaded");
  }
  Observation s = onset.transition.s;
  for (std::size_t i = 0; i < horizon; ++i) {
    const Prediction p = models.predictive->predict(s, a);
    ++res.steps;
    if (models.classifier->crashed(s, p.next)) {
      res.crashed = true;
      res.sum_reward = -1.0;
      return res;
    }
    res.sum_reward += p.reward;
    res.rewards.push_back(p.reward);
    s = p.next;
    if (i + 1 < horizon) a = policy(s, nullptr);
  }
  return res;
}

nlohmann::ordered_json EpmVerdict::to_json() const {
  nlohmann::ordered_json j;
  j["window"] = window;
  j["episode"] = episode;
  j["onset_step"] = onset_step;
  j["length"] = length;
  j["horizon"] = horizon;
  j["sum_r_human"] = sum_r_human;
  j["sum_r_agent"] = sum_r_agent;
  j["agent_crashed"] = agent_crashed;
  j["agrees"] = agrees;
  return j;
}

nlohmann::ordered_json EpmSummary::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = literal_global ? "literal_global" : "window";
  j["n_windows"] = n_windows;
  if (agreement_rate) j["agreement_rate"] = *agreement_rate;
  else j["agreement_rate"] = "not applicable";
  j["mean_sum_r_human"] = mean_sum_r_human;
  j["mean_sum_r_agent"] = mean_sum_r_agent;
  return j;
}

std::vector<std::pair<std::size_t, std::size_t>> intervention_windows(std::span<const EvaluativeRecord> records) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t i = 0;
  while (i < records.size()) {
    if (!records[i].transition.intervened) {
      ++i;
      continue;
    }
    std::size_t j = i + 1;
    while (j < records.size() && records[j].transition.intervened && records[j].episode == records[i].episode &&
           records[j].step == records[j - 1].step + 1) {
      ++j;
    }
    out.emplace_back(i, j);
    i = j;
  }
  return out;
}

EpmReport evaluate_interventions(std::span<const EvaluativeRecord> records, const EpmModels& models,
                                 const RolloutPolicy& policy, const EpmConfig& cfg) {
  cfg.validate();
  EpmReport rep;
  rep.summary.literal_global = cfg.literal_global;
  const auto windows = intervention_windows(records);
  rep.summary.n_windows = windows.size();
  if (windows.empty()) return rep;

  if (cfg.literal_global) {
    EpmVerdict v;
    v.horizon = cfg.horizon;
    for (const auto& r : records) {
      if (!r.transition.intervened) {
        v.sum_r_human += r.transition.reward;
        continue;
      }
      ++v.length;
      const auto roll = counterfactual_rollout(r, r.transition.a_agent, policy, models, cfg.horizon, cfg.oracle_mode);
      if (roll.crashed) {
        v.sum_r_agent = -1.0;
        v.agent_crashed = true;
      } else {
        v.sum_r_agent += roll.sum_reward;
      }
    }
    v.agrees = v.sum_r_human >= v.sum_r_agent;
    rep.verdicts.push_back(v);
  } else {
    std::uint64_t id = 0;
    for (const auto& [b, e] : windows) {
      EpmVerdict v;
      v.window = ++id;
      v.episode = records[b].episode;
      v.onset_step = records[b].step;
      v.length = e - b;
      v.horizon = std::min(v.length, cfg.horizon);
      for (std::size_t k = b; k < b + v.horizon; ++k) v.sum_r_human += records[k].transition.reward;
      const auto roll =
          counterfactual_rollout(records[b], records[b].transition.a_agent, policy, models, v.horizon, cfg.oracle_mode);
      v.sum_r_agent = roll.sum_reward;
      v.agent_crashed = roll.crashed;
      v.agrees = v.sum_r_human >= v.sum_r_agent;
      rep.verdicts.push_back(v);
    }
  }
  std::size_t agree = 0;
  for (const auto& v : rep.verdicts) {
    agree += v.agrees ? 1 : 0;
    rep.summary.mean_sum_r_human += v.sum_r_human;
    rep.summary.mean_sum_r_agent += v.sum_r_agent;
  }
  const auto n = static_cast<double>(rep.verdicts.size());
  rep.summary.agreement_rate = static_cast<double>(agree) / n;
  rep.summary.mean_sum_r_human /= n;
  rep.summary.mean_sum_r_agent /= n;
  return rep;
}

void write_verdicts(const std::filesystem::path& verdicts, const std::filesystem::path& summary,
                    const EpmReport& report) {
  std::ofstream out(verdicts, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + verdicts.string());
  for (const auto& v : report.verdicts) out << v.to_json().dump() << '\n';
  std::ofstream sum(summary, std::ios::trunc);
  if (!sum) throw StorageError("cannot write " + summary.string());
  sum << report.summary.to_json().dump(2) << '\n';
  if (!out || !sum) throw StorageError("write failed: " + verdicts.string());
}

}  // namespace hitl
