#include "hitl/replay.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hitl/error.hpp"

namespace hitl {

void validate_transition(const Transition& t) {
  if (t.a_agent < 0 || t.a_agent >= kNumActions) {
    throw RejectedTransition("a_agent " + std::to_string(t.a_agent) + " outside 0..32");
  }
  if (t.a_human != kNoHuman && (t.a_human < 0 || t.a_human >= kNumActions)) {
    throw RejectedTransition("a_human " + std::to_string(t.a_human) + " is neither -1 nor in 0..32");
  }
  if (t.intervened != (t.a_human != kNoHuman)) {
    throw RejectedTransition(t.intervened ? "intervened transition without a human action"
                                          : "human action recorded on a non-intervened transition");
  }
  if (!std::isfinite(t.reward)) throw RejectedTransition("non-finite reward");
}

SumTree::SumTree(std::size_t capacity) : capacity_(capacity), base_(1) {
  if (capacity == 0) throw ConfigError("SumTree capacity must be > 0");
  while (base_ < capacity_) base_ <<= 1;
  nodes_.assign(2 * base_, 0.0);
}

void SumTree::set(std::size_t leaf, double value) {
  if (leaf >= capacity_) throw InternalFault("SumTree leaf " + std::to_string(leaf) + " out of range");
  std::size_t i = base_ + leaf;
  nodes_[i] = value;
  for (i >>= 1; i >= 1; i >>= 1) nodes_[i] = nodes_[2 * i] + nodes_[2 * i + 1];
}

std::size_t SumTree::find(double prefix) const {
  std::size_t i = 1;
  while (i < base_) {
    const double left = nodes_[2 * i];
    if (prefix < left || nodes_[2 * i + 1] <= 0.0) {
      i = 2 * i;
    } else {
      prefix -= left;
      i = 2 * i + 1;
    }
  }
  std::size_t leaf = i - base_;
  // Rounding can land on an empty leaf; walk back to the nearest populated one.
  while (leaf > 0 && (leaf >= capacity_ || nodes_[base_ + leaf] <= 0.0)) --leaf;
  return leaf;
}

void PerConfig::validate() const {
  if (capacity == 0) throw ConfigError("replay.capacity must be > 0");
  if (!(alpha >= 0.0)) throw ConfigError("replay.alpha must be >= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("replay.beta must lie in [0,1]");
  if (!(epsilon > 0.0)) throw ConfigError("replay.epsilon must be > 0");
  if (!(intervention_boost > 0.0)) throw ConfigError("replay.intervention_boost must be > 0");
}

PriorityBuffer::PriorityBuffer(PerConfig cfg)
    : cfg_(cfg), beta_(cfg.beta), tree_((cfg.validate(), cfg.capacity)), data_(cfg.capacity), raw_(cfg.capacity, 0.0) {}

double PriorityBuffer::leaf_value(const Transition& t, double p) const {
  const double boosted = t.intervened ? p * cfg_.intervention_boost : p;
  return std::pow(boosted, cfg_.alpha);
}

void PriorityBuffer::store(std::size_t slot, const Transition& t, double priority) {
  data_[slot] = t;
  raw_[slot] = priority;
  tree_.set(slot, leaf_value(t, priority));
}

void PriorityBuffer::push(const Transition& t, double initial_priority) {
  validate_transition(t);
  if (pinned_ >= cfg_.capacity) throw ConfigError("replay buffer fully pinned");
  const double p = std::max(max_priority_, initial_priority);
  max_priority_ = p;
  if (next_ < pinned_) next_ = pinned_;
  store(next_, t, p);
  next_ = next_ + 1 >= cfg_.capacity ? pinned_ : next_ + 1;
  size_ = std::min(size_ + 1, cfg_.capacity);
}

void PriorityBuffer::push_pinned(const Transition& t, double initial_priority) {
  validate_transition(t);
  if (size_ != pinned_) throw ConfigError("pinned transitions must be pushed before ordinary ones");
  if (pinned_ + 1 >= cfg_.capacity) throw ConfigError("too many pinned transitions for replay capacity");
  const double p = std::max(max_priority_, initial_priority);
  max_priority_ = p;
  store(pinned_, t, p);
  ++pinned_;
  ++size_;
  next_ = pinned_;
}

SampledBatch PriorityBuffer::sample(std::size_t batch, std::mt19937_64& rng) const {
  if (batch == 0 || size_ < batch) {
    throw NotReady("replay holds " + std::to_string(size_) + " transitions, batch needs " + std::to_string(batch));
  }
  SampledBatch out;
  out.transitions.reserve(batch);
  const double total = tree_.total();
  const double segment = total / static_cast<double>(batch);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double max_w = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double u = std::min((static_cast<double>(b) + unit(rng)) * segment, std::nextafter(total, 0.0));
    const std::size_t slot = tree_.find(u);
    const double prob = tree_.leaf(slot) / total;
    const double w = std::pow(static_cast<double>(size_) * prob, -beta_);
    out.indices.push_back(slot);
    out.probabilities.push_back(prob);
    out.is_weights.push_back(w);
    out.transitions.push_back(data_[slot]);
    max_w = std::max(max_w, w);
  }
  for (double& w : out.is_weights) w /= max_w;
  return out;
}

void PriorityBuffer::update_priorities(std::span<const std::size_t> indices, std::span<const double> td_errors) {
  if (indices.size() != td_errors.size()) throw InternalFault("update_priorities: length mismatch");
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t slot = indices[k];
    if (slot >= size_) throw InternalFault("update_priorities: slot " + std::to_string(slot) + " not populated");
    if (!std::isfinite(td_errors[k])) throw InternalFault("update_priorities: non-finite TD error");
    const double p = std::abs(td_errors[k]) + cfg_.epsilon;
    raw_[slot] = p;
    max_priority_ = std::max(max_priority_, p);
    tree_.set(slot, leaf_value(data_[slot], p));
  }
}

namespace {

nlohmann::json obs_to_json(const Observation& o) { return nlohmann::json(std::vector<double>(o.begin(), o.end())); }

Observation obs_from_json(const nlohmann::json& j) {
  Observation o{};
  if (j.size() != kObsDim) throw ConfigError("observation must have 13 components");
  for (std::size_t i = 0; i < kObsDim; ++i) o[i] = j.at(i).get<double>();
  return o;
}

}  // namespace

const std::vector<std::string>& evaluative_fields() {
  static const std::vector<std::string> fields{"episode", "step",       "s",        "a_agent", "a_human",
                                               "r",       "s_next",     "done",     "intervened",
                                               "lambda_h", "crashed",   "sim"};
  return fields;
}

nlohmann::ordered_json record_to_json(const EvaluativeRecord& r) {
  const auto& t = r.transition;
  nlohmann::ordered_json j;
  j["episode"] = r.episode;
  j["step"] = r.step;
  j["s"] = obs_to_json(t.s);
  j["a_agent"] = t.a_agent;
  j["a_human"] = t.a_human;
  j["r"] = t.reward;
  j["s_next"] = obs_to_json(t.s_next);
  j["done"] = t.done;
  j["intervened"] = t.intervened ? 1 : 0;
  j["lambda_h"] = t.lambda_h;
  j["crashed"] = r.crashed;
  nlohmann::ordered_json sim;
  sim["x"] = r.state.position.x;
  sim["y"] = r.state.position.y;
  sim["heading"] = r.state.heading;
  sim["speed"] = r.state.speed;
  sim["steering"] = r.state.steering;
  sim["step_index"] = r.state.step_index;
  const auto hist = r.state.history.values();
  sim["history"] = std::vector<double>(hist.begin(), hist.begin() + static_cast<std::ptrdiff_t>(r.state.history.size()));
  sim["cum_reward"] = r.cum_reward;
  j["sim"] = sim;
  return j;
}

EvaluativeRecord record_from_json(const nlohmann::json& j) {
  EvaluativeRecord r;
  r.episode = j.at("episode").get<std::uint64_t>();
  r.step = j.at("step").get<std::uint64_t>();
  auto& t = r.transition;
  t.s = obs_from_json(j.at("s"));
  t.a_agent = j.at("a_agent").get<int>();
  t.a_human = j.at("a_human").get<int>();
  t.reward = j.at("r").get<double>();
  t.s_next = obs_from_json(j.at("s_next"));
  t.done = j.at("done").get<bool>();
  t.intervened = j.at("intervened").get<int>() != 0;
  t.lambda_h = j.at("lambda_h").get<double>();
  r.crashed = j.at("crashed").get<bool>();
  const auto& sim = j.at("sim");
  r.state.position = {sim.at("x").get<double>(), sim.at("y").get<double>()};
  r.state.heading = sim.at("heading").get<double>();
  r.state.speed = sim.at("speed").get<double>();
  r.state.steering = sim.at("steering").get<double>();
  r.state.step_index = sim.at("step_index").get<std::uint64_t>();
  for (const auto& h : sim.at("history")) r.state.history.push(h.get<double>());
  r.cum_reward = sim.at("cum_reward").get<double>();
  validate_transition(t);
  return r;
}

void write_records(const std::filesystem::path& path, const nlohmann::ordered_json& header,
                   std::span<const EvaluativeRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << header.dump() << '\n';
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw StorageError("write failed: " + path.string());
}

nlohmann::json read_records(const std::filesystem::path& path, std::vector<EvaluativeRecord>& out) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw StorageError("empty record file: " + path.string());
  nlohmann::json header;
  std::size_t line_no = 1;
  try {
    header = nlohmann::json::parse(line);
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw StorageError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  } catch (const RejectedTransition& e) {
    throw StorageError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  }
  return header;
}

EvaluativeStore::EvaluativeStore(const EvaluativeStore& other) : records_(other.snapshot()) {}

EvaluativeStore& EvaluativeStore::operator=(const EvaluativeStore& other) {
  if (this != &other) {
    auto copy = other.snapshot();
    std::lock_guard lock(mu_);
    records_ = std::move(copy);
  }
  return *this;
}

void EvaluativeStore::append(const EvaluativeRecord& record) {
  validate_transition(record.transition);
  std::lock_guard lock(mu_);
  records_.push_back(record);
}

std::vector<EvaluativeRecord> EvaluativeStore::snapshot() const {
  std::lock_guard lock(mu_);
  return records_;
}

std::size_t EvaluativeStore::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::vector<std::pair<std::size_t, std::size_t>> EvaluativeStore::episode_ranges() const {
  std::lock_guard lock(mu_);
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= records_.size(); ++i) {
    if (i == records_.size() || records_[i].episode != records_[begin].episode) {
      if (!records_.empty()) ranges.emplace_back(begin, i);
      begin = i;
    }
  }
  return ranges;
}

void EvaluativeStore::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json header;
  header["schema"] = "hitl.evaluative";
  header["v"] = 1;
  header["fields"] = evaluative_fields();
  const auto rows = snapshot();
  write_records(path, header, rows);
}

EvaluativeStore EvaluativeStore::load(const std::filesystem::path& path) {
  std::vector<EvaluativeRecord> rows;
  const auto header = read_records(path, rows);
  if (header.value("schema", std::string()) != "hitl.evaluative") {
    throw StorageError(path.string() + ": not an evaluative store (schema header missing)");
  }
  EvaluativeStore store;
  store.records_ = std::move(rows);
  return store;
}

}  // namespace hitl
