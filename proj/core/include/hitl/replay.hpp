#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/env.hpp"

namespace hitl {

inline constexpr int kNoHuman = -1;

/// One environment step with both the agent's proposal and (if any) the
/// human's action. `lambda_h` is the human-weight schedule value at the step
/// the transition was stored.
struct Transition {
  Observation s{};
  int a_agent = 0;
  int a_human = kNoHuman;
  double reward = 0.0;
  Observation s_next{};
  bool done = false;
  bool intervened = false;
  double lambda_h = 0.0;

  /// The executed action: a_human when intervened, a_agent otherwise.
  int executed_action() const { return intervened ? a_human : a_agent; }

  friend bool operator==(const Transition&, const Transition&) = default;
};

/// Throws RejectedTransition when intervened != (a_human != -1) or an action
/// index is out of range.
void validate_transition(const Transition& t);

/// Binary sum tree over a fixed number of leaves. Internal nodes are always
/// recomputed as left + right, so the root is the exact floating-point sum of
/// its subtree and never drifts.
class SumTree {
 public:
  explicit SumTree(std::size_t capacity);

  void set(std::size_t leaf, double value);
  double leaf(std::size_t i) const { return nodes_[base_ + i]; }
  double total() const { return nodes_[1]; }
  std::size_t capacity() const { return capacity_; }
  /// Leaf whose cumulative interval contains `prefix` (0 <= prefix < total()).
  std::size_t find(double prefix) const;

 private:
  std::size_t capacity_;
  std::size_t base_;
  std::vector<double> nodes_;  // 1-indexed heap layout
};

struct PerConfig {
  std::size_t capacity = 50000;
  double alpha = 0.9;
  double beta = 0.4;
  double epsilon = 1e-3;
  /// Multiplier on intervened transitions' priorities; 1.0 disables it.
  double intervention_boost = 1.0;
  /// Linear annealing of beta towards 1 over this many train steps; 0 = fixed.
  std::uint64_t beta_anneal_steps = 0;

  void validate() const;
};

struct SampledBatch {
  std::vector<Transition> transitions;
  std::vector<std::size_t> indices;
  std::vector<double> probabilities;
  std::vector<double> is_weights;
};

/// Proportional prioritized replay. Slots [0, pinned) hold transitions that
/// are never evicted; the remaining slots form a FIFO ring.
class PriorityBuffer {
 public:
  explicit PriorityBuffer(PerConfig cfg);

  /// Inserts with priority max(max priority seen so far, initial_priority).
  void push(const Transition& t, double initial_priority = 0.0);
  /// Permanent entry (demonstrations). Must precede any ordinary push.
  void push_pinned(const Transition& t, double initial_priority = 0.0);

  /// Stratified proportional sample. Throws NotReady if size() < batch.
  SampledBatch sample(std::size_t batch, std::mt19937_64& rng) const;
  /// Sets each leaf to |td| + epsilon. Throws InternalFault on a bad index.
  void update_priorities(std::span<const std::size_t> indices, std::span<const double> td_errors);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return cfg_.capacity; }
  std::size_t pinned() const { return pinned_; }
  const PerConfig& config() const { return cfg_; }
  double beta() const { return beta_; }
  void set_beta(double b) { beta_ = b; }

  /// Raw priority p_t (before exponent) of a slot.
  double priority(std::size_t slot) const { return raw_[slot]; }
  double max_priority() const { return max_priority_; }
  const SumTree& tree() const { return tree_; }
  const Transition& at(std::size_t slot) const { return data_[slot]; }

 private:
  double leaf_value(const Transition& t, double p) const;
  void store(std::size_t slot, const Transition& t, double priority);

  PerConfig cfg_;
  double beta_;
  SumTree tree_;
  std::vector<Transition> data_;
  std::vector<double> raw_;
  std::size_t size_ = 0;
  std::size_t pinned_ = 0;
  std::size_t next_ = 0;
  double max_priority_ = 1.0;
};

/// One row of the evaluative store: the transition plus the simulator
/// snapshot taken before the step, so oracle rollouts can restart from it.
struct EvaluativeRecord {
  std::uint64_t episode = 0;
  std::uint64_t step = 0;  // global environment step
  Transition transition;
  bool crashed = false;
  VehicleState state;       // pre-step
  double cum_reward = 0.0;  // episode return before this step

  friend bool operator==(const EvaluativeRecord&, const EvaluativeRecord&) = default;
};

nlohmann::ordered_json record_to_json(const EvaluativeRecord& r);
EvaluativeRecord record_from_json(const nlohmann::json& j);

/// Field order of the line-delimited record format.
const std::vector<std::string>& evaluative_fields();

/// Writes a schema header line followed by one record per line.
void write_records(const std::filesystem::path& path, const nlohmann::ordered_json& header,
                   std::span<const EvaluativeRecord> records);
/// Returns the header; throws StorageError with the path on failure.
nlohmann::json read_records(const std::filesystem::path& path, std::vector<EvaluativeRecord>& out);

/// Append-only, order-preserving log of every transition. Safe for one
/// appending thread plus concurrent snapshot readers.
class EvaluativeStore {
 public:
  EvaluativeStore() = default;
  EvaluativeStore(const EvaluativeStore& other);
  EvaluativeStore& operator=(const EvaluativeStore& other);

  void append(const EvaluativeRecord& record);
  std::vector<EvaluativeRecord> snapshot() const;
  std::size_t size() const;

  /// Half-open [begin, end) index ranges, one per episode, in order.
  std::vector<std::pair<std::size_t, std::size_t>> episode_ranges() const;

  void save(const std::filesystem::path& path) const;
  static EvaluativeStore load(const std::filesystem::path& path);

 private:
  mutable std::mutex mu_;
  std::vector<EvaluativeRecord> records_;
};

}  // namespace hitl
