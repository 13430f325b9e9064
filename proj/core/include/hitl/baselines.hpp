#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hitl/agent.hpp"

namespace hitl {

/// Expert rollouts. Each record's transition carries the expert action in
/// both a_agent and a_human with intervened = 1.
struct DemoDataset {
  std::vector<EvaluativeRecord> records;
  std::string expert;
  std::string track;
  std::uint64_t seed = 0;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  int action(std::size_t i) const { return records[i].transition.a_human; }
  const Observation& state(std::size_t i) const { return records[i].transition.s; }
};

DemoDataset make_demo_dataset(std::vector<Transition> transitions, std::string expert);

/// Rolls the expert for n transitions across episodes. Throws
/// DatasetQualityError when more than half of the episodes crash.
DemoDataset collect_demonstrations(InterventionSource& expert, TrackEnv& env, std::size_t n, std::uint64_t seed);

void save_demos(const std::filesystem::path& path, const DemoDataset& data);
DemoDataset load_demos(const std::filesystem::path& path);

struct BcConfig {
  std::size_t epochs = 30;
  std::size_t batch = 64;
  double lr = 1e-3;
  bool shuffle = true;
  std::uint64_t seed = 0;
};

struct BcResult {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
};

/// Softmax cross-entropy between Q outputs and expert labels. Never touches
/// the environment.
BcResult bc_train(const DemoDataset& data, nn::DuelingNet& net, const BcConfig& cfg);

/// Fraction of dataset states where argmax Q equals the expert label.
double label_accuracy(const DemoDataset& data, const nn::DuelingNet& net);

/// max_a [Q(a) + m * 1(a != a_e)] - Q(a_e).
double large_margin_loss(const Eigen::Ref<const Eigen::VectorXd>& q, int expert_action, double margin);

struct DqfdConfig {
  std::uint64_t pretrain_steps = 2000;
  double margin = 0.8;
  double lambda_e = 1.0;
  AgentConfig agent;

  void validate() const;
};

/// Clipped double-Q update plus the large-margin term on pinned demo slots.
TrainStats dqfd_train_step(nn::DuelingNetPair& nets, PriorityBuffer& buffer, const DqfdConfig& cfg,
                           std::mt19937_64& rng);

struct DqfdResult {
  RunReport report;
  double pretrain_match = 0.0;  // greedy agreement with the expert on demo states
};

/// Pretrains on pinned demos, then fine-tunes online with the demos retained.
DqfdResult dqfd_run(const DemoDataset& data, const DqfdConfig& cfg, Trainer& trainer, std::uint64_t total_steps,
                    RunSinks& sinks);

struct HgDaggerConfig {
  std::size_t iterations = 4;  // iteration 0 is plain BC
  std::size_t add_per_iter = 300;
  double takeover_fraction = 0.5;  // of half_width
  std::size_t max_rollout_steps = 20000;
  BcConfig bc;

  void validate() const;
};

struct HgDaggerResult {
  DemoDataset aggregated;
  std::vector<std::size_t> added_per_iteration;
  BcResult last;
};

/// Human-gated DAgger: the expert takes over whenever |cross-track| exceeds
/// the threshold; only expert-labelled steps are aggregated.
HgDaggerResult hg_dagger_run(const DemoDataset& initial, InterventionSource& expert, TrackEnv& env,
                             const HgDaggerConfig& cfg, nn::DuelingNet& net);

}  // namespace hitl
