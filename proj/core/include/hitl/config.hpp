#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/agent.hpp"
#include "hitl/baselines.hpp"
#include "hitl/epm.hpp"

namespace hitl {

enum class AgentKind { Iddqn, Ddqn, Bc, Dqfd, HgDagger };

std::string to_string(AgentKind kind);
AgentKind agent_kind_from_string(const std::string& s);

enum class SourceKind { None, Scripted, Trace, Live };

struct InterventionConfig {
  SourceKind source = SourceKind::Scripted;
  InterventionSchedule schedule;
  double lookahead = 6.0;
  std::string trace_path;  // for SourceKind::Trace
};

struct DemoConfig {
  std::string path;  // empty: collect with the scripted expert
  std::size_t n = 3000;
};

struct EvalConfig {
  std::size_t episodes = 100;
  std::vector<std::string> tracks = {"loop", "s-curve"};
};

/// Everything one run needs. Round-trips through JSON losslessly.
struct RunConfig {
  AgentKind kind = AgentKind::Iddqn;
  std::string label;  // series name in comparisons; derived when empty
  std::uint64_t seed = 0;
  std::uint64_t total_steps = 50000;
  std::string out = "runs/default";
  std::string track = "loop";
  std::optional<std::uint64_t> track_seed;  // defaults to seed
  EnvConfig env;
  AgentConfig agent;
  PerConfig per;
  InterventionConfig intervention;
  DemoConfig demos;
  BcConfig bc;
  DqfdConfig dqfd;
  HgDaggerConfig hgdagger;
  EpmConfig epm;
  EvalConfig eval;
  std::uint64_t checkpoint_every = 10000;

  /// Applies the run seed to every module seed.
  void sync_seeds();
  void validate() const;
  std::string effective_label() const;
  std::uint64_t effective_track_seed() const { return track_seed.value_or(seed); }
};

/// Throws ConfigError naming the offending field (e.g. "agent.gamma").
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

/// Sets one dotted-path field (e.g. "env.reward.delta") on a config JSON.
void set_config_field(nlohmann::json& j, const std::string& dotted_path, const nlohmann::json& value);

}  // namespace hitl
