#include "hitl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <type_traits>

#include "hitl/error.hpp"

namespace hitl {

std::string to_string(AgentKind kind) {
  switch (kind) {
    case AgentKind::Iddqn: return "iddqn";
    case AgentKind::Ddqn: return "ddqn";
    case AgentKind::Bc: return "bc";
    case AgentKind::Dqfd: return "dqfd";
    case AgentKind::HgDagger: return "hgdagger";
  }
  return "iddqn";
}

AgentKind agent_kind_from_string(const std::string& s) {
  if (s == "iddqn") return AgentKind::Iddqn;
  if (s == "ddqn") return AgentKind::Ddqn;
  if (s == "bc") return AgentKind::Bc;
  if (s == "dqfd") return AgentKind::Dqfd;
  if (s == "hgdagger") return AgentKind::HgDagger;
  throw ConfigError("kind: expected one of iddqn, ddqn, bc, dqfd, hgdagger; got \"" + s + "\"");
}

static_assert(std::is_same_v<std::size_t, std::uint64_t>);

namespace {

std::string source_name(SourceKind k) {
  switch (k) {
    case SourceKind::None: return "none";
    case SourceKind::Scripted: return "scripted";
    case SourceKind::Trace: return "trace";
    case SourceKind::Live: return "live";
  }
  return "none";
}

SourceKind source_from(const std::string& s, const std::string& field) {
  if (s == "none") return SourceKind::None;
  if (s == "scripted") return SourceKind::Scripted;
  if (s == "trace") return SourceKind::Trace;
  if (s == "live") return SourceKind::Live;
  throw ConfigError(field + ": expected one of none, scripted, trace, live; got \"" + s + "\"");
}

/// Reads one JSON object, checking types and rejecting unknown keys.
class Section {
 public:
  Section(const nlohmann::json* j, std::string path) : j_(j), path_(std::move(path)) {
    if (j_ != nullptr && !j_->is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return j_ != nullptr && j_->contains(key); }

  const nlohmann::json* raw(const char* key) {
    if (!has(key)) return nullptr;
    used_.insert(key);
    return &j_->at(key);
  }

  Section sub(const char* key) { return Section(raw(key), field(key)); }

  void get(const char* key, double& out) {
    if (auto v = raw(key)) {
      if (!v->is_number()) throw type_error(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (auto v = raw(key)) {
      if (!v->is_boolean()) throw type_error(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (auto v = raw(key)) {
      if (!v->is_string()) throw type_error(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (auto v = raw(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0)) {
        throw type_error(key, "a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (auto v = raw(key)) {
      if (!v->is_array()) throw type_error(key, "an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) throw type_error(key, "an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  void get(const char* key, std::vector<std::string>& out) {
    if (auto v = raw(key)) {
      if (!v->is_array()) throw type_error(key, "an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) throw type_error(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }

  void finish() const {
    if (j_ == nullptr) return;
    for (const auto& [k, _] : j_->items()) {
      if (!used_.contains(k)) throw ConfigError(field(k.c_str()) + ": unknown field");
    }
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  ConfigError type_error(const char* key, const char* expected) const {
    return ConfigError(field(key) + ": expected " + expected);
  }

  const nlohmann::json* j_;
  std::string path_;
  std::set<std::string> used_;
};

HumanWeightSchedule read_schedule(const nlohmann::json& v, const std::string& field) {
  try {
    if (v.is_number()) return HumanWeightSchedule::constant(v.get<double>());
    if (v.is_string()) {
      const auto s = v.get<std::string>();
      if (s == "decay") return HumanWeightSchedule::linear_decay(1.0, 0.0, 40000);
      throw ConfigError(field + ": expected a number, \"decay\" or a schedule object");
    }
    if (v.is_object()) return HumanWeightSchedule::from_json(v);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(field + ": " + e.what());
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(field, 0) == 0) throw;
    throw ConfigError(field + ": " + msg);
  }
  throw ConfigError(field + ": expected a number, \"decay\" or a schedule object");
}

void read_reward(Section s, RewardConfig& r) {
  s.get("delta", r.delta);
  s.get("beta", r.beta);
  s.get("xi", r.xi);
  s.get("history_len", r.history_len);
  s.finish();
}

void read_agent(Section s, AgentConfig& a) {
  s.get("gamma", a.gamma);
  s.get("batch", a.batch);
  s.get("train_every", a.train_every);
  s.get("tau", a.tau);
  s.get("lr", a.lr);
  s.get("epsilon_init", a.epsilon_init);
  s.get("epsilon_decay", a.epsilon_decay);
  s.get("epsilon_floor", a.epsilon_floor);
  s.get("learn_start", a.learn_start);
  s.get("strict_paper_blend", a.strict_paper_blend);
  if (auto v = s.raw("lambda_h")) a.schedule = read_schedule(*v, s.field("lambda_h"));
  s.finish();
}

void read_per(Section s, PerConfig& p) {
  s.get("capacity", p.capacity);
  s.get("alpha", p.alpha);
  s.get("beta", p.beta);
  s.get("epsilon", p.epsilon);
  s.get("intervention_boost", p.intervention_boost);
  s.get("beta_anneal_steps", p.beta_anneal_steps);
  s.finish();
}

void read_bc(Section s, BcConfig& b) {
  s.get("epochs", b.epochs);
  s.get("batch", b.batch);
  s.get("lr", b.lr);
  s.get("shuffle", b.shuffle);
  s.finish();
}

void read_epm(Section s, EpmConfig& e) {
  s.get("horizon", e.horizon);
  s.get("lr_predictive", e.lr_predictive);
  s.get("lr_classifier", e.lr_classifier);
  s.get("batch", e.batch);
  s.get("dropout", e.dropout);
  s.get("input_noise", e.input_noise);
  s.get("epochs_predictive", e.epochs_predictive);
  s.get("epochs_classifier", e.epochs_classifier);
  s.get("hidden", e.hidden);
  s.get("threshold", e.threshold);
  s.get("holdout_fraction", e.holdout_fraction);
  s.get("min_crash_share", e.min_crash_share);
  s.get("oracle_mode", e.oracle_mode);
  s.get("literal_global", e.literal_global);
  s.finish();
}

}  // namespace

void RunConfig::sync_seeds() {
  agent.seed = seed;
  bc.seed = seed;
  dqfd.agent = agent;
  hgdagger.bc = bc;
  epm.seed = seed;
}

void RunConfig::validate() const {
  if (total_steps == 0 && (kind == AgentKind::Iddqn || kind == AgentKind::Ddqn || kind == AgentKind::Dqfd)) {
    throw ConfigError("total_steps: must be > 0");
  }
  if (out.empty()) throw ConfigError("out: must name an output directory");
  if (!is_builtin_track(track) && !std::filesystem::exists(track)) {
    throw ConfigError("track: track file not found: " + track);
  }
  env.reward.validate();
  if (!(env.success_threshold > 0.0)) throw ConfigError("env.success_threshold: must be > 0");
  agent.validate();
  per.validate();
  intervention.schedule.validate();
  if (!(intervention.lookahead > 0.0)) throw ConfigError("intervention.lookahead: must be > 0");
  if (intervention.source == SourceKind::Trace && intervention.trace_path.empty()) {
    throw ConfigError("intervention.trace: required when source is \"trace\"");
  }
  if (!demos.path.empty() && !std::filesystem::exists(demos.path)) {
    throw ConfigError("demos.path: demonstration file not found: " + demos.path);
  }
  if (demos.path.empty() && demos.n == 0) throw ConfigError("demos.n: must be > 0");
  if (bc.epochs == 0 || bc.batch == 0) throw ConfigError("bc: epochs and batch must be > 0");
  dqfd.validate();
  hgdagger.validate();
  epm.validate();
  if (eval.episodes == 0) throw ConfigError("eval.episodes: must be > 0");
}

std::string RunConfig::effective_label() const {
  if (!label.empty()) return label;
  std::ostringstream os;
  os << to_string(kind);
  if (kind == AgentKind::Iddqn) {
    const auto& s = agent.schedule;
    if (s.mode() == HumanWeightSchedule::Mode::LinearDecay) os << "-decay";
    else os << "-const" << s.start();
  }
  return os.str();
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Section root(&j, "");
  if (auto v = root.raw("kind")) {
    if (!v->is_string()) throw ConfigError("kind: expected a string");
    c.kind = agent_kind_from_string(v->get<std::string>());
  }
  root.get("label", c.label);
  root.get("seed", c.seed);
  root.get("total_steps", c.total_steps);
  root.get("out", c.out);
  root.get("checkpoint_every", c.checkpoint_every);
  {
    Section env = root.sub("env");
    env.get("track", c.track);
    if (env.has("track_seed")) {
      std::uint64_t ts = 0;
      env.get("track_seed", ts);
      c.track_seed = ts;
    }
    env.get("success_threshold", c.env.success_threshold);
    env.get("max_episode_steps", c.env.max_episode_steps);
    read_reward(env.sub("reward"), c.env.reward);
    env.finish();
  }
  read_agent(root.sub("agent"), c.agent);
  read_per(root.sub("per"), c.per);
  {
    Section iv = root.sub("intervention");
    std::string src = source_name(c.intervention.source);
    iv.get("source", src);
    c.intervention.source = source_from(src, iv.field("source"));
    iv.get("h_freq", c.intervention.schedule.h_freq);
    iv.get("h_steps", c.intervention.schedule.h_steps);
    iv.get("h_limit", c.intervention.schedule.h_limit);
    iv.get("lookahead", c.intervention.lookahead);
    iv.get("trace", c.intervention.trace_path);
    iv.finish();
  }
  {
    Section d = root.sub("demos");
    d.get("path", c.demos.path);
    d.get("n", c.demos.n);
    d.finish();
  }
  read_bc(root.sub("bc"), c.bc);
  {
    Section d = root.sub("dqfd");
    d.get("pretrain_steps", c.dqfd.pretrain_steps);
    d.get("margin", c.dqfd.margin);
    d.get("lambda_e", c.dqfd.lambda_e);
    d.finish();
  }
  {
    Section h = root.sub("hgdagger");
    h.get("iterations", c.hgdagger.iterations);
    h.get("add_per_iter", c.hgdagger.add_per_iter);
    h.get("takeover_fraction", c.hgdagger.takeover_fraction);
    h.get("max_rollout_steps", c.hgdagger.max_rollout_steps);
    h.finish();
  }
  read_epm(root.sub("epm"), c.epm);
  {
    Section e = root.sub("eval");
    e.get("episodes", c.eval.episodes);
    e.get("tracks", c.eval.tracks);
    e.finish();
  }
  root.finish();
  c.sync_seeds();
  return c;
}

nlohmann::ordered_json config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(c.kind);
  j["label"] = c.label;
  j["seed"] = c.seed;
  j["total_steps"] = c.total_steps;
  j["out"] = c.out;
  j["checkpoint_every"] = c.checkpoint_every;
  auto& env = j["env"];
  env["track"] = c.track;
  if (c.track_seed) env["track_seed"] = *c.track_seed;
  env["success_threshold"] = c.env.success_threshold;
  env["max_episode_steps"] = c.env.max_episode_steps;
  env["reward"] = {{"delta", c.env.reward.delta},
                   {"beta", c.env.reward.beta},
                   {"xi", c.env.reward.xi},
                   {"history_len", c.env.reward.history_len}};
  auto& a = j["agent"];
  a["gamma"] = c.agent.gamma;
  a["batch"] = c.agent.batch;
  a["train_every"] = c.agent.train_every;
  a["tau"] = c.agent.tau;
  a["lr"] = c.agent.lr;
  a["epsilon_init"] = c.agent.epsilon_init;
  a["epsilon_decay"] = c.agent.epsilon_decay;
  a["epsilon_floor"] = c.agent.epsilon_floor;
  a["learn_start"] = c.agent.learn_start;
  a["strict_paper_blend"] = c.agent.strict_paper_blend;
  a["lambda_h"] = c.agent.schedule.to_json();
  auto& p = j["per"];
  p["capacity"] = c.per.capacity;
  p["alpha"] = c.per.alpha;
  p["beta"] = c.per.beta;
  p["epsilon"] = c.per.epsilon;
  p["intervention_boost"] = c.per.intervention_boost;
  p["beta_anneal_steps"] = c.per.beta_anneal_steps;
  auto& iv = j["intervention"];
  iv["source"] = source_name(c.intervention.source);
  iv["h_freq"] = c.intervention.schedule.h_freq;
  iv["h_steps"] = c.intervention.schedule.h_steps;
  iv["h_limit"] = c.intervention.schedule.h_limit;
  iv["lookahead"] = c.intervention.lookahead;
  iv["trace"] = c.intervention.trace_path;
  j["demos"] = {{"path", c.demos.path}, {"n", c.demos.n}};
  j["bc"] = {{"epochs", c.bc.epochs}, {"batch", c.bc.batch}, {"lr", c.bc.lr}, {"shuffle", c.bc.shuffle}};
  j["dqfd"] = {{"pretrain_steps", c.dqfd.pretrain_steps}, {"margin", c.dqfd.margin}, {"lambda_e", c.dqfd.lambda_e}};
  j["hgdagger"] = {{"iterations", c.hgdagger.iterations},
                   {"add_per_iter", c.hgdagger.add_per_iter},
                   {"takeover_fraction", c.hgdagger.takeover_fraction},
                   {"max_rollout_steps", c.hgdagger.max_rollout_steps}};
  auto& e = j["epm"];
  e["horizon"] = c.epm.horizon;
  e["lr_predictive"] = c.epm.lr_predictive;
  e["lr_classifier"] = c.epm.lr_classifier;
  e["batch"] = c.epm.batch;
  e["dropout"] = c.epm.dropout;
  e["input_noise"] = c.epm.input_noise;
  e["epochs_predictive"] = c.epm.epochs_predictive;
  e["epochs_classifier"] = c.epm.epochs_classifier;
  e["hidden"] = c.epm.hidden;
  e["threshold"] = c.epm.threshold;
  e["holdout_fraction"] = c.epm.holdout_fraction;
  e["min_crash_share"] = c.epm.min_crash_share;
  e["oracle_mode"] = c.epm.oracle_mode;
  e["literal_global"] = c.epm.literal_global;
  j["eval"] = {{"episodes", c.eval.episodes}, {"tracks", c.eval.tracks}};
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << config_to_json(cfg).dump(2) << '\n';
}

void set_config_field(nlohmann::json& j, const std::string& dotted_path, const nlohmann::json& value) {
  nlohmann::json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted_path.find('.', start);
    const std::string key = dotted_path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("sweep key \"" + dotted_path + "\" has an empty component");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = nlohmann::json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ConfigError("sweep key \"" + dotted_path + "\" passes through a non-object");
    start = dot + 1;
  }
}

}  // namespace hitl
