#include "hitl/harness.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>

#include "hitl/checkpoint.hpp"
#include "hitl/error.hpp"

namespace hitl {

namespace fs = std::filesystem;

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["track"] = track;
  j["episodes"] = rewards.size();
  j["mean"] = mean;
  j["std"] = stddev;
  j["successes"] = successes;
  j["crashes"] = crashes;
  j["rewards"] = rewards;
  return j;
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

EvalReport evaluate_greedy(const nn::DuelingNet& q1, const TrackSpec& track, const EnvConfig& env,
                           std::size_t episodes, std::uint64_t seed) {
  EvalReport rep;
  rep.track = track.name;
  TrackEnv e(track, env);
  const std::uint64_t base = mix_seed(seed, 0xE7A1);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    Observation obs = e.reset(episode_seed(base, ep));
    for (;;) {
      const auto out = e.step(nn::argmax(q1.q_values(obs)));
      obs = out.observation;
      if (out.done || out.truncated) {
        if (out.crashed) ++rep.crashes;
        if (out.status == EpisodeStatus::Success) ++rep.successes;
        break;
      }
    }
    rep.rewards.push_back(e.cumulative_reward());
  }
  std::tie(rep.mean, rep.stddev) = mean_std(rep.rewards);
  return rep;
}

double final_window_mean(const std::vector<EpisodeMetrics>& episodes, std::uint64_t total_steps,
                         std::uint64_t window) {
  const std::uint64_t start = total_steps > window ? total_steps - window : 0;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : episodes) {
    if (e.global_step > start) {
      sum += e.cumulative_reward;
      ++n;
    }
  }
  return n > 0 ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

TrackSpec run_track(const RunConfig& cfg) { return resolve_track(cfg.track, cfg.effective_track_seed()); }

namespace {

void write_json_file(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json json_or_nan(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double fraction_mean(const std::vector<EpisodeMetrics>& eps, bool last) {
  if (eps.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t k = std::max<std::size_t>(1, eps.size() / 5);
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += eps[last ? eps.size() - 1 - i : i].cumulative_reward;
  return sum / static_cast<double>(k);
}

DemoDataset obtain_demos(const RunConfig& cfg, const TrackSpec& track) {
  if (!cfg.demos.path.empty()) return load_demos(cfg.demos.path);
  TrackEnv env(track, cfg.env);
  ScriptedExpert expert(track, cfg.intervention.lookahead);
  return collect_demonstrations(expert, env, cfg.demos.n, cfg.seed);
}

void save_single_net(const fs::path& path, const RunConfig& cfg, const nn::DuelingNet& net) {
  nn::DuelingNetPair pair(mix_seed(cfg.seed, 3), nn::AdamConfig{.lr = cfg.agent.lr});
  pair.q1 = net;
  pair.target1 = net;
  save_checkpoint(path, pair, TrainingCounters{});
}

ExperimentResult run_online(const RunConfig& cfg, const TrainHooks& hooks, const fs::path& dir) {
  const TrackSpec track = run_track(cfg);
  TrackEnv env(track, cfg.env);

  std::unique_ptr<InterventionSource> inner;
  InterventionSchedule schedule = cfg.intervention.schedule;
  if (cfg.kind == AgentKind::Iddqn) {
    switch (cfg.intervention.source) {
      case SourceKind::None: break;
      case SourceKind::Scripted: inner = std::make_unique<ScriptedExpert>(track, cfg.intervention.lookahead); break;
      case SourceKind::Trace: inner = std::make_unique<TraceSource>(Trace::load(cfg.intervention.trace_path)); break;
      case SourceKind::Live:
        if (!hooks.mailbox) throw ConfigError("intervention.source: \"live\" is only available under serve");
        inner = std::make_unique<LiveSource>(hooks.mailbox);
        break;
    }
  } else {
    schedule.h_limit = 0;
  }
  std::unique_ptr<RecordingSource> recorder;
  if (inner) recorder = std::make_unique<RecordingSource>(*inner);

  const UpdateRule rule = cfg.kind == AgentKind::Iddqn ? UpdateRule::Interactive : UpdateRule::ClippedDouble;
  AgentConfig agent = cfg.agent;
  if (cfg.kind != AgentKind::Iddqn) agent.schedule = HumanWeightSchedule::constant(0.0);
  Trainer trainer(env, agent, cfg.per, schedule, recorder.get(), rule);

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw StorageError("cannot write " + (dir / "metrics.jsonl").string());
  EvaluativeStore store;
  RunSinks sinks;
  sinks.metrics = &metrics;
  sinks.store = &store;
  sinks.on_step = hooks.on_step;
  sinks.checkpoint_path = dir / "checkpoint.bin";
  sinks.checkpoint_every = cfg.checkpoint_every;

  ExperimentResult res;
  res.checkpoint = dir / "checkpoint.bin";
  double pretrain_match = std::numeric_limits<double>::quiet_NaN();
  try {
    if (cfg.kind == AgentKind::Dqfd) {
      const DemoDataset demos = obtain_demos(cfg, track);
      auto out = dqfd_run(demos, cfg.dqfd, trainer, cfg.total_steps, sinks);
      res.report = std::move(out.report);
      pretrain_match = out.pretrain_match;
    } else {
      res.report = trainer.run(cfg.total_steps, sinks);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error&) {
    save_checkpoint(res.checkpoint, trainer.nets(), trainer.counters());
    store.save(dir / "evaluative.jsonl");
    throw;
  }
  metrics.close();
  save_checkpoint(res.checkpoint, trainer.nets(), trainer.counters());
  store.save(dir / "evaluative.jsonl");
  (recorder ? recorder->trace() : Trace{}).save(dir / "trace.jsonl");

  const auto& eps = res.report.episodes;
  auto& s = res.summary;
  s["kind"] = to_string(cfg.kind);
  s["label"] = cfg.effective_label();
  s["seed"] = cfg.seed;
  s["total_steps"] = cfg.total_steps;
  s["episodes"] = eps.size();
  s["train_steps"] = res.report.counters.train_steps;
  s["intervened_transitions"] = res.report.intervened_transitions;
  s["final_1000_mean"] = json_or_nan(final_window_mean(eps, cfg.total_steps, 1000));
  s["first_20pct_mean"] = json_or_nan(fraction_mean(eps, false));
  s["last_20pct_mean"] = json_or_nan(fraction_mean(eps, true));
  if (cfg.kind == AgentKind::Dqfd) s["pretrain_match"] = json_or_nan(pretrain_match);
  return res;
}

ExperimentResult run_imitation(const RunConfig& cfg, const fs::path& dir) {
  const TrackSpec track = run_track(cfg);
  const DemoDataset demos = obtain_demos(cfg, track);
  nn::DuelingNet net(mix_seed(cfg.seed, 5));
  ExperimentResult res;
  res.checkpoint = dir / "checkpoint.bin";
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw StorageError("cannot write " + (dir / "metrics.jsonl").string());
  auto& s = res.summary;
  s["kind"] = to_string(cfg.kind);
  s["label"] = cfg.effective_label();
  s["seed"] = cfg.seed;
  s["demos"] = demos.size();
  if (cfg.kind == AgentKind::Bc) {
    const BcResult r = bc_train(demos, net, cfg.bc);
    nlohmann::ordered_json line;
    line["phase"] = "bc";
    line["final_loss"] = r.final_loss;
    line["train_accuracy"] = r.train_accuracy;
    metrics << line.dump() << '\n';
    s["final_loss"] = r.final_loss;
    s["train_accuracy"] = r.train_accuracy;
  } else {
    TrackEnv env(track, cfg.env);
    ScriptedExpert expert(track, cfg.intervention.lookahead);
    const HgDaggerResult r = hg_dagger_run(demos, expert, env, cfg.hgdagger, net);
    for (std::size_t i = 0; i < r.added_per_iteration.size(); ++i) {
      nlohmann::ordered_json line;
      line["phase"] = "hgdagger";
      line["iteration"] = i + 1;
      line["added"] = r.added_per_iteration[i];
      metrics << line.dump() << '\n';
    }
    s["aggregated"] = r.aggregated.size();
    s["final_loss"] = r.last.final_loss;
    s["train_accuracy"] = r.last.train_accuracy;
  }
  save_single_net(res.checkpoint, cfg, net);
  return res;
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  const fs::path dir(cfg.out);
  fs::create_directories(dir);
  save_config(dir / "config.json", cfg);
  ExperimentResult res = (cfg.kind == AgentKind::Bc || cfg.kind == AgentKind::HgDagger) ? run_imitation(cfg, dir)
                                                                                         : run_online(cfg, hooks, dir);
  write_json_file(dir / "summary.json", res.summary);
  return res;
}

EvalReport cmd_eval(const fs::path& checkpoint, const std::string& track, std::uint64_t track_seed,
                    const EnvConfig& env, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw ConfigError("episodes: must be > 0");
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint.string());
  const Checkpoint ck = load_checkpoint(checkpoint);
  const std::vector<int> expected{static_cast<int>(kObsDim), 128, 128, kNumActions + 1};
  if (ck.nets.q1.layer_sizes() != expected) {
    throw ShapeError(checkpoint.string() + ": network architecture does not match the dueling Q-network");
  }
  return evaluate_greedy(ck.nets.q1, resolve_track(track, track_seed), env, episodes, seed);
}

std::vector<double> resample(const std::vector<std::pair<std::uint64_t, double>>& points,
                             const std::vector<std::uint64_t>& grid) {
  std::vector<double> out(grid.size(), std::numeric_limits<double>::quiet_NaN());
  if (points.empty()) return out;
  std::size_t k = 0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const auto x = grid[g];
    if (x <= points.front().first) {
      out[g] = points.front().second;
      continue;
    }
    if (x > points.back().first) continue;
    while (k + 1 < points.size() && points[k + 1].first < x) ++k;
    const auto& [x0, y0] = points[k];
    const auto& [x1, y1] = points[k + 1];
    const double t = x1 == x0 ? 1.0 : static_cast<double>(x - x0) / static_cast<double>(x1 - x0);
    out[g] = y0 + t * (y1 - y0);
  }
  return out;
}

namespace {

struct RunSeries {
  std::string label;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::uint64_t, double>> points;
};

RunSeries load_run_series(const fs::path& dir) {
  RunSeries rs;
  const RunConfig cfg = load_config(dir / "config.json");
  rs.label = cfg.effective_label();
  rs.seed = cfg.seed;
  std::ifstream in(dir / "metrics.jsonl");
  if (!in) throw ConfigError("run directory has no metrics: " + dir.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (!j.contains("global_step") || !j.contains("cumulative_reward")) continue;
    rs.points.emplace_back(j.at("global_step").get<std::uint64_t>(), j.at("cumulative_reward").get<double>());
  }
  return rs;
}

std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

SeriesTable compare_runs(const std::vector<fs::path>& run_dirs, std::uint64_t grid_step) {
  if (run_dirs.empty()) throw ConfigError("compare: no run directories given");
  if (grid_step == 0) throw ConfigError("compare: grid step must be > 0");
  std::vector<RunSeries> runs;
  std::uint64_t last = 0;
  for (const auto& d : run_dirs) {
    runs.push_back(load_run_series(d));
    if (!runs.back().points.empty()) last = std::max(last, runs.back().points.back().first);
  }
  SeriesTable t;
  for (std::uint64_t g = grid_step; g <= last; g += grid_step) t.steps.push_back(g);
  std::map<std::string, std::vector<std::vector<double>>> groups;
  std::vector<std::string> order;
  for (const auto& r : runs) {
    if (!groups.contains(r.label)) order.push_back(r.label);
    groups[r.label].push_back(resample(r.points, t.steps));
  }
  for (const auto& label : order) {
    const auto& members = groups[label];
    t.labels.push_back(label);
    std::vector<double> mean(t.steps.size());
    std::vector<double> sd(t.steps.size());
    std::vector<std::size_t> n(t.steps.size());
    for (std::size_t g = 0; g < t.steps.size(); ++g) {
      std::vector<double> vals;
      for (const auto& m : members) {
        if (std::isfinite(m[g])) vals.push_back(m[g]);
      }
      n[g] = vals.size();
      if (vals.empty()) {
        mean[g] = sd[g] = std::numeric_limits<double>::quiet_NaN();
      } else {
        std::tie(mean[g], sd[g]) = mean_std(vals);
      }
    }
    t.mean.push_back(std::move(mean));
    t.stddev.push_back(std::move(sd));
    t.count.push_back(std::move(n));
  }
  return t;
}

void write_series_table(const fs::path& path, const SeriesTable& t) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << "step";
  for (const auto& l : t.labels) out << '\t' << l << "_mean\t" << l << "_std\t" << l << "_n";
  const bool diff = t.labels.size() == 2;
  if (diff) out << "\tdiff";
  out << '\n';
  for (std::size_t g = 0; g < t.steps.size(); ++g) {
    out << t.steps[g];
    for (std::size_t k = 0; k < t.labels.size(); ++k) {
      out << '\t' << fmt(t.mean[k][g]) << '\t' << fmt(t.stddev[k][g]) << '\t' << t.count[k][g];
    }
    if (diff) out << '\t' << fmt(t.mean[0][g] - t.mean[1][g]);
    out << '\n';
  }
}

void cmd_plot(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::uint64_t grid_step) {
  fs::create_directories(out_dir);
  const SeriesTable t = compare_runs(run_dirs, grid_step);
  write_series_table(out_dir / "merged.tsv", t);
  for (std::size_t k = 0; k < t.labels.size(); ++k) {
    std::ofstream out(out_dir / ("series_" + t.labels[k] + ".tsv"), std::ios::trunc);
    out << "step\tmean\tstd\tn\n";
    for (std::size_t g = 0; g < t.steps.size(); ++g) {
      out << t.steps[g] << '\t' << fmt(t.mean[k][g]) << '\t' << fmt(t.stddev[k][g]) << '\t' << t.count[k][g] << '\n';
    }
  }
  for (const auto& d : run_dirs) {
    const RunSeries rs = load_run_series(d);
    std::ofstream out(out_dir / ("episodes_" + rs.label + "_seed" + std::to_string(rs.seed) + ".tsv"),
                      std::ios::trunc);
    out << "global_step\tcumulative_reward\n";
    for (const auto& [x, y] : rs.points) out << x << '\t' << fmt(y) << '\n';
    const fs::path verdicts = d / "epm" / "verdicts.jsonl";
    if (fs::exists(verdicts)) {
      std::ifstream in(verdicts);
      std::ofstream v(out_dir / ("verdicts_" + rs.label + "_seed" + std::to_string(rs.seed) + ".tsv"),
                      std::ios::trunc);
      v << "window\tsum_r_human\tsum_r_agent\tagrees\n";
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        v << j.at("window").get<std::uint64_t>() << '\t' << fmt(j.at("sum_r_human").get<double>()) << '\t'
          << fmt(j.at("sum_r_agent").get<double>()) << '\t' << (j.at("agrees").get<bool>() ? 1 : 0) << '\n';
      }
    }
  }
}

std::vector<fs::path> cmd_sweep(const nlohmann::json& base_config, const nlohmann::ordered_json& grid,
                                const fs::path& out_dir) {
  if (!grid.is_object() || grid.empty()) throw ConfigError("sweep grid: must be a non-empty object");
  std::vector<std::string> keys;
  std::vector<std::vector<nlohmann::json>> values;
  for (const auto& [k, v] : grid.items()) {
    if (!v.is_array() || v.empty()) throw ConfigError("sweep grid." + k + ": must be a non-empty array");
    keys.push_back(k);
    values.emplace_back(v.begin(), v.end());
  }
  const RunConfig base = config_from_json(base_config);
  std::size_t cells = 1;
  for (const auto& v : values) cells *= v.size();
  fs::create_directories(out_dir);
  std::vector<fs::path> dirs;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    nlohmann::json j = base_config;
    nlohmann::ordered_json params;
    std::string label;
    std::vector<std::size_t> pick(keys.size());
    std::size_t rem = cell;
    for (std::size_t k = keys.size(); k-- > 0;) {
      pick[k] = rem % values[k].size();
      rem /= values[k].size();
    }
    for (std::size_t k = 0; k < keys.size(); ++k) {
      set_config_field(j, keys[k], values[k][pick[k]]);
      params[keys[k]] = values[k][pick[k]];
    }
    for (const auto& [k, v] : params.items()) label += (label.empty() ? "" : ",") + k + "=" + v.dump();
    const fs::path dir = out_dir / ("cell_" + std::to_string(cell));
    j["seed"] = base.seed + cell;
    j["out"] = dir.string();
    if (base.label.empty()) j["label"] = label;
    const RunConfig cfg = config_from_json(j);
    run_experiment(cfg);
    dirs.push_back(dir);
    index.push_back({{"cell", cell}, {"seed", cfg.seed}, {"params", params}, {"out", dir.string()}});
  }
  write_json_file(out_dir / "sweep.json", index);
  return dirs;
}

std::vector<EvaluativeRecord> load_store_records(const fs::path& run_dir_or_file) {
  const fs::path file = fs::is_directory(run_dir_or_file) ? run_dir_or_file / "evaluative.jsonl" : run_dir_or_file;
  if (!fs::exists(file)) throw ConfigError("evaluative store not found: " + file.string());
  return EvaluativeStore::load(file).snapshot();
}

EpmTrainResult cmd_epm_train(const std::vector<fs::path>& stores, const EpmConfig& cfg, const fs::path& out_dir) {
  if (stores.empty()) throw ConfigError("epm train: no evaluative stores given");
  std::vector<EvaluativeRecord> records;
  for (const auto& s : stores) {
    auto r = load_store_records(s);
    records.insert(records.end(), r.begin(), r.end());
  }
  const auto samples = samples_from_records(records);
  EpmTrainResult res;
  const PredictiveModel pm = train_predictive(samples, cfg, &res.predictive);
  const CrashClassifier cm = train_classifier(samples, cfg, &res.classifier);
  fs::create_directories(out_dir);
  save_predictive(out_dir / "predictive.json", pm);
  save_classifier(out_dir / "classifier.json", cm);
  nlohmann::ordered_json m;
  m["transitions"] = samples.size();
  m["predictive"] = {{"state_mae", res.predictive.state_mae},
                     {"reward_mae", res.predictive.reward_mae},
                     {"train_loss", res.predictive.train_loss},
                     {"n_train", res.predictive.n_train},
                     {"n_holdout", res.predictive.n_holdout}};
  m["classifier"] = {{"accuracy", res.classifier.accuracy},
                     {"f1", res.classifier.f1},
                     {"precision", res.classifier.precision},
                     {"recall", res.classifier.recall},
                     {"n_train", res.classifier.n_train},
                     {"n_holdout", res.classifier.n_holdout},
                     {"holdout_crashes", res.classifier.holdout_crashes}};
  write_json_file(out_dir / "epm_metrics.json", m);
  return res;
}

EpmReport cmd_epm_eval(const EpmEvalInputs& in, const EpmConfig& cfg, const fs::path& out_dir) {
  const auto records = load_store_records(in.store);
  std::string track_name = in.track;
  std::uint64_t track_seed = in.track_seed;
  EnvConfig env = in.env;
  fs::path checkpoint = in.checkpoint;
  if (fs::is_directory(in.store)) {
    const RunConfig rc = load_config(in.store / "config.json");
    if (track_name.empty()) {
      track_name = rc.track;
      track_seed = rc.effective_track_seed();
      env = rc.env;
    }
    if (checkpoint.empty()) checkpoint = in.store / "checkpoint.bin";
  }
  if (checkpoint.empty()) throw ConfigError("epm eval: --checkpoint is required when the store is a file");
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint.string());
  const Checkpoint ck = load_checkpoint(checkpoint);

  PredictiveModel pm;
  CrashClassifier cm;
  std::optional<TrackSpec> track;
  EpmModels models;
  if (cfg.oracle_mode) {
    if (track_name.empty()) throw ConfigError("epm eval: oracle mode needs a track");
    track = resolve_track(track_name, track_seed);
    models.track = &*track;
    models.env = env;
  } else {
    pm = load_predictive(in.models_dir / "predictive.json");
    cm = load_classifier(in.models_dir / "classifier.json");
    models.predictive = &pm;
    models.classifier = &cm;
  }
  const EpmReport rep = evaluate_interventions(records, models, greedy_policy(ck.nets.q1), cfg);
  fs::create_directories(out_dir);
  write_verdicts(out_dir / "verdicts.jsonl", out_dir / "epm_summary.json", rep);
  return rep;
}

DemoDataset cmd_demo_collect(const RunConfig& cfg, std::size_t n, const fs::path& out_file) {
  const TrackSpec track = run_track(cfg);
  TrackEnv env(track, cfg.env);
  ScriptedExpert expert(track, cfg.intervention.lookahead);
  DemoDataset d = collect_demonstrations(expert, env, n, cfg.seed);
  if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
  save_demos(out_file, d);
  return d;
}

}  // namespace hitl
