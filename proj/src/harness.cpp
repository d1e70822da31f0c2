#include "mpcmfrl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

namespace fs = std::filesystem;

namespace {

// Stream tags for Rng::Derive.
enum : std::uint64_t {
  kTagInitPolicy = 1,
  kTagInitValue,
  kTagInitModel,
  kTagCollect = 10,
  kTagValueFit,
  kTagModelTrain,
  kTagAuxCollect,
  kTagEvalStart = 20,
  kTagEvalAct,
  kTagTestSet = 30,
};

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double ParseNum(const std::string& s) { return std::strtod(s.c_str(), nullptr); }

std::string Hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t Fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  out.push_back(cell);
  return out;
}

std::string CsvField(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void WriteFileAtomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string ReadFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::vector<std::vector<std::string>> ReadCsvRows(const fs::path& path,
                                                  std::vector<std::string>* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  *header = SplitCsvLine(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(SplitCsvLine(line));
    if (rows.back().size() != header->size()) {
      throw IoError(path.string() + ": ragged row");
    }
  }
  return rows;
}

Mat StackRows(const std::vector<Trajectory>& trajectories, bool next,
              int dim) {
  std::size_t n = 0;
  for (const auto& tr : trajectories) n += tr.size();
  Mat out(static_cast<Eigen::Index>(n), dim);
  Eigen::Index i = 0;
  for (const auto& tr : trajectories) {
    for (const auto& t : tr) out.row(i++) = (next ? t.next_state : t.state).transpose();
  }
  return out;
}

Mat StackProposed(const std::vector<std::vector<Vec>>& proposed, int dim) {
  std::size_t n = 0;
  for (const auto& p : proposed) n += p.size();
  Mat out(static_cast<Eigen::Index>(n), dim);
  Eigen::Index i = 0;
  for (const auto& p : proposed) {
    for (const auto& a : p) out.row(i++) = a.transpose();
  }
  return out;
}

void UpdatePolicy(ExperimentState& state, const RolloutBatch& batch) {
  const AgentConfig& agent = state.config.agent;
  const AdvantageEstimate est = ComputeReturnsAndAdvantages(
      batch.trajectories, state.value, agent.discount, agent.gae_lambda);
  const Mat states = StackRows(batch.trajectories, false, state.env->state_dim());
  const Mat actions = StackProposed(batch.proposed_actions, state.env->action_dim());

  TrpoLogEntry entry;
  entry.iteration = state.iteration;
  entry.steps = state.steps;
  entry.diagnostics = TrpoUpdate(state.policy, states, actions, est.advantages, agent);
  Rng fit_rng = Rng::Derive(state.seed, {kTagValueFit, static_cast<std::uint64_t>(state.iteration)});
  entry.value_loss = FitValue(state.value, states, est.returns, agent.value_epochs,
                              agent.value_batch_size, fit_rng);
  double total = 0.0;
  for (double r : batch.episode_returns) total += r;
  entry.mean_episode_return = total / static_cast<double>(batch.episode_returns.size());
  state.trpo_log.push_back(entry);
}

nlohmann::json TrpoLogToJson(const std::vector<TrpoLogEntry>& log) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : log) {
    const auto& d = e.diagnostics;
    out.push_back({{"iteration", e.iteration},
                   {"steps", e.steps},
                   {"accepted", d.accepted},
                   {"surrogate_improvement", d.surrogate_improvement},
                   {"kl", d.kl},
                   {"expected_improvement", d.expected_improvement},
                   {"gradient_norm", d.gradient_norm},
                   {"backtracks", d.backtracks},
                   {"value_loss", e.value_loss},
                   {"mean_episode_return", e.mean_episode_return}});
  }
  return out;
}

std::vector<TrpoLogEntry> TrpoLogFromJson(const nlohmann::json& j) {
  std::vector<TrpoLogEntry> out;
  for (const auto& item : j) {
    TrpoLogEntry e;
    e.iteration = item.at("iteration").get<long>();
    e.steps = item.at("steps").get<long>();
    e.diagnostics.accepted = item.at("accepted").get<bool>();
    e.diagnostics.surrogate_improvement = item.at("surrogate_improvement").get<double>();
    e.diagnostics.kl = item.at("kl").get<double>();
    e.diagnostics.expected_improvement = item.at("expected_improvement").get<double>();
    e.diagnostics.gradient_norm = item.at("gradient_norm").get<double>();
    e.diagnostics.backtracks = item.at("backtracks").get<int>();
    e.value_loss = item.at("value_loss").get<double>();
    e.mean_episode_return = item.at("mean_episode_return").get<double>();
    out.push_back(e);
  }
  return out;
}

std::string TrpoLogCsv(const std::vector<TrpoLogEntry>& log) {
  std::ostringstream o;
  o << "iteration,steps,accepted,kl,surrogate_improvement,expected_improvement,"
       "gradient_norm,backtracks,value_loss,mean_episode_return\n";
  for (const auto& e : log) {
    const auto& d = e.diagnostics;
    o << e.iteration << "," << e.steps << "," << (d.accepted ? 1 : 0) << ","
      << Num(d.kl) << "," << Num(d.surrogate_improvement) << ","
      << Num(d.expected_improvement) << "," << Num(d.gradient_norm) << ","
      << d.backtracks << "," << Num(e.value_loss) << "," << Num(e.mean_episode_return)
      << "\n";
  }
  return o.str();
}

std::string EvalsCsvText(const std::vector<EvalRecord>& records) {
  std::size_t width = 0;
  for (const auto& r : records) width = std::max(width, r.returns.size());
  std::ostringstream o;
  o << "steps,seed";
  for (std::size_t i = 0; i < width; ++i) o << ",ret_" << i;
  o << ",mean\n";
  for (const auto& r : records) {
    if (r.returns.size() != width) throw StateError("evals: ragged episode counts");
    o << r.steps << "," << r.seed;
    for (double v : r.returns) o << "," << Num(v);
    o << "," << Num(r.mean) << "\n";
  }
  return o.str();
}

std::string ModelErrorCsvText(const std::vector<ModelErrorRecord>& records) {
  std::ostringstream o;
  o << "steps,seed,held_out_error\n";
  for (const auto& r : records) o << r.steps << "," << r.seed << "," << Num(r.error) << "\n";
  return o.str();
}

std::string CurveCsvText(const std::vector<CurvePoint>& curve) {
  std::ostringstream o;
  o << "steps,mean,ci_low,ci_high\n";
  for (const auto& p : curve) {
    o << p.steps << "," << Num(p.mean) << "," << Num(p.ci_low) << "," << Num(p.ci_high)
      << "\n";
  }
  return o.str();
}

std::string Elapsed(std::chrono::steady_clock::time_point start) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1fs", s);
  return buf;
}

struct Group {
  std::string key;
  std::vector<std::size_t> members;
};

}  // namespace

// -- statistics -- //

double Quantile(std::vector<double> values, double q) {
  if (values.empty()) throw StateError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return values[lo];
  return values[lo] + frac * (values[hi] - values[lo]);
}

Interval BootstrapMeanCi(std::span<const double> values, int resamples, Rng& rng,
                         double confidence) {
  if (values.empty()) throw StateError("bootstrap of an empty sample");
  if (resamples < 1) throw ConfigError("bootstrap: resamples must be >= 1");
  const std::size_t n = values.size();
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += values[rng.Index(n)];
    m = sum / static_cast<double>(n);
  }
  const double tail = 0.5 * (1.0 - confidence);
  return {Quantile(means, tail), Quantile(means, 1.0 - tail)};
}

std::vector<CurvePoint> BestSoFarCurve(
    const std::vector<std::vector<EvalRecord>>& records_per_seed, int resamples,
    std::uint64_t bootstrap_seed) {
  if (records_per_seed.empty() || records_per_seed.front().empty()) {
    throw StateError("best_so_far_curve: no records");
  }
  const std::size_t points = records_per_seed.front().size();
  for (const auto& seed_records : records_per_seed) {
    if (seed_records.size() != points) {
      throw StateError("best_so_far_curve: seeds have different checkpoint counts");
    }
    for (std::size_t i = 0; i < points; ++i) {
      if (seed_records[i].steps != records_per_seed.front()[i].steps) {
        throw StateError("best_so_far_curve: seeds have different checkpoint steps");
      }
      if (i > 0 && seed_records[i].steps <= seed_records[i - 1].steps) {
        throw StateError("best_so_far_curve: records not sorted by steps");
      }
    }
  }
  std::vector<double> running(records_per_seed.size(),
                              -std::numeric_limits<double>::infinity());
  std::vector<CurvePoint> curve;
  for (std::size_t i = 0; i < points; ++i) {
    CurvePoint p;
    p.steps = records_per_seed.front()[i].steps;
    for (std::size_t s = 0; s < records_per_seed.size(); ++s) {
      running[s] = std::max(running[s], records_per_seed[s][i].mean);
    }
    p.best_so_far = running;
    p.mean = std::accumulate(running.begin(), running.end(), 0.0) /
             static_cast<double>(running.size());
    Rng rng = Rng::Derive(bootstrap_seed, {static_cast<std::uint64_t>(p.steps)});
    const Interval ci = BootstrapMeanCi(running, resamples, rng);
    p.ci_low = ci.low;
    p.ci_high = ci.high;
    curve.push_back(std::move(p));
  }
  return curve;
}

// -- evaluation -- //

EvalRecord EvaluateOffline(const Environment& env, const ExperimentConfig& config,
                           const Snapshots& snapshots, std::uint64_t seed,
                           long steps) {
  std::optional<PlannerConfig> planner;
  ActionSource source;
  switch (config.method) {
    case Method::kMfStochastic:
    case Method::kMfDeterministic:
      if (!snapshots.policy) throw StateError("evaluate: method needs a policy snapshot");
      source = config.method == Method::kMfStochastic
                   ? PolicyActionSource(*snapshots.policy)
                   : MeanActionSource(*snapshots.policy);
      break;
    default:
      if (!snapshots.model) throw StateError("evaluate: method needs a model snapshot");
      planner = config.planner.Bind(snapshots.policy, snapshots.value);
      source = PlannerActionSource(*snapshots.model, env, *planner);
      break;
  }
  EvalRecord record;
  record.seed = seed;
  record.steps = steps;
  const auto tag_steps = static_cast<std::uint64_t>(steps);
  for (int e = 0; e < config.eval_episodes; ++e) {
    const auto episode = static_cast<std::uint64_t>(e);
    Rng start_rng = Rng::Derive(seed, {kTagEvalStart, tag_steps, episode});
    Rng act_rng = Rng::Derive(seed, {kTagEvalAct, tag_steps, episode});
    const Trajectory traj = RunEpisode(env, source, env.Reset(start_rng.engine()()), act_rng);
    double total = 0.0;
    for (const auto& t : traj) total += t.reward;
    record.returns.push_back(total);
  }
  record.mean = std::accumulate(record.returns.begin(), record.returns.end(), 0.0) /
                static_cast<double>(record.returns.size());
  return record;
}

// -- training -- //

Snapshots ExperimentState::Freeze() const {
  Snapshots s;
  s.policy = std::make_shared<const GaussianPolicy>(policy);
  s.value = std::make_shared<const ValueFunction>(value);
  s.model = std::make_shared<const DynamicsModel>(model);
  return s;
}

ExperimentState InitializeExperiment(const ExperimentConfig& config,
                                     std::uint64_t seed, bool train_policy,
                                     bool train_model) {
  config.Validate();
  ExperimentState state;
  state.config = config;
  state.scheme = config.TrainingCollector();
  state.train_policy = train_policy;
  state.train_model = train_model;
  state.seed = seed;
  state.env = MakeEnvironment(config.env);
  const Environment& env = *state.env;

  Rng policy_rng = Rng::Derive(seed, {kTagInitPolicy});
  state.policy = GaussianPolicy::Create(env.state_dim(), env.action_dim(),
                                        config.agent.policy_hidden, policy_rng,
                                        config.agent.init_log_std);
  Rng value_rng = Rng::Derive(seed, {kTagInitValue});
  state.value = ValueFunction::Create(env.state_dim(), config.agent.value_hidden,
                                      value_rng, config.agent.value_adam);
  Rng model_rng = Rng::Derive(seed, {kTagInitModel});
  state.model = DynamicsModel(env, config.model, model_rng);
  state.dataset = TransitionDataset(env.state_dim(), env.action_dim());

  if (state.scheme == Collector::kRandomMpc) {
    const long horizon = env.horizon();
    const double episodes =
        config.initial_random_fraction * static_cast<double>(config.total_steps) /
        static_cast<double>(horizon);
    state.initial_random_steps = std::lround(episodes) * horizon;
  }
  return state;
}

void TrainIteration(ExperimentState& state, long step_cap) {
  const Environment& env = *state.env;
  const ExperimentConfig& config = state.config;
  const long horizon = env.horizon();
  long episodes = std::min<long>(config.agent.episodes_per_iteration, step_cap / horizon);
  const bool random_phase =
      state.scheme == Collector::kRandomMpc && state.steps < state.initial_random_steps;
  if (random_phase) {
    episodes = std::min(episodes, (state.initial_random_steps - state.steps) / horizon);
  }
  if (episodes < 1) throw StateError("train_iteration: no whole episode fits the step cap");
  const auto n_steps = static_cast<std::size_t>(episodes * horizon);
  const auto it = static_cast<std::uint64_t>(state.iteration);

  // (1) collect
  Rng collect_rng = Rng::Derive(state.seed, {kTagCollect, it});
  RolloutBatch batch;
  if (state.scheme == Collector::kPolicy) {
    batch = CollectRollouts(env, PolicyActionSource(state.policy), n_steps, collect_rng);
  } else if (random_phase) {
    batch = CollectRollouts(env, UniformActionSource(env), n_steps, collect_rng);
  } else {
    const PlannerConfig planner = config.AggregationPlanner().Bind(
        std::make_shared<const GaussianPolicy>(state.policy),
        std::make_shared<const ValueFunction>(state.value));
    batch = CollectRollouts(env, PlannerActionSource(state.model, env, planner), n_steps,
                            collect_rng);
  }
  state.steps += static_cast<long>(batch.num_steps());

  // (2) policy and value
  if (state.train_policy && config.mfrl_updates) {
    if (state.scheme == Collector::kPolicy) {
      UpdatePolicy(state, batch);
    } else {
      Rng aux_rng = Rng::Derive(state.seed, {kTagAuxCollect, it});
      const RolloutBatch aux = CollectRollouts(
          env, PolicyActionSource(state.policy),
          static_cast<std::size_t>(config.agent.episodes_per_iteration * horizon), aux_rng);
      state.aux_steps += static_cast<long>(aux.num_steps());
      UpdatePolicy(state, aux);
    }
  }

  // (3) aggregate and fit the model
  state.dataset.Append(batch.trajectories);
  if (state.train_model) {
    Rng model_rng = Rng::Derive(state.seed, {kTagModelTrain, it});
    state.last_model_report = state.model.Train(state.dataset, config.model.epochs,
                                                config.model.batch_size, model_rng);
  }
  ++state.iteration;
}

std::vector<long> CheckpointSteps(const ExperimentConfig& config) {
  std::vector<long> out;
  for (long s = config.eval_period; s < config.total_steps; s += config.eval_period) {
    out.push_back(s);
  }
  out.push_back(config.total_steps);
  return out;
}

// -- checkpoints -- //

void SaveCheckpoint(const std::string& dir, const ExperimentState& state) {
  const fs::path d(dir);
  WriteFileAtomic(d / "config.txt", state.config.ToText());
  WriteFileAtomic(d / "policy.json", state.policy.ToJson().dump());
  WriteFileAtomic(d / "value.json", state.value.ToJson().dump());
  WriteFileAtomic(d / "model.json", state.model.ToJson().dump());
  const nlohmann::json meta = {{"seed", state.seed},
                               {"steps", state.steps},
                               {"iteration", state.iteration},
                               {"env", state.config.env}};
  WriteFileAtomic(d / "meta.json", meta.dump(2) + "\n");
}

LoadedCheckpoint LoadCheckpoint(const std::string& dir) {
  const fs::path d(dir);
  if (!fs::is_directory(d)) throw IoError("no checkpoint directory " + dir);
  LoadedCheckpoint out;
  out.config = LoadExperimentConfig((d / "config.txt").string());
  try {
    const auto meta = nlohmann::json::parse(ReadFile(d / "meta.json"));
    out.seed = meta.at("seed").get<std::uint64_t>();
    out.steps = meta.at("steps").get<long>();
    out.snapshots.policy = std::make_shared<const GaussianPolicy>(
        GaussianPolicy::FromJson(nlohmann::json::parse(ReadFile(d / "policy.json"))));
    out.snapshots.value = std::make_shared<const ValueFunction>(
        ValueFunction::FromJson(nlohmann::json::parse(ReadFile(d / "value.json"))));
    out.snapshots.model = std::make_shared<const DynamicsModel>(
        DynamicsModel::FromJson(nlohmann::json::parse(ReadFile(d / "model.json"))));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint " + dir + ": " + e.what());
  }
  return out;
}

namespace {

struct SeedRecords {
  std::map<std::size_t, std::vector<EvalRecord>> evals;
  std::map<std::size_t, std::vector<ModelErrorRecord>> errors;
};

void SaveState(const fs::path& seed_dir, const ExperimentState& state,
               const std::vector<ExperimentConfig>& configs, const Group& group,
               const SeedRecords& records) {
  for (std::size_t m : group.members) {
    const std::string name = LabelDirName(configs[m].Label()) + ".csv";
    WriteFileAtomic(seed_dir / "evals" / name, EvalsCsvText(records.evals.at(m)));
    if (records.errors.count(m)) {
      WriteFileAtomic(seed_dir / "model_error" / name,
                      ModelErrorCsvText(records.errors.at(m)));
    }
  }
  WriteFileAtomic(seed_dir / "trpo.csv", TrpoLogCsv(state.trpo_log));
  const fs::path dataset_tmp = seed_dir / "dataset.csv.tmp";
  state.dataset.SaveCsv(dataset_tmp.string());
  fs::rename(dataset_tmp, seed_dir / "dataset.csv");
  SaveCheckpoint((seed_dir / ("ckpt-" + std::to_string(state.steps))).string(), state);

  const nlohmann::json j = {{"training_key", state.config.TrainingKey()},
                            {"seed", state.seed},
                            {"steps", state.steps},
                            {"aux_steps", state.aux_steps},
                            {"iteration", state.iteration},
                            {"checkpoint_index", state.checkpoint_index},
                            {"initial_random_steps", state.initial_random_steps},
                            {"policy", state.policy.ToJson()},
                            {"value", state.value.ToJson()},
                            {"model", state.model.ToJson()},
                            {"trpo_log", TrpoLogToJson(state.trpo_log)}};
  // Written last: the other files may run ahead of it but never behind.
  WriteFileAtomic(seed_dir / "state.json", j.dump());
}

void LoadState(const fs::path& seed_dir, ExperimentState& state,
               const std::vector<ExperimentConfig>& configs, const Group& group,
               SeedRecords& records) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ReadFile(seed_dir / "state.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt state " + (seed_dir / "state.json").string() + ": " + e.what());
  }
  if (j.at("training_key").get<std::string>() != state.config.TrainingKey()) {
    throw StateError("cannot resume " + seed_dir.string() +
                     ": training configuration changed");
  }
  state.steps = j.at("steps").get<long>();
  state.aux_steps = j.at("aux_steps").get<long>();
  state.iteration = j.at("iteration").get<long>();
  state.checkpoint_index = j.at("checkpoint_index").get<int>();
  state.initial_random_steps = j.at("initial_random_steps").get<long>();
  state.policy = GaussianPolicy::FromJson(j.at("policy"));
  state.value = ValueFunction::FromJson(j.at("value"));
  state.model = DynamicsModel::FromJson(j.at("model"));
  state.trpo_log = TrpoLogFromJson(j.at("trpo_log"));

  TransitionDataset full = TransitionDataset::LoadCsv(
      (seed_dir / "dataset.csv").string(), state.env->state_dim(), state.env->action_dim());
  if (full.size() < static_cast<std::size_t>(state.steps)) {
    throw StateError("cannot resume " + seed_dir.string() + ": dataset is behind the state");
  }
  for (std::size_t i = 0; i < static_cast<std::size_t>(state.steps); ++i) {
    state.dataset.Append(full[i]);
  }

  const auto done = static_cast<std::size_t>(state.checkpoint_index);
  for (std::size_t m : group.members) {
    const std::string name = LabelDirName(configs[m].Label()) + ".csv";
    const fs::path evals_path = seed_dir / "evals" / name;
    std::vector<EvalRecord> evals =
        fs::exists(evals_path) ? ReadEvalsCsv(evals_path.string()) : std::vector<EvalRecord>{};
    if (evals.size() < done) {
      throw StateError("cannot resume " + seed_dir.string() + ": no evaluations for " +
                       configs[m].Label());
    }
    evals.resize(done);
    records.evals[m] = std::move(evals);
    if (configs[m].record_model_error) {
      const fs::path err_path = seed_dir / "model_error" / name;
      std::vector<ModelErrorRecord> errs = fs::exists(err_path)
                                               ? ReadModelErrorCsv(err_path.string())
                                               : std::vector<ModelErrorRecord>{};
      if (errs.size() < done) {
        throw StateError("cannot resume " + seed_dir.string() + ": no model errors for " +
                         configs[m].Label());
      }
      errs.resize(done);
      records.errors[m] = std::move(errs);
    }
  }
}

void WriteLabelOutputs(const fs::path& root, LabelResult& result) {
  const ExperimentConfig& c = result.config;
  const fs::path dir = root / c.env / LabelDirName(c.Label());
  WriteFileAtomic(dir / "label.txt", c.Label() + "\n");
  WriteFileAtomic(dir / "config.txt", c.ToText());

  std::vector<EvalRecord> all;
  std::vector<std::vector<EvalRecord>> per_seed;
  std::vector<ModelErrorRecord> errors;
  for (std::uint64_t seed : c.seeds) {
    const auto it = result.evals.find(seed);
    if (it == result.evals.end() || it->second.empty()) continue;
    all.insert(all.end(), it->second.begin(), it->second.end());
    per_seed.push_back(it->second);
    if (const auto e = result.model_errors.find(seed); e != result.model_errors.end()) {
      errors.insert(errors.end(), e->second.begin(), e->second.end());
    }
  }
  WriteFileAtomic(dir / "evals.csv", EvalsCsvText(all));
  if (c.record_model_error) WriteFileAtomic(dir / "model_error.csv", ModelErrorCsvText(errors));
  result.curve.clear();
  if (!per_seed.empty()) {
    std::size_t common = per_seed.front().size();
    for (const auto& s : per_seed) common = std::min(common, s.size());
    for (auto& s : per_seed) s.resize(common);
    if (common > 0) {
      result.curve = BestSoFarCurve(per_seed, c.bootstrap_resamples, c.bootstrap_seed);
    }
  }
  WriteFileAtomic(dir / "curve.csv", CurveCsvText(result.curve));
}

}  // namespace

// -- orchestration -- //

const LabelResult& RunSummary::Find(const std::string& label) const {
  for (const auto& r : results) {
    if (r.config.Label() == label) return r;
  }
  throw StateError("no results for label " + label);
}

std::vector<Transition> BuildTestSet(const ExperimentConfig& config,
                                     const std::string& output_root, std::ostream* log) {
  ExperimentConfig ref_policy = config;
  ref_policy.method = Method::kMpcMfrl;
  ref_policy.collector = Collector::kPolicy;
  ref_policy.planner = DefaultPlanner(Method::kMpcMfrl);
  ExperimentConfig ref_random = ref_policy;
  ref_random.collector = Collector::kRandomMpc;

  const std::string key = ref_policy.TrainingKey() + "|" + ref_random.TrainingKey() +
                          "|test_seed=" + std::to_string(config.test_seed) +
                          "|size=" + std::to_string(config.test_set_size);
  const fs::path path = fs::path(output_root) / config.env / ("test-set-" + Hex(Fnv1a(key)) + ".csv");
  const EnvPtr env = MakeEnvironment(config.env);
  if (fs::exists(path)) {
    return TransitionDataset::LoadCsv(path.string(), env->state_dim(), env->action_dim())
        .transitions();
  }

  const auto start = std::chrono::steady_clock::now();
  std::vector<Transition> test_set;
  const std::size_t half = static_cast<std::size_t>(config.test_set_size) / 2;
  Rng pick = Rng::Derive(config.test_seed, {kTagTestSet});
  for (const ExperimentConfig* ref : {&ref_policy, &ref_random}) {
    const bool policy_scheme = ref->collector == Collector::kPolicy;
    ExperimentState state =
        InitializeExperiment(*ref, config.test_seed, policy_scheme, !policy_scheme);
    while (state.steps < ref->total_steps) TrainIteration(state, ref->total_steps - state.steps);
    std::vector<std::size_t> order(state.dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), pick.engine());
    for (std::size_t i = 0; i < std::min(half, order.size()); ++i) {
      test_set.push_back(state.dataset[order[i]]);
    }
    if (log) {
      *log << "[" << config.env << "] test-set reference run (" << CollectorName(ref->collector)
           << ") done, " << Elapsed(start) << std::endl;
    }
  }
  TransitionDataset out(env->state_dim(), env->action_dim());
  for (const auto& t : test_set) out.Append(t);
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  out.SaveCsv(tmp.string());
  fs::rename(tmp, path);
  return test_set;
}

RunSummary RunExperiments(const std::vector<ExperimentConfig>& configs,
                          const RunOptions& options) {
  if (configs.empty()) throw ConfigError("run: no experiment configs");
  std::set<std::string> labels;
  for (const auto& c : configs) {
    c.Validate();
    if (!labels.insert(c.env + "/" + LabelDirName(c.Label())).second) {
      throw ConfigError("run: duplicate label " + c.Label() + " for env " + c.env);
    }
  }

  RunSummary summary;
  summary.output_root = options.output_root.empty()
                            ? ResolveOutputDir(configs.front().output_dir)
                            : options.output_root;
  const fs::path root(summary.output_root);
  for (const auto& c : configs) summary.results.push_back(LabelResult{c, {}, {}, {}});

  std::vector<Group> groups;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    std::string seeds;
    for (auto s : configs[i].seeds) seeds += std::to_string(s) + ",";
    const std::string key = configs[i].TrainingKey() + "|seeds=" + seeds;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const Group& g) { return g.key == key; });
    if (it == groups.end()) {
      groups.push_back(Group{key, {i}});
    } else {
      it->members.push_back(i);
    }
  }

  int checkpoints_done = 0;
  bool stopped = false;
  bool truncated = false;
  for (const Group& group : groups) {
    if (stopped) break;
    const ExperimentConfig& base = configs[group.members.front()];
    bool train_policy = base.TrainingCollector() == Collector::kPolicy;
    bool train_model = false;
    bool record_error = false;
    for (std::size_t m : group.members) {
      train_policy = train_policy || configs[m].TrainsPolicy();
      train_model = train_model || configs[m].UsesModel() || configs[m].record_model_error;
      record_error = record_error || configs[m].record_model_error;
    }
    std::vector<Transition> test_set;
    if (record_error) test_set = BuildTestSet(base, summary.output_root, options.log);

    const std::string group_name = "train-" + Hex(Fnv1a(group.key));
    const fs::path group_dir = root / base.env / group_name;
    WriteFileAtomic(group_dir / "key.txt", group.key + "\n");

    for (std::uint64_t seed : base.seeds) {
      if (options.only_seed && *options.only_seed != seed) continue;
      const fs::path seed_dir = group_dir / ("seed-" + std::to_string(seed));
      ExperimentState state = InitializeExperiment(base, seed, train_policy, train_model);
      SeedRecords records;
      for (std::size_t m : group.members) {
        records.evals[m];
        if (configs[m].record_model_error) records.errors[m];
      }
      if (options.resume && fs::exists(seed_dir / "state.json")) {
        LoadState(seed_dir, state, configs, group, records);
      } else {
        fs::remove_all(seed_dir);
        fs::create_directories(seed_dir);
      }

      const auto start = std::chrono::steady_clock::now();
      const std::vector<long> checkpoints = CheckpointSteps(base);
      while (!stopped && state.checkpoint_index < static_cast<int>(checkpoints.size())) {
        const long target = checkpoints[static_cast<std::size_t>(state.checkpoint_index)];
        if (options.stop_at_steps >= 0 && target > options.stop_at_steps) {
          truncated = true;
          break;
        }
        while (state.steps < target) TrainIteration(state, target - state.steps);

        const Snapshots snapshots = state.Freeze();
        std::ostringstream line;
        line << "[" << base.env << "/" << group_name.substr(0, 14) << " seed " << seed
             << "] steps " << state.steps;
        for (std::size_t m : group.members) {
          EvalRecord rec = EvaluateOffline(*state.env, configs[m], snapshots, seed, state.steps);
          char mean[32];
          std::snprintf(mean, sizeof(mean), "%.1f", rec.mean);
          line << " | " << configs[m].Label() << " " << mean;
          records.evals[m].push_back(std::move(rec));
        }
        if (!test_set.empty()) {
          const double err = HeldOutError(state.model, test_set);
          line << " | model error " << err;
          for (std::size_t m : group.members) {
            if (configs[m].record_model_error) {
              records.errors[m].push_back(ModelErrorRecord{seed, state.steps, err});
            }
          }
        }
        ++state.checkpoint_index;
        SaveState(seed_dir, state, configs, group, records);
        if (options.log) *options.log << line.str() << " (" << Elapsed(start) << ")" << std::endl;
        ++checkpoints_done;
        if (options.stop_after_checkpoints >= 0 &&
            checkpoints_done >= options.stop_after_checkpoints) {
          stopped = true;
        }
      }

      for (std::size_t m : group.members) {
        summary.results[m].evals[seed] = records.evals[m];
        if (records.errors.count(m)) summary.results[m].model_errors[seed] = records.errors[m];
      }
      const std::string run_key = group_name + "/seed-" + std::to_string(seed);
      summary.trpo_logs[run_key] = state.trpo_log;
      summary.steps_consumed[run_key] = state.steps;
      if (stopped) break;
    }
  }

  summary.completed = !stopped && !truncated;
  for (auto& result : summary.results) WriteLabelOutputs(root, result);
  return summary;
}

// -- ablations -- //

std::vector<std::string> AblationAxes() {
  return {"collector", "sampling", "terminal-horizon", "soft-greedy", "model-width",
          "methods"};
}

std::vector<ExperimentConfig> AblationMatrix(const ExperimentConfig& base,
                                             const std::string& axis) {
  std::vector<ExperimentConfig> out;
  ExperimentConfig mfrl = base;
  if (mfrl.method != Method::kMpcMfrl) {
    mfrl.method = Method::kMpcMfrl;
    PlannerSettings p = DefaultPlanner(Method::kMpcMfrl);
    p.num_trajectories = base.planner.num_trajectories;
    p.horizon = base.planner.horizon;
    p.discount = base.planner.discount;
    mfrl.planner = p;
  }

  if (axis == "collector") {
    for (Collector c : {Collector::kPolicy, Collector::kRandomMpc}) {
      ExperimentConfig v = mfrl;
      v.collector = c;
      v.record_model_error = true;
      v.name = c == Collector::kPolicy ? "MPC-MFRL (Policy)" : "MPC-MFRL (Random+MPC)";
      out.push_back(v);
    }
  } else if (axis == "sampling") {
    for (const char* z : {"policy", "uniform"}) {
      ExperimentConfig v = mfrl;
      v.planner.strategy = z;
      v.name = std::string(z) == "policy" ? "Z = pi" : "Z = U";
      out.push_back(v);
    }
  } else if (axis == "terminal-horizon") {
    for (int h : {2, 5, 20}) {
      for (const char* t : {"value", "zero"}) {
        ExperimentConfig v = mfrl;
        v.planner.horizon = h;
        v.planner.terminal = t;
        v.name = std::string(std::string(t) == "value" ? "R_phi = V" : "R_phi = 0") +
                 " (H = " + std::to_string(h) + ")";
        out.push_back(v);
      }
    }
  } else if (axis == "soft-greedy") {
    for (int e : {10, 1}) {
      ExperimentConfig v = mfrl;
      v.planner.top_e = e;
      v.name = e == 1 ? "w/o SG" : "w SG";
      out.push_back(v);
    }
  } else if (axis == "model-width") {
    const std::size_t layers = std::max<std::size_t>(1, base.model.hidden_sizes.size());
    for (int w : {16, 64, 256}) {
      ExperimentConfig v = mfrl;
      v.model.hidden_sizes.assign(layers, w);
      v.name = std::to_string(w) + " hidden units";
      out.push_back(v);
    }
  } else if (axis == "methods") {
    const std::vector<std::pair<Method, const char*>> methods = {
        {Method::kMpcMfrl, "MPC-MFRL"},     {Method::kMfStochastic, "MF(S)"},
        {Method::kMfDeterministic, "MF(D)"}, {Method::kMpcRandom, "MPC-Random"},
        {Method::kMpcCem, "MPC-CEM"}};
    for (const auto& [m, name] : methods) {
      ExperimentConfig v = mfrl;
      v.method = m;
      if (m == Method::kMpcRandom || m == Method::kMpcCem) {
        PlannerSettings p = DefaultPlanner(m);
        p.num_trajectories = base.planner.num_trajectories;
        p.horizon = base.planner.horizon;
        p.discount = base.planner.discount;
        p.cem = base.planner.cem;
        v.planner = p;
      }
      v.name = name;
      out.push_back(v);
    }
  } else {
    std::string known;
    for (const auto& a : AblationAxes()) known += " " + a;
    throw ConfigError("unknown ablation axis: " + axis + " (known:" + known + ")");
  }
  for (const auto& v : out) v.Validate();
  return out;
}

std::string LabelDirName(const std::string& label) {
  std::string out;
  bool dash = false;
  for (unsigned char c : label) {
    if (std::isalnum(c)) {
      out += static_cast<char>(std::tolower(c));
      dash = false;
    } else if (c == '+') {
      out += "plus";
      dash = false;
    } else if (!dash && !out.empty()) {
      out += '-';
      dash = true;
    }
  }
  while (!out.empty() && out.back() == '-') out.pop_back();
  if (out.empty()) throw ConfigError("label has no usable characters: " + label);
  return out;
}

// -- CSV I/O -- //

void WriteEvalsCsv(const std::string& path, const std::vector<EvalRecord>& records) {
  WriteFileAtomic(path, EvalsCsvText(records));
}

std::vector<EvalRecord> ReadEvalsCsv(const std::string& path) {
  std::vector<std::string> header;
  const auto rows = ReadCsvRows(path, &header);
  if (header.size() < 3 || header[0] != "steps" || header[1] != "seed" ||
      header.back() != "mean") {
    throw IoError(path + ": not an evals CSV");
  }
  std::vector<EvalRecord> out;
  for (const auto& row : rows) {
    EvalRecord r;
    r.steps = std::stol(row[0]);
    r.seed = std::stoull(row[1]);
    for (std::size_t i = 2; i + 1 < row.size(); ++i) r.returns.push_back(ParseNum(row[i]));
    r.mean = ParseNum(row.back());
    out.push_back(std::move(r));
  }
  return out;
}

void WriteCurveCsv(const std::string& path, const std::vector<CurvePoint>& curve) {
  WriteFileAtomic(path, CurveCsvText(curve));
}

void WriteModelErrorCsv(const std::string& path,
                        const std::vector<ModelErrorRecord>& records) {
  WriteFileAtomic(path, ModelErrorCsvText(records));
}

std::vector<ModelErrorRecord> ReadModelErrorCsv(const std::string& path) {
  std::vector<std::string> header;
  const auto rows = ReadCsvRows(path, &header);
  if (header.size() != 3 || header[2] != "held_out_error") {
    throw IoError(path + ": not a model error CSV");
  }
  std::vector<ModelErrorRecord> out;
  for (const auto& row : rows) {
    out.push_back(ModelErrorRecord{std::stoull(row[1]), std::stol(row[0]), ParseNum(row[2])});
  }
  return out;
}

std::size_t WritePlotData(const std::string& runs_dir, const std::string& out_csv) {
  const fs::path root(runs_dir);
  if (!fs::is_directory(root)) throw IoError("no runs directory " + runs_dir);
  std::vector<fs::path> label_dirs;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file() && entry.path().filename() == "label.txt") {
      label_dirs.push_back(entry.path().parent_path());
    }
  }
  std::sort(label_dirs.begin(), label_dirs.end());

  std::ostringstream o;
  o << "env,method,seed,steps,metric,value\n";
  std::size_t rows = 0;
  const auto emit = [&](const std::string& env, const std::string& method,
                        const std::string& seed, long steps, const char* metric, double v) {
    o << CsvField(env) << "," << CsvField(method) << "," << seed << "," << steps << ","
      << metric << "," << Num(v) << "\n";
    ++rows;
  };
  for (const auto& dir : label_dirs) {
    std::string label = ReadFile(dir / "label.txt");
    while (!label.empty() && (label.back() == '\n' || label.back() == '\r')) label.pop_back();
    const std::string env = dir.parent_path().filename().string();
    if (fs::exists(dir / "evals.csv")) {
      std::map<std::uint64_t, double> best;
      for (const auto& r : ReadEvalsCsv((dir / "evals.csv").string())) {
        const std::string seed = std::to_string(r.seed);
        emit(env, label, seed, r.steps, "mean_return", r.mean);
        auto [it, fresh] = best.emplace(r.seed, r.mean);
        if (!fresh) it->second = std::max(it->second, r.mean);
        emit(env, label, seed, r.steps, "best_so_far", it->second);
      }
    }
    if (fs::exists(dir / "curve.csv")) {
      std::vector<std::string> header;
      for (const auto& row : ReadCsvRows(dir / "curve.csv", &header)) {
        const long steps = std::stol(row[0]);
        emit(env, label, "all", steps, "curve_mean", ParseNum(row[1]));
        emit(env, label, "all", steps, "ci_low", ParseNum(row[2]));
        emit(env, label, "all", steps, "ci_high", ParseNum(row[3]));
      }
    }
    if (fs::exists(dir / "model_error.csv")) {
      for (const auto& r : ReadModelErrorCsv((dir / "model_error.csv").string())) {
        emit(env, label, std::to_string(r.seed), r.steps, "held_out_error", r.error);
      }
    }
  }
  WriteFileAtomic(out_csv, o.str());
  return rows;
}

}  // namespace mpcmfrl
