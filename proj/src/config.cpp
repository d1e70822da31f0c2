#include "mpcmfrl/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "mpcmfrl/errors.hpp"

namespace mpcmfrl {

namespace {

std::string Trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> SplitList(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = Trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

template <typename T>
std::string JoinList(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

}  // namespace

// -- KeyValueConfig -- //

KeyValueConfig KeyValueConfig::Parse(const std::string& text) {
  KeyValueConfig kv;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string trimmed = Trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    const std::string key = Trim(trimmed.substr(0, eq));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    }
    kv.values_[key] = Trim(trimmed.substr(eq + 1));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::Load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return Parse(buffer.str());
}

const std::string* KeyValueConfig::Find(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string KeyValueConfig::GetString(const std::string& key,
                                      const std::string& fallback) const {
  const std::string* v = Find(key);
  return v ? *v : fallback;
}

double KeyValueConfig::GetDouble(const std::string& key, double fallback) const {
  const std::string* v = Find(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const double out = std::stod(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument(*v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not a number: " + *v);
  }
}

long KeyValueConfig::GetLong(const std::string& key, long fallback) const {
  const std::string* v = Find(key);
  if (!v) return fallback;
  try {
    std::size_t pos = 0;
    const long out = std::stol(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument(*v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": not an integer: " + *v);
  }
}

bool KeyValueConfig::GetBool(const std::string& key, bool fallback) const {
  const std::string* v = Find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + *v);
}

std::vector<int> KeyValueConfig::GetInts(const std::string& key,
                                         const std::vector<int>& fallback) const {
  const std::string* v = Find(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& item : SplitList(*v)) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": bad integer list: " + *v);
    }
  }
  return out;
}

std::vector<std::uint64_t> KeyValueConfig::GetSeeds(
    const std::string& key, const std::vector<std::uint64_t>& fallback) const {
  const std::string* v = Find(key);
  if (!v) return fallback;
  std::vector<std::uint64_t> out;
  for (const auto& item : SplitList(*v)) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": bad seed list: " + *v);
    }
  }
  if (out.empty()) throw ConfigError("config key " + key + ": empty seed list");
  return out;
}

std::vector<std::string> KeyValueConfig::UnusedKeys() const {
  std::vector<std::string> out;
  for (const auto& [key, value] : values_) {
    if (!used_.count(key)) out.push_back(key);
  }
  return out;
}

// -- names -- //

std::string MethodName(Method m) {
  switch (m) {
    case Method::kMpcMfrl: return "mpc-mfrl";
    case Method::kMfStochastic: return "mf-s";
    case Method::kMfDeterministic: return "mf-d";
    case Method::kMpcRandom: return "mpc-random";
    case Method::kMpcCem: return "mpc-cem";
  }
  return "?";
}

Method ParseMethod(const std::string& name) {
  for (Method m : {Method::kMpcMfrl, Method::kMfStochastic, Method::kMfDeterministic,
                   Method::kMpcRandom, Method::kMpcCem}) {
    if (MethodName(m) == name) return m;
  }
  throw ConfigError("unknown method: " + name);
}

std::string CollectorName(Collector c) {
  return c == Collector::kPolicy ? "policy" : "random-mpc";
}

Collector ParseCollector(const std::string& name) {
  if (name == "policy") return Collector::kPolicy;
  if (name == "random-mpc") return Collector::kRandomMpc;
  throw ConfigError("unknown collector: " + name);
}

// -- planner settings -- //

PlannerConfig PlannerSettings::Bind(std::shared_ptr<const GaussianPolicy> policy,
                                    std::shared_ptr<const ValueFunction> value) const {
  PlannerConfig c;
  c.num_trajectories = num_trajectories;
  c.horizon = horizon;
  c.top_e = top_e;
  c.discount = discount;
  c.terminal_at_last_state = terminal_at_last_state;
  if (strategy == "uniform") {
    c.strategy = UniformSampling{};
  } else if (strategy == "policy") {
    c.strategy = PolicySampling{std::move(policy)};
  } else if (strategy == "cem") {
    c.strategy = cem;
  } else {
    throw ConfigError("unknown planner strategy: " + strategy);
  }
  if (terminal == "zero") {
    c.terminal = ZeroTerminal{};
  } else if (terminal == "value") {
    c.terminal = ValueTerminal{std::move(value)};
  } else {
    throw ConfigError("unknown terminal mode: " + terminal);
  }
  c.Validate();
  return c;
}

std::string PlannerSettings::Key() const {
  std::string k = strategy + "/" + terminal + "/N" + std::to_string(num_trajectories) +
                  "/H" + std::to_string(horizon) + "/E" + std::to_string(top_e) +
                  "/g" + Num(discount) + (terminal_at_last_state ? "/last" : "");
  if (strategy == "cem") {
    k += "/cem" + std::to_string(cem.population) + "," + Num(cem.elite_fraction) +
         "," + std::to_string(cem.iterations) + "," + Num(cem.init_std) + "," +
         Num(cem.smoothing);
  }
  return k;
}

PlannerSettings DefaultPlanner(Method method) {
  PlannerSettings p;
  switch (method) {
    case Method::kMpcRandom:
      p.strategy = "uniform";
      p.terminal = "zero";
      p.top_e = 1;
      break;
    case Method::kMpcCem:
      p.strategy = "cem";
      p.terminal = "zero";
      p.top_e = 1;
      break;
    default:
      break;
  }
  return p;
}

// -- experiment config -- //

Collector ExperimentConfig::TrainingCollector() const {
  switch (method) {
    case Method::kMfStochastic:
    case Method::kMfDeterministic:
      return Collector::kPolicy;
    case Method::kMpcRandom:
    case Method::kMpcCem:
      return Collector::kRandomMpc;
    case Method::kMpcMfrl:
      return collector;
  }
  return collector;
}

bool ExperimentConfig::TrainsPolicy() const {
  return method == Method::kMpcMfrl || method == Method::kMfStochastic ||
         method == Method::kMfDeterministic;
}

bool ExperimentConfig::UsesModel() const {
  return method == Method::kMpcMfrl || method == Method::kMpcRandom ||
         method == Method::kMpcCem;
}

PlannerSettings ExperimentConfig::AggregationPlanner() const {
  if (method == Method::kMpcRandom || method == Method::kMpcCem) return planner;
  PlannerSettings p = DefaultPlanner(Method::kMpcRandom);
  p.num_trajectories = planner.num_trajectories;
  p.horizon = planner.horizon;
  p.discount = planner.discount;
  return p;
}

std::string ExperimentConfig::TrainingKey() const {
  std::ostringstream k;
  const Collector c = TrainingCollector();
  k << "env=" << env << ";collector=" << CollectorName(c) << ";budget=" << total_steps
    << ";period=" << eval_period << ";mfrl=" << mfrl_updates;
  k << ";agent=" << Num(agent.discount) << "," << Num(agent.gae_lambda) << ","
    << Num(agent.max_kl) << "," << Num(agent.kl_acceptance_factor) << ","
    << agent.cg_iterations << "," << Num(agent.cg_damping) << ","
    << agent.line_search_steps << "," << agent.episodes_per_iteration << ","
    << agent.value_epochs << "," << agent.value_batch_size << ","
    << Num(agent.value_adam.learning_rate) << "," << JoinList(agent.policy_hidden)
    << "|" << JoinList(agent.value_hidden) << "," << Num(agent.init_log_std);
  k << ";model=" << JoinList(model.hidden_sizes) << ","
    << (model.mode == PredictionMode::kDelta ? "delta" : "absolute") << ","
    << model.normalize << "," << model.epochs << "," << model.batch_size << ","
    << Num(model.adam.learning_rate) << "," << Num(model.held_out_fraction);
  if (c == Collector::kRandomMpc) {
    k << ";init_random=" << Num(initial_random_fraction)
      << ";aggregation=" << AggregationPlanner().Key();
  }
  return k.str();
}

void ExperimentConfig::Validate() const {
  MakeEnvironment(env);  // throws on unknown names
  agent.Validate();
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (eval_period < 1) throw ConfigError("eval_period must be >= 1");
  const int horizon = MakeEnvironment(env)->horizon();
  if (eval_period % horizon != 0) {
    throw ConfigError("eval_period must be a whole number of episodes (" +
                      std::to_string(horizon) + " steps)");
  }
  if (total_steps % horizon != 0) {
    throw ConfigError("total_steps must be a whole number of episodes");
  }
  if (eval_episodes < 1) throw ConfigError("eval_episodes must be >= 1");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (!(initial_random_fraction >= 0.0 && initial_random_fraction <= 1.0)) {
    throw ConfigError("initial_random_fraction must be in [0, 1]");
  }
  if (model.epochs < 0 || model.batch_size < 1) {
    throw ConfigError("model schedule: epochs >= 0 and batch_size >= 1 required");
  }
  if (bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be >= 1");
  if (test_set_size < 2) throw ConfigError("test_set_size must be >= 2");
  // Binding checks N/H/E and strategy names without real snapshots.
  PlannerSettings check = planner;
  const auto policy = std::make_shared<const GaussianPolicy>();
  const auto value = std::make_shared<const ValueFunction>();
  check.Bind(policy, value);
  if (TrainingCollector() == Collector::kRandomMpc) AggregationPlanner().Bind(policy, value);
  if (!TrainsPolicy() && (planner.NeedsPolicy() || planner.NeedsValue())) {
    throw ConfigError("method " + MethodName(method) +
                      " trains no policy or value; use planner.strategy = uniform|cem"
                      " and planner.terminal = zero");
  }
}

std::string ExperimentConfig::ToText() const {
  std::ostringstream o;
  o << "name = " << Label() << "\n"
    << "env = " << env << "\n"
    << "method = " << MethodName(method) << "\n"
    << "collector = " << CollectorName(collector) << "\n"
    << "total_steps = " << total_steps << "\n"
    << "eval_period = " << eval_period << "\n"
    << "eval_episodes = " << eval_episodes << "\n"
    << "seeds = " << JoinList(seeds) << "\n"
    << "agent.discount = " << Num(agent.discount) << "\n"
    << "agent.gae_lambda = " << Num(agent.gae_lambda) << "\n"
    << "agent.max_kl = " << Num(agent.max_kl) << "\n"
    << "agent.kl_acceptance_factor = " << Num(agent.kl_acceptance_factor) << "\n"
    << "agent.cg_iterations = " << agent.cg_iterations << "\n"
    << "agent.cg_damping = " << Num(agent.cg_damping) << "\n"
    << "agent.line_search_steps = " << agent.line_search_steps << "\n"
    << "agent.episodes_per_iteration = " << agent.episodes_per_iteration << "\n"
    << "agent.value_epochs = " << agent.value_epochs << "\n"
    << "agent.value_batch_size = " << agent.value_batch_size << "\n"
    << "agent.value_lr = " << Num(agent.value_adam.learning_rate) << "\n"
    << "agent.policy_hidden = " << JoinList(agent.policy_hidden) << "\n"
    << "agent.value_hidden = " << JoinList(agent.value_hidden) << "\n"
    << "agent.init_log_std = " << Num(agent.init_log_std) << "\n"
    << "agent.mfrl_updates = " << (mfrl_updates ? "true" : "false") << "\n"
    << "model.hidden = " << JoinList(model.hidden_sizes) << "\n"
    << "model.mode = " << (model.mode == PredictionMode::kDelta ? "delta" : "absolute") << "\n"
    << "model.normalize = " << (model.normalize ? "true" : "false") << "\n"
    << "model.epochs = " << model.epochs << "\n"
    << "model.batch_size = " << model.batch_size << "\n"
    << "model.lr = " << Num(model.adam.learning_rate) << "\n"
    << "model.held_out_fraction = " << Num(model.held_out_fraction) << "\n"
    << "planner.strategy = " << planner.strategy << "\n"
    << "planner.terminal = " << planner.terminal << "\n"
    << "planner.n = " << planner.num_trajectories << "\n"
    << "planner.horizon = " << planner.horizon << "\n"
    << "planner.top_e = " << planner.top_e << "\n"
    << "planner.discount = " << Num(planner.discount) << "\n"
    << "planner.terminal_at_last_state = "
    << (planner.terminal_at_last_state ? "true" : "false") << "\n"
    << "cem.population = " << planner.cem.population << "\n"
    << "cem.elite_fraction = " << Num(planner.cem.elite_fraction) << "\n"
    << "cem.iterations = " << planner.cem.iterations << "\n"
    << "cem.init_std = " << Num(planner.cem.init_std) << "\n"
    << "cem.smoothing = " << Num(planner.cem.smoothing) << "\n"
    << "initial_random_fraction = " << Num(initial_random_fraction) << "\n"
    << "bootstrap.resamples = " << bootstrap_resamples << "\n"
    << "bootstrap.seed = " << bootstrap_seed << "\n"
    << "record_model_error = " << (record_model_error ? "true" : "false") << "\n"
    << "test_seed = " << test_seed << "\n"
    << "test_set_size = " << test_set_size << "\n";
  if (!output_dir.empty()) o << "output_dir = " << output_dir << "\n";
  return o.str();
}

long DefaultBudget(const std::string& env) {
  if (env == "lqr") return 20000;
  return 100000;
}

ExperimentConfig ParseExperimentConfig(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.env = kv.GetString("env", c.env);
  c.method = ParseMethod(kv.GetString("method", MethodName(c.method)));
  c.name = kv.GetString("name", "");
  c.collector = ParseCollector(kv.GetString("collector", CollectorName(c.collector)));
  c.total_steps = kv.GetLong("total_steps", DefaultBudget(c.env));
  c.eval_period = kv.GetLong("eval_period", c.eval_period);
  c.eval_episodes = static_cast<int>(kv.GetLong("eval_episodes", c.eval_episodes));
  c.seeds = kv.GetSeeds("seeds", c.seeds);

  AgentConfig& a = c.agent;
  a.discount = kv.GetDouble("agent.discount", a.discount);
  a.gae_lambda = kv.GetDouble("agent.gae_lambda", a.gae_lambda);
  a.max_kl = kv.GetDouble("agent.max_kl", a.max_kl);
  a.kl_acceptance_factor = kv.GetDouble("agent.kl_acceptance_factor", a.kl_acceptance_factor);
  a.cg_iterations = static_cast<int>(kv.GetLong("agent.cg_iterations", a.cg_iterations));
  a.cg_damping = kv.GetDouble("agent.cg_damping", a.cg_damping);
  a.line_search_steps =
      static_cast<int>(kv.GetLong("agent.line_search_steps", a.line_search_steps));
  a.episodes_per_iteration = static_cast<int>(
      kv.GetLong("agent.episodes_per_iteration", a.episodes_per_iteration));
  a.value_epochs = static_cast<int>(kv.GetLong("agent.value_epochs", a.value_epochs));
  a.value_batch_size =
      static_cast<int>(kv.GetLong("agent.value_batch_size", a.value_batch_size));
  a.value_adam.learning_rate = kv.GetDouble("agent.value_lr", a.value_adam.learning_rate);
  a.policy_hidden = kv.GetInts("agent.policy_hidden", a.policy_hidden);
  a.value_hidden = kv.GetInts("agent.value_hidden", a.value_hidden);
  a.init_log_std = kv.GetDouble("agent.init_log_std", a.init_log_std);
  c.mfrl_updates = kv.GetBool("agent.mfrl_updates", c.mfrl_updates);

  DynamicsModelConfig& m = c.model;
  m.hidden_sizes = kv.GetInts("model.hidden", m.hidden_sizes);
  const std::string mode = kv.GetString("model.mode", "delta");
  if (mode != "delta" && mode != "absolute") {
    throw ConfigError("model.mode must be delta or absolute");
  }
  m.mode = mode == "delta" ? PredictionMode::kDelta : PredictionMode::kAbsolute;
  m.normalize = kv.GetBool("model.normalize", m.normalize);
  m.epochs = static_cast<int>(kv.GetLong("model.epochs", m.epochs));
  m.batch_size = static_cast<int>(kv.GetLong("model.batch_size", m.batch_size));
  m.adam.learning_rate = kv.GetDouble("model.lr", m.adam.learning_rate);
  m.held_out_fraction = kv.GetDouble("model.held_out_fraction", m.held_out_fraction);

  PlannerSettings& p = c.planner;
  p = DefaultPlanner(c.method);
  p.strategy = kv.GetString("planner.strategy", p.strategy);
  p.terminal = kv.GetString("planner.terminal", p.terminal);
  p.num_trajectories = static_cast<int>(kv.GetLong("planner.n", p.num_trajectories));
  p.horizon = static_cast<int>(kv.GetLong("planner.horizon", p.horizon));
  p.top_e = static_cast<int>(kv.GetLong("planner.top_e", p.top_e));
  p.discount = kv.GetDouble("planner.discount", p.discount);
  p.terminal_at_last_state =
      kv.GetBool("planner.terminal_at_last_state", p.terminal_at_last_state);
  p.cem.population = static_cast<int>(kv.GetLong("cem.population", p.cem.population));
  p.cem.elite_fraction = kv.GetDouble("cem.elite_fraction", p.cem.elite_fraction);
  p.cem.iterations = static_cast<int>(kv.GetLong("cem.iterations", p.cem.iterations));
  p.cem.init_std = kv.GetDouble("cem.init_std", p.cem.init_std);
  p.cem.smoothing = kv.GetDouble("cem.smoothing", p.cem.smoothing);

  c.initial_random_fraction =
      kv.GetDouble("initial_random_fraction", c.initial_random_fraction);
  c.bootstrap_resamples =
      static_cast<int>(kv.GetLong("bootstrap.resamples", c.bootstrap_resamples));
  c.bootstrap_seed = static_cast<std::uint64_t>(
      kv.GetLong("bootstrap.seed", static_cast<long>(c.bootstrap_seed)));
  c.record_model_error = kv.GetBool("record_model_error", c.record_model_error);
  c.test_seed =
      static_cast<std::uint64_t>(kv.GetLong("test_seed", static_cast<long>(c.test_seed)));
  c.test_set_size = static_cast<int>(kv.GetLong("test_set_size", c.test_set_size));
  c.output_dir = kv.GetString("output_dir", "");

  const auto unused = kv.UnusedKeys();
  if (!unused.empty()) throw ConfigError("unknown config key: " + unused.front());
  c.Validate();
  return c;
}

ExperimentConfig LoadExperimentConfig(const std::string& path) {
  return ParseExperimentConfig(KeyValueConfig::Load(path));
}

std::string ResolveOutputDir(const std::string& configured) {
  if (!configured.empty()) return configured;
  if (const char* root = std::getenv("MPCMFRL_OUTPUT_ROOT"); root && *root) return root;
  return "runs";
}

}  // namespace mpcmfrl
