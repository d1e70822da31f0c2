#ifndef MPCMFRL_CONFIG_HPP_
#define MPCMFRL_CONFIG_HPP_

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mpcmfrl/agent.hpp"
#include "mpcmfrl/dynamics_model.hpp"
#include "mpcmfrl/planner.hpp"

namespace mpcmfrl {

// Flat `key = value` text. Blank lines and lines starting with '#' are
// ignored; later keys override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig Parse(const std::string& text);
  static KeyValueConfig Load(const std::string& path);

  bool Has(const std::string& key) const { return values_.count(key) > 0; }
  void Set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string GetString(const std::string& key, const std::string& fallback) const;
  double GetDouble(const std::string& key, double fallback) const;
  long GetLong(const std::string& key, long fallback) const;
  bool GetBool(const std::string& key, bool fallback) const;
  std::vector<int> GetInts(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<std::uint64_t> GetSeeds(const std::string& key,
                                      const std::vector<std::uint64_t>& fallback) const;

  // Keys never read through a getter.
  std::vector<std::string> UnusedKeys() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const std::string* Find(const std::string& key) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

enum class Method { kMpcMfrl, kMfStochastic, kMfDeterministic, kMpcRandom, kMpcCem };
enum class Collector { kPolicy, kRandomMpc };

std::string MethodName(Method m);
Method ParseMethod(const std::string& name);
std::string CollectorName(Collector c);
Collector ParseCollector(const std::string& name);

// Serializable planner description; snapshots are bound at planning time.
struct PlannerSettings {
  std::string strategy = "policy";  // policy | uniform | cem
  std::string terminal = "value";   // value | zero
  int num_trajectories = 200;
  int horizon = 10;
  int top_e = 10;
  double discount = 0.99;
  bool terminal_at_last_state = false;
  CemSampling cem{};

  PlannerConfig Bind(std::shared_ptr<const GaussianPolicy> policy,
                     std::shared_ptr<const ValueFunction> value) const;
  bool NeedsPolicy() const { return strategy == "policy"; }
  bool NeedsValue() const { return terminal == "value"; }
  std::string Key() const;
};

// Baseline planner defaults per method (MPC-MFRL: policy/value/E=10;
// MPC-Random: uniform/zero/E=1; MPC-CEM: cem/zero/E=1).
PlannerSettings DefaultPlanner(Method method);

struct ExperimentConfig {
  std::string name;  // label in outputs; defaults to the method name
  std::string env = "pendulum";
  Method method = Method::kMpcMfrl;
  Collector collector = Collector::kPolicy;
  long total_steps = 100000;
  long eval_period = 2000;
  int eval_episodes = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  AgentConfig agent{};
  bool mfrl_updates = true;
  DynamicsModelConfig model{};
  PlannerSettings planner = DefaultPlanner(Method::kMpcMfrl);
  double initial_random_fraction = 0.2;
  int bootstrap_resamples = 1000;
  std::uint64_t bootstrap_seed = 20190101;
  bool record_model_error = false;
  std::uint64_t test_seed = 9999;
  int test_set_size = 4000;  // half from each collector
  std::string output_dir;

  // Data scheme actually used to train the dynamics model.
  Collector TrainingCollector() const;
  bool TrainsPolicy() const;
  bool UsesModel() const;
  // Planner used to aggregate on-policy MPC data in the Random+MPC scheme.
  PlannerSettings AggregationPlanner() const;
  // Fields that determine the training run; equal keys share training.
  std::string TrainingKey() const;
  std::string Label() const { return name.empty() ? MethodName(method) : name; }

  void Validate() const;
  std::string ToText() const;
};

// Desk-scale budget per environment (steps).
long DefaultBudget(const std::string& env);

ExperimentConfig ParseExperimentConfig(const KeyValueConfig& kv);
ExperimentConfig LoadExperimentConfig(const std::string& path);

// Output root: config value, else $MPCMFRL_OUTPUT_ROOT, else "runs".
std::string ResolveOutputDir(const std::string& configured);

}  // namespace mpcmfrl

#endif  // MPCMFRL_CONFIG_HPP_
