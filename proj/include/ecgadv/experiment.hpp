#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ecgadv/dataio.hpp"
#include "ecgadv/defenses.hpp"
#include "ecgadv/eval.hpp"

namespace ecgadv {

struct DataConfig {
  /// "synthetic" or "records" (directory + CSV index).
  std::string source = "synthetic";
  std::size_t per_class = 120;
  std::size_t length = 256;
  std::uint64_t seed = 7;
  std::string records_dir;
  std::string index_file;
  /// Canonicalize record lengths (records source only).
  bool preprocess = true;
  std::size_t target_length = kCanonicalLength;
  bool rebalance = true;
  RebalanceConfig rebalance_config{};
  double train_fraction = 0.9;
  /// Split before duplication so copies never straddle train and test.
  bool leakage_safe_split = false;
};

struct ProtocolConfig {
  std::vector<std::string> situations{"I", "II"};
  /// Headline attack, in reference units.
  AttackParams attack{10.0, 1.0, 20, 40};
  std::vector<double> t_prime_values{0, 10, 20, 30, 40};
  std::vector<double> epsilon_values{5, 10, 15, 20, 25};
  /// Fixed parameters of the epsilon sweep, in reference units.
  AttackParams epsilon_sweep_attack{10.0, 1.0, 20, 0};
  std::string sweep_situation = "I";
  bool run_sweeps = true;
  bool run_boundary = true;
  std::size_t boundary_budget = 2000;
  std::size_t boundary_victims = 30;
  int boundary_hanning_window = 21;
};

/// Everything a run needs. Attack budgets and regularizer constants are
/// given in reference units and converted with `amplitude_scale` (signal units
/// per reference unit): eps, alpha and eps_max scale linearly, lambda with the
/// square.
struct ExperimentConfig {
  DataConfig data{};
  std::string model_spec = "desk";
  std::vector<std::string> defenses{"none", "at", "dd", "adt", "init-adt", "dist-adt", "jr", "nsr"};
  TrainPlan plan{};
  double amplitude_scale = 1.0;
  ProtocolConfig protocol{};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t threads = 0;

  std::vector<std::string> violations() const;
  /// Throws std::invalid_argument listing every violation.
  void validate() const;

  /// Plan with the model spec and amplitude scale applied.
  TrainPlan effective_plan(std::uint64_t seed) const;
  AttackParams scaled(const AttackParams& reference_units) const;

  /// Settings of the desk acceptance pipeline.
  static ExperimentConfig desk();
  /// Settings of the full-scale experiment (real records required).
  static ExperimentConfig full();
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Starts from the desk defaults unless the file sets "preset": "full".
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void write_config_snapshot(const ExperimentConfig& c, const std::filesystem::path& dir);

struct SplitData {
  Dataset train;
  Dataset test;
};

SplitData prepare_data(const DataConfig& config);

using ProgressFn = std::function<void(const std::string&)>;

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<TrainedDefense> defenses;
  std::vector<ProtocolRun> runs;
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  std::vector<ResultRow> rows;
  nlohmann::json summary;
  double seconds = 0.0;
};

/// Trains every configured defense for every seed, runs the configured
/// protocols and writes models, manifests, results.csv and summary.json
/// under `out`.
ExperimentResult run_experiment(const ExperimentConfig& config, const std::filesystem::path& out,
                                const ProgressFn& progress = {});

struct CriterionVerdict {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Directional checks of the desk pipeline: attack drop, Situation II
/// ordering, ADT Situation I drop, sweep completeness and monotonicity, and
/// the boundary protocol.
std::vector<CriterionVerdict> assess_desk_result(const ExperimentConfig& config,
                                                 const ExperimentResult& result);

}  // namespace ecgadv
