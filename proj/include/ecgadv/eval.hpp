#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecgadv/attacks.hpp"
#include "ecgadv/defenses.hpp"

namespace ecgadv {

/// Rows are ground truth (N, A, O, P), columns predictions (n, a, o, p).
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};

  std::size_t total() const;
  /// Sigma of ground-truth class g (row marginal).
  std::size_t truth_total(std::size_t g) const;
  /// Sigma of predicted class p (column marginal).
  std::size_t predicted_total(std::size_t p) const;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels);

struct MetricsReport {
  double accuracy = 0.0;
  /// F1N, F1A, F1O, F1P. A class absent from truth and predictions gets 0.
  std::array<double, kNumClasses> f1{};
  double macro_f1 = 0.0;
  /// (clean - adversarial) / clean accuracy in percent; 0 for clean reports.
  double drop_percent = 0.0;
  ConfusionMatrix matrix;
};

/// F1 of class k = 2 * kk / (Sigma K + Sigma k); macro = mean of the four.
MetricsReport f1_scores(const ConfusionMatrix& cm);

double performance_drop(double clean_accuracy, double adversarial_accuracy);

MetricsReport evaluate_model(const ClassifierModel& model, std::span<const Array1D> signals,
                             std::span<const std::size_t> labels, double temperature = 1.0);

enum class Situation { I, II, boundary };
std::string to_string(Situation s);
Situation situation_from_string(std::string_view s);

struct ModelReport {
  std::string method;
  std::string model_id;
  /// Adversarial set the model was scored on.
  std::string manifest_id;
  std::string manifest_source;
  std::size_t samples = 0;
  MetricsReport clean;
  MetricsReport adversarial;
};

struct ProtocolRun {
  Situation situation = Situation::I;
  std::string source_model_id;
  std::vector<ModelReport> reports;
  std::uint64_t seed = 0;
  std::string axis = "none";
  double axis_value = 0.0;
  /// Boundary protocol: successful samples generated against the source.
  std::size_t generated = 0;
  std::size_t attempted = 0;
};

struct SituationOptions {
  std::uint64_t seed = 0;
  /// When set, every generated adversarial set is written under
  /// <dir>/<manifest_id> and each evaluation is appended to its manifest.
  std::optional<std::filesystem::path> persist_dir;
  /// Evaluation temperature.
  double temperature = 1.0;
};

/// Situation I: one set generated against `source`, shared by every
/// defended model. Situation II: one set per defended model, generated
/// against that model.
ProtocolRun run_situation(Situation situation, std::span<const TrainedDefense> defended,
                          const TrainedDefense* source, const AttackParams& params,
                          const TrainingData& test, const SituationOptions& options = {});

/// Scores one model on an existing set; throws if a Situation II set was not
/// generated against that model.
ModelReport score_on_set(const TrainedDefense& defense, const AdversarialSet& set,
                         const TrainingData& test, Situation situation, double temperature = 1.0);

struct BoundaryEvalOptions {
  std::size_t budget = 2000;
  /// Victims attempted (0 = all correctly classified test samples).
  std::size_t max_victims = 0;
  std::uint64_t seed = 0;
  BoundaryParams attack{};
  /// A sample counts as generated when the attack improved on the seed and
  /// ended within this fraction of the initial distance.
  double max_distance_ratio = 1.0;
};

struct BoundarySamples {
  /// Successful samples; `original` is the victim, `delta` = `applied` =
  /// adversarial - original.
  std::vector<AdversarialRecord> records;
  /// Target class of every record, as classified by the source.
  std::vector<std::size_t> targets;
  std::size_t attempted = 0;
};

/// Runs the boundary attack against `source` on correctly classified test
/// victims, each with a random other class as target and a test sample the
/// source assigns to that class as seed.
BoundarySamples generate_boundary_samples(const TrainedDefense& source, const TrainingData& test,
                                          const BoundaryEvalOptions& options);

/// Boundary samples are generated against the source model only and every
/// defended model is scored on the successful ones.
ProtocolRun run_boundary_eval(std::span<const TrainedDefense> defended, const TrainedDefense& source,
                              const TrainingData& test, const BoundaryEvalOptions& options);

enum class SweepAxis { t_prime, epsilon };
std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(std::string_view s);

/// One run per value with the axis parameter replaced; all else fixed.
std::vector<ProtocolRun> parameter_sweep(SweepAxis axis, std::span<const double> values,
                                         const AttackParams& fixed, Situation situation,
                                         std::span<const TrainedDefense> defended,
                                         const TrainedDefense* source, const TrainingData& test,
                                         const SituationOptions& options = {});

struct ResultRow {
  std::string method;
  std::string situation;
  std::string axis;
  double axis_value = 0.0;
  std::uint64_t seed = 0;
  std::string model_id;
  std::string manifest_id;
  std::size_t samples = 0;
  double clean_accuracy = 0.0;
  MetricsReport metrics;
};

std::vector<ResultRow> result_rows(const ProtocolRun& run);
void write_results_csv(std::span<const ResultRow> rows, const std::filesystem::path& path);

/// Mean and sample standard deviation of accuracy, macro F1 and drop, grouped
/// by (method, situation, axis, axis value).
nlohmann::json summarize(std::span<const ResultRow> rows);

}  // namespace ecgadv
