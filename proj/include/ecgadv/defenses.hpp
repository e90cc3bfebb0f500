#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecgadv/attacks.hpp"
#include "ecgadv/classifier.hpp"

namespace ecgadv {

enum class DefenseMethod { none, at, dd, adt, init_adt, dist_adt, jr, nsr };

std::string to_string(DefenseMethod m);
DefenseMethod defense_method_from_string(std::string_view s);
const std::vector<DefenseMethod>& all_defense_methods();
/// DD and the ADT family train two networks.
bool is_distillation_family(DefenseMethod m);

struct RegularizerConfig {
  double lambda = 44.0;
  double epsilon_max = 1.0;
  double beta = 1.0;

  std::vector<std::string> violations() const;
};

struct TrainPlan {
  std::string model_spec = "desk";
  int e1 = 100;
  int e2 = 100;
  int batch_size = 16;
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  /// Training temperature of the first and second network.
  double temperature_stage1 = 1.0;
  double temperature_stage2 = 1.0;
  /// Adversarial weight of the mixed loss per stage.
  double c_stage1 = 0.5;
  double c_stage2 = 0.5;
  AttackParams attack{};
  RegularizerConfig regularizer{};
  /// First (1-based) epoch in which JR / NSR penalties are added.
  int warmup_epoch = 11;

  std::vector<std::string> violations() const;
  /// Throws std::invalid_argument listing every violation.
  void validate() const;
};

struct TrainingData {
  std::vector<Array1D> signals;
  std::vector<std::size_t> labels;

  std::size_t size() const { return signals.size(); }
  std::size_t length() const;
  void check() const;
};

struct BatchLogEntry {
  int stage = 1;
  int epoch = 0;
  std::size_t batch = 0;
  double loss_natural = 0.0;
  double loss_adversarial = 0.0;
  double penalty = 0.0;
  double objective = 0.0;
};

struct EpochLogEntry {
  int stage = 1;
  int epoch = 0;
  double loss_natural = 0.0;
  double loss_adversarial = 0.0;
  double penalty = 0.0;
  double objective = 0.0;
  /// Accuracy of the natural forward passes made during the epoch.
  double train_accuracy = 0.0;
  /// Parameter digest at the end of the epoch.
  std::string digest;
};

struct TrainingLog {
  std::vector<BatchLogEntry> batches;
  std::vector<EpochLogEntry> epochs;
};

class TrainedDefense {
 public:
  DefenseMethod method = DefenseMethod::none;
  /// One network, or first + distilled for the distillation family.
  std::vector<ClassifierModel> models;
  TrainingLog log;
  /// Soft labels used for the second network (distillation family only).
  std::vector<LabelVector> soft_labels;

  const ClassifierModel& deployable() const;
  /// Digest of the deployable model.
  std::string model_id() const;

  void write_epoch_csv(const std::filesystem::path& path) const;
  void write_batch_csv(const std::filesystem::path& path) const;
  /// model.json (+ first_model.json), logs and a method manifest.
  void save(const std::filesystem::path& dir) const;
  static TrainedDefense load(const std::filesystem::path& dir);
};

/// Plain hard-label training for E1 epochs.
TrainedDefense train_standard(const TrainingData& data, const TrainPlan& plan);
/// One network on c * L_adv + (1 - c) * L with SAP samples from the
/// current network for every batch (stage-1 settings).
TrainedDefense train_adversarial(const TrainingData& data, const TrainPlan& plan);
/// Defensive distillation: hard labels, soft labels, second network.
TrainedDefense train_distilled(const TrainingData& data, const TrainPlan& plan);

enum class AdtVariant { full, init_only, dist_only };
TrainedDefense train_adt(const TrainingData& data, const TrainPlan& plan, AdtVariant variant);

/// Hard-label training plus the JR / NSR penalty from the warmup epoch on.
TrainedDefense train_jacobian_regularized(const TrainingData& data, const TrainPlan& plan);
TrainedDefense train_nsr_regularized(const TrainingData& data, const TrainPlan& plan);

TrainedDefense train_defense(DefenseMethod method, const TrainingData& data, const TrainPlan& plan);

enum class JacobianOutput { probabilities, logits };

/// lambda * mean over the batch of ||d out / d x||_F^2, computed exactly
/// from one reverse pass per output.
double jacobian_penalty(const ClassifierModel& model, std::span<const Array1D> batch, double lambda,
                        double temperature = 1.0,
                        JacobianOutput output = JacobianOutput::probabilities);

/// Per sample with true class y and logits z:
///   noise  = eps_max * ||d z_y / d x||_1
///   ratio  = noise / max(|z_y|, 1e-12)
///   margin = z_y - max_{k != y} z_k
///   hinge  = max(0, noise - max(0, margin))
/// and the penalty is beta * mean(ratio + hinge).
double nsr_penalty(const ClassifierModel& model, std::span<const Array1D> batch,
                   std::span<const std::size_t> labels, double epsilon_max, double beta);

}  // namespace ecgadv
