#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ecgadv/classifier.hpp"

namespace ecgadv {

/// Where each Clip projects to. `previous` follows the iterate formula
/// literally (each step stays within eps of the last iterate); `original`
/// bounds the total deviation from the clean signal by eps.
enum class ClipAnchor { previous, original };

std::string to_string(ClipAnchor a);
ClipAnchor clip_anchor_from_string(std::string_view s);

struct AttackParams {
  double epsilon = 10.0;
  double alpha = 1.0;
  int t = 5;
  int t_prime = 5;
  std::vector<int> kernel_sizes{5, 7, 11, 15, 19};
  std::vector<double> kernel_stds{1.0, 3.0, 5.0, 7.0, 10.0};
  ClipAnchor anchor = ClipAnchor::previous;
  /// Softmax temperature of the loss being maximized.
  double temperature = 1.0;

  void validate() const;
};

/// Gaussian kernels paired by index: kernels[i] has size s[i], std sigma[i].
struct KernelBank {
  std::vector<Array1D> kernels;

  static KernelBank from_params(const AttackParams& params);
  std::size_t max_length() const;
};

struct Provenance {
  std::string attack;
  std::string source_model;
  AttackParams params;
};

/// `adversarial == original + applied` elementwise, exactly.
struct AdversarialExample {
  Array1D original;
  Array1D delta;
  Array1D applied;
  Array1D adversarial;
  Provenance provenance;
};

/// Elementwise projection into [anchor - eps, anchor + eps].
Array1D clip(std::span<const double> candidate, std::span<const double> anchor, double epsilon);

/// Normalized Gaussian of odd size s = 2M + 1 centred at M.
Array1D gaussian_kernel(int size, double sigma);

/// (1/m) sum_i delta (*) K_i with zero padding outside delta.
Array1D smooth_perturbation(std::span<const double> delta, const KernelBank& bank);

/// Untargeted iterative sign-gradient attack on the loss of `target`.
AdversarialExample pgd_attack(const ClassifierModel& model, std::span<const double> x,
                              std::span<const double> target, const AttackParams& params);
AdversarialExample pgd_attack(const ClassifierModel& model, std::span<const double> x,
                              std::size_t label, const AttackParams& params);

/// PGD followed by t' sign-gradient updates of delta through the kernel
/// smoothing; the applied perturbation is the smoothed delta. With t' = 0
/// the result is the PGD result.
AdversarialExample sap_attack(const ClassifierModel& model, std::span<const double> x,
                              std::span<const double> target, const AttackParams& params);
AdversarialExample sap_attack(const ClassifierModel& model, std::span<const double> x,
                              std::size_t label, const AttackParams& params);

/// Total variation sum |v[i+1] - v[i]|.
double total_variation(std::span<const double> v);

/// Same-length convolution with a unit-sum Hann window (no zero endpoints),
/// zero-padded at the edges.
Array1D hanning_filter(std::span<const double> signal, int window);
Array1D hanning_window(int window);

using ClassOracle = std::function<std::size_t(std::span<const double>)>;

struct BoundaryParams {
  std::size_t target_class = 0;
  std::size_t budget = 5000;
  std::uint64_t seed = 0;
  int hanning_window = 21;
  /// Orthogonal step, relative to the current distance.
  double spherical_step = 0.05;
  /// Step toward the victim, relative to the current distance.
  double source_step = 0.05;
  double step_adaptation = 1.5;
  double target_acceptance = 0.25;
  std::size_t adaptation_window = 20;
  /// Binary-search queries spent moving the seed toward the victim first.
  std::size_t line_search_steps = 12;
};

struct BoundaryResult {
  AdversarialExample example;
  bool improved = false;
  std::size_t queries = 0;
  double initial_distance = 0.0;
  double final_distance = 0.0;
  /// Euclidean distance to the victim after every accepted step.
  std::vector<double> accepted_distances;
};

/// Decision-based attack that walks a target-class seed toward the victim
/// using only class queries. Every accepted candidate is classified as the
/// target; distances never increase. Throws if the seed is not classified as
/// the target class.
BoundaryResult boundary_attack(const ClassOracle& query, std::span<const double> victim,
                               std::span<const double> seed_sample, const BoundaryParams& params);

// ---------------------------------------------------------------------------
// Persisted adversarial sets

struct AdversarialRecord {
  std::string id;
  std::size_t label = 0;
  AdversarialExample example;
};

struct AdversarialSet {
  /// Content hash of the records; identifies the set in reports.
  std::string manifest_id;
  std::string attack;
  std::string source_model;
  AttackParams params;
  std::vector<AdversarialRecord> records;
};

std::string compute_manifest_id(const AdversarialSet& set);

/// Attacks every signal with SAP (PGD when t' = 0) against `model`.
AdversarialSet generate_adversarial_set(const ClassifierModel& model, const std::string& model_id,
                                        std::span<const Array1D> signals,
                                        std::span<const std::size_t> labels,
                                        std::span<const std::string> ids, const AttackParams& params);

/// Writes samples/<id>.json plus an append-only, hash-chained manifest.jsonl.
void write_adversarial_set(const AdversarialSet& set, const std::filesystem::path& dir);
/// Reads a set back, verifying every per-sample checksum and the chain.
AdversarialSet read_adversarial_set(const std::filesystem::path& dir);
/// Appends a "use" entry recording that `model_id` was evaluated on the set.
void record_manifest_use(const std::filesystem::path& dir, const std::string& model_id,
                         const std::string& purpose);

}  // namespace ecgadv
