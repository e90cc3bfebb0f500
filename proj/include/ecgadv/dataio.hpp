#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ecgadv/defenses.hpp"

namespace ecgadv {

/// Class indices: 0 Normal, 1 AF, 2 Other, 3 Noise.
enum class EcgClass : std::size_t { normal = 0, af = 1, other = 2, noise = 3 };

std::string class_name(std::size_t label);
/// Accepts challenge tokens (N, A, O, ~) and names (normal, af, other, noise),
/// case-insensitive.
std::size_t class_from_token(std::string_view token);

struct Record {
  std::string id;
  Array1D samples;
  std::size_t label = 0;
};

struct Dataset {
  std::vector<Record> records;
  /// Source and transform history, oldest first.
  std::vector<std::string> provenance;

  std::size_t size() const { return records.size(); }
  std::array<std::size_t, kNumClasses> class_counts() const;
  TrainingData training_data() const;
  std::vector<std::string> ids() const;
};

/// Reads `index_file` (CSV "id,label", optional header) and one
/// <directory>/<id>.txt per entry with one sample per line.
Dataset load_records(const std::filesystem::path& directory, const std::filesystem::path& index_file);

inline constexpr std::size_t kCanonicalLength = 9000;

/// Zero-pads symmetrically (odd deficit: extra zero on the right) or keeps
/// the first `length` samples.
Record preprocess_record(const Record& record, std::size_t length = kCanonicalLength);
Dataset preprocess(const Dataset& dataset, std::size_t length = kCanonicalLength);

struct RebalanceConfig {
  /// Copies added per Noise record (5 gives 6x in total).
  std::size_t noise_copies = 5;
  /// Copies added per AF record.
  std::size_t af_copies = 1;
};

/// Adds exact copies of Noise and AF records with "__dup<k>" id suffixes,
/// each placed right after its original.
Dataset rebalance(const Dataset& dataset, const RebalanceConfig& config = {});

/// Deterministic shuffled split: floor(n * fraction) records go to train.
std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, double train_fraction,
                                          std::uint64_t seed);

/// Splits the originals first and rebalances each part, so no record and
/// its copies straddle the split.
std::pair<Dataset, Dataset> split_then_rebalance(const Dataset& dataset, double train_fraction,
                                                 std::uint64_t seed, const RebalanceConfig& config = {});

/// Four ECG-like families: regular beats with P waves (Normal), irregular
/// RR without P waves over a fibrillatory baseline (AF), wide or ectopic
/// beats with inverted T (Other), broadband noise with baseline wander
/// (Noise). Bit-identical per seed.
Dataset synthesize_ecg(std::size_t per_class, std::size_t length, std::uint64_t seed);

/// index.csv + records/<id>.txt + provenance.txt.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// First real matrix of a MATLAB level-4 file, flattened column-major.
Array1D read_mat_v4(const std::filesystem::path& path);

/// Converts a challenge directory (REFERENCE.csv + <id>.mat) into the
/// dataset layout under `out_dir`. Returns the number of records.
std::size_t convert_challenge_directory(const std::filesystem::path& challenge_dir,
                                        const std::filesystem::path& out_dir);

}  // namespace ecgadv
