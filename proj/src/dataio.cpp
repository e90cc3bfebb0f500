#include "ecgadv/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ecgadv/parallel.hpp"

namespace ecgadv {

namespace fs = std::filesystem;

namespace {

constexpr const char* kClassNames[kNumClasses] = {"Normal", "AF", "Other", "Noise"};

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

double parse_double(std::string_view s, const std::string& where) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw std::runtime_error("bad sample '" + std::string(s) + "' in " + where);
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

Array1D read_samples(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Array1D out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(parse_double(line, path.string()));
  }
  return out;
}

struct IndexEntry {
  std::string id;
  std::size_t label;
};

std::vector<IndexEntry> read_index(const fs::path& index_file) {
  std::ifstream in(index_file);
  if (!in) throw std::runtime_error("cannot read index " + index_file.string());
  std::vector<IndexEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view v = trim(line);
    if (v.empty()) continue;
    const auto comma = v.find(',');
    if (comma == std::string_view::npos) {
      throw std::runtime_error(index_file.string() + ":" + std::to_string(line_no) +
                               ": expected id,label");
    }
    const std::string id(trim(v.substr(0, comma)));
    const std::string_view token = trim(v.substr(comma + 1));
    if (line_no == 1 && lower(id) == "id") continue;
    try {
      entries.push_back({id, class_from_token(token)});
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(index_file.string() + ":" + std::to_string(line_no) + ": " +
                                  e.what());
    }
  }
  if (entries.empty()) throw std::runtime_error("index " + index_file.string() + " is empty");
  return entries;
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char b[sizeof(T)];
  in.read(reinterpret_cast<char*>(b), sizeof(T));
  if (!in) throw std::runtime_error("truncated MAT file");
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

}  // namespace

std::string class_name(std::size_t label) {
  if (label >= kNumClasses) throw std::invalid_argument("class index out of range");
  return kClassNames[label];
}

std::size_t class_from_token(std::string_view token) {
  const std::string t = lower(trim(token));
  if (t == "n" || t == "normal") return 0;
  if (t == "a" || t == "af") return 1;
  if (t == "o" || t == "other") return 2;
  if (t == "~" || t == "noise" || t == "p") return 3;
  throw std::invalid_argument("unknown label token '" + std::string(token) + "'");
}

std::array<std::size_t, kNumClasses> Dataset::class_counts() const {
  std::array<std::size_t, kNumClasses> c{};
  for (const auto& r : records) ++c.at(r.label);
  return c;
}

TrainingData Dataset::training_data() const {
  TrainingData d;
  d.signals.reserve(records.size());
  d.labels.reserve(records.size());
  for (const auto& r : records) {
    d.signals.push_back(r.samples);
    d.labels.push_back(r.label);
  }
  return d;
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.id);
  return out;
}

Dataset load_records(const fs::path& directory, const fs::path& index_file) {
  if (!fs::is_directory(directory)) throw std::runtime_error("no such directory " + directory.string());
  const auto entries = read_index(index_file);
  std::set<std::string> seen;
  std::vector<std::string> missing;
  for (const auto& e : entries) {
    if (!seen.insert(e.id).second) throw std::runtime_error("duplicate id '" + e.id + "' in index");
    if (!fs::exists(directory / (e.id + ".txt"))) missing.push_back(e.id);
  }
  if (!missing.empty()) {
    std::string msg = "missing record files for ids:";
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  Dataset d;
  d.records.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    Record r{entries[i].id, read_samples(directory / (entries[i].id + ".txt")), entries[i].label};
    if (r.samples.empty()) throw std::runtime_error("record " + r.id + " has no samples");
    d.records[i] = std::move(r);
  });
  d.provenance.push_back("load " + directory.string() + " index " + index_file.string());
  return d;
}

Record preprocess_record(const Record& record, std::size_t length) {
  if (record.samples.empty()) throw std::invalid_argument("record " + record.id + " is empty");
  Record out{record.id, {}, record.label};
  const std::size_t n = record.samples.size();
  if (n >= length) {
    out.samples.assign(record.samples.begin(), record.samples.begin() + static_cast<std::ptrdiff_t>(length));
  } else {
    const std::size_t left = (length - n) / 2;
    out.samples.assign(length, 0.0);
    std::copy(record.samples.begin(), record.samples.end(),
              out.samples.begin() + static_cast<std::ptrdiff_t>(left));
  }
  return out;
}

Dataset preprocess(const Dataset& dataset, std::size_t length) {
  Dataset out;
  out.records.resize(dataset.size());
  parallel_for(dataset.size(), [&](std::size_t i) {
    out.records[i] = preprocess_record(dataset.records[i], length);
  });
  out.provenance = dataset.provenance;
  out.provenance.push_back("preprocess length " + std::to_string(length));
  return out;
}

Dataset rebalance(const Dataset& dataset, const RebalanceConfig& config) {
  Dataset out;
  out.provenance = dataset.provenance;
  out.provenance.push_back("rebalance noise +" + std::to_string(config.noise_copies) + " af +" +
                           std::to_string(config.af_copies));
  for (const auto& r : dataset.records) {
    out.records.push_back(r);
    std::size_t copies = 0;
    if (r.label == static_cast<std::size_t>(EcgClass::noise)) copies = config.noise_copies;
    if (r.label == static_cast<std::size_t>(EcgClass::af)) copies = config.af_copies;
    for (std::size_t k = 1; k <= copies; ++k) {
      Record dup = r;
      dup.id = r.id + "__dup" + std::to_string(k);
      out.records.push_back(std::move(dup));
    }
  }
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& dataset, double train_fraction,
                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train fraction must lie in (0, 1)");
  }
  const std::size_t n = dataset.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_fraction));
  std::pair<Dataset, Dataset> parts;
  for (std::size_t k = 0; k < n; ++k) {
    (k < n_train ? parts.first : parts.second).records.push_back(dataset.records[order[k]]);
  }
  const std::string tag = "split " + std::to_string(train_fraction) + " seed " + std::to_string(seed);
  parts.first.provenance = dataset.provenance;
  parts.first.provenance.push_back(tag + " train");
  parts.second.provenance = dataset.provenance;
  parts.second.provenance.push_back(tag + " test");
  return parts;
}

std::pair<Dataset, Dataset> split_then_rebalance(const Dataset& dataset, double train_fraction,
                                                 std::uint64_t seed, const RebalanceConfig& config) {
  auto [train, test] = split_dataset(dataset, train_fraction, seed);
  return {rebalance(train, config), rebalance(test, config)};
}

namespace {

double gauss(double t, double centre, double width) {
  const double d = (t - centre) / width;
  return std::exp(-0.5 * d * d);
}

struct Beat {
  double at;
  bool ectopic;
};

}  // namespace

Dataset synthesize_ecg(std::size_t per_class, std::size_t length, std::uint64_t seed) {
  if (per_class < 1) throw std::invalid_argument("synthesize_ecg: per_class must be >= 1");
  if (length < 64) throw std::invalid_argument("synthesize_ecg: length must be >= 64");
  Dataset d;
  d.records.resize(per_class * kNumClasses);
  const double L = static_cast<double>(length);
  // One generator per record keeps records independent of each other.
  parallel_for(d.records.size(), [&](std::size_t idx) {
    const std::size_t label = idx % kNumClasses;
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + idx);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto U = [&](double a, double b) { return a + (b - a) * uni(rng); };

    Array1D x(length, 0.0);
    const double amp = U(0.8, 1.2);
    const double rr = U(30.0, 40.0);
    const double noise_level = U(0.01, 0.03);

    std::vector<Beat> beats;
    double t = U(0.0, rr);
    while (t < L + rr) {
      bool ectopic = false;
      double next = rr * (1.0 + 0.02 * normal(rng));
      if (label == 1) next = rr * U(0.55, 1.45);
      if (label == 2 && uni(rng) < 0.35) {
        ectopic = true;
        next = rr * U(1.2, 1.5);
      }
      beats.push_back({t, ectopic});
      t += next;
    }

    const double wide = label == 2 ? U(2.5, 3.5) : U(1.0, 1.4);
    for (const auto& b : beats) {
      for (std::size_t n = 0; n < length; ++n) {
        const double s = static_cast<double>(n);
        double v = 0.0;
        if (label == 0 || (label == 2 && !b.ectopic)) v += 0.25 * gauss(s, b.at - 11.0, 2.5);
        if (label == 3) continue;
        const double w = b.ectopic ? 3.5 : wide;
        v += -0.12 * gauss(s, b.at - 2.0 * w, 0.8 * w);
        v += (b.ectopic ? 1.4 : 1.0) * gauss(s, b.at, w);
        v += -0.25 * gauss(s, b.at + 2.0 * w, 0.9 * w);
        const double t_amp = label == 2 ? -0.3 : 0.3;
        v += t_amp * gauss(s, b.at + 13.0, 4.5);
        x[n] += amp * v;
      }
    }

    if (label == 1) {
      // Fibrillatory baseline.
      const double f1 = U(0.7, 1.0), f2 = U(1.1, 1.4);
      const double p1 = U(0.0, 6.3), p2 = U(0.0, 6.3);
      const double a = U(0.10, 0.15);
      for (std::size_t n = 0; n < length; ++n) {
        const double s = static_cast<double>(n);
        x[n] += a * (std::sin(f1 * s + p1) + 0.6 * std::sin(f2 * s + p2));
      }
    }

    if (label == 3) {
      const double level = U(0.25, 0.5);
      const double wander = U(0.3, 0.8);
      const double fw = U(0.01, 0.04);
      const double pw = U(0.0, 6.3);
      double smooth = 0.0;
      for (std::size_t n = 0; n < length; ++n) {
        smooth = 0.7 * smooth + 0.3 * normal(rng);
        x[n] += level * (normal(rng) + smooth) + wander * std::sin(fw * static_cast<double>(n) + pw);
        if (uni(rng) < 0.02) x[n] += U(-1.0, 1.0);
      }
    } else {
      const double wander = U(0.0, 0.1);
      const double fw = U(0.005, 0.02);
      const double pw = U(0.0, 6.3);
      for (std::size_t n = 0; n < length; ++n) {
        x[n] += noise_level * normal(rng) + wander * std::sin(fw * static_cast<double>(n) + pw);
      }
    }

    char id[32];
    std::snprintf(id, sizeof id, "S%06zu", idx);
    d.records[idx] = {id, std::move(x), label};
  });
  d.provenance.push_back("synthesize per_class " + std::to_string(per_class) + " length " +
                         std::to_string(length) + " seed " + std::to_string(seed));
  return d;
}

void write_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "records");
  std::ofstream index(dir / "index.csv");
  if (!index) throw std::runtime_error("cannot write " + (dir / "index.csv").string());
  index << "id,label\n";
  for (const auto& r : dataset.records) index << r.id << ',' << class_name(r.label) << '\n';
  parallel_for(dataset.size(), [&](std::size_t i) {
    const auto& r = dataset.records[i];
    std::ofstream out(dir / "records" / (r.id + ".txt"));
    if (!out) throw std::runtime_error("cannot write record " + r.id);
    for (double v : r.samples) out << format_double(v) << '\n';
  });
  std::ofstream prov(dir / "provenance.txt");
  for (const auto& p : dataset.provenance) prov << p << '\n';
}

Dataset read_dataset(const fs::path& dir) {
  Dataset d = load_records(dir / "records", dir / "index.csv");
  std::ifstream prov(dir / "provenance.txt");
  std::vector<std::string> history;
  std::string line;
  while (std::getline(prov, line)) {
    if (!line.empty()) history.push_back(line);
  }
  history.insert(history.end(), d.provenance.begin(), d.provenance.end());
  d.provenance = std::move(history);
  return d;
}

Array1D read_mat_v4(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto type = read_le<std::int32_t>(in);
  const auto rows = read_le<std::int32_t>(in);
  const auto cols = read_le<std::int32_t>(in);
  const auto imag = read_le<std::int32_t>(in);
  const auto name_len = read_le<std::int32_t>(in);
  const int machine = type / 1000;
  const int precision = (type / 10) % 10;
  const int matrix_type = type % 10;
  if (type < 0 || machine != 0 || matrix_type != 0 || rows < 0 || cols < 0 || name_len < 0) {
    throw std::runtime_error(path.string() + ": unsupported MAT header (only little-endian level-4 "
                             "full numeric matrices are read)");
  }
  (void)imag;
  in.seekg(name_len, std::ios::cur);
  const std::size_t count = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  Array1D out(count);
  for (std::size_t i = 0; i < count; ++i) {
    switch (precision) {
      case 0: out[i] = read_le<double>(in); break;
      case 1: out[i] = read_le<float>(in); break;
      case 2: out[i] = read_le<std::int32_t>(in); break;
      case 3: out[i] = read_le<std::int16_t>(in); break;
      case 4: out[i] = read_le<std::uint16_t>(in); break;
      case 5: out[i] = read_le<std::uint8_t>(in); break;
      default: throw std::runtime_error(path.string() + ": unknown MAT precision");
    }
  }
  return out;
}

std::size_t convert_challenge_directory(const fs::path& challenge_dir, const fs::path& out_dir) {
  const auto entries = read_index(challenge_dir / "REFERENCE.csv");
  Dataset d;
  d.records.resize(entries.size());
  parallel_for(entries.size(), [&](std::size_t i) {
    const fs::path mat = challenge_dir / (entries[i].id + ".mat");
    if (!fs::exists(mat)) throw std::runtime_error("missing record file " + mat.string());
    d.records[i] = {entries[i].id, read_mat_v4(mat), entries[i].label};
  });
  d.provenance.push_back("convert " + challenge_dir.string());
  write_dataset(d, out_dir);
  return d.size();
}

}  // namespace ecgadv
