#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ecgadv/attacks.hpp"
#include "ecgadv/digest.hpp"
#include "ecgadv/json_io.hpp"
#include "ecgadv/parallel.hpp"

namespace ecgadv {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestName = "manifest.jsonl";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::vector<std::string> lines;
  if (!fs::exists(p)) return lines;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// Each manifest line carries the hash of the line before it.
void append_manifest_line(const fs::path& dir, json entry) {
  const auto lines = read_lines(dir / kManifestName);
  entry["prev"] = lines.empty() ? std::string() : sha256_hex(lines.back());
  std::ofstream out(dir / kManifestName, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to manifest in " + dir.string());
  out << entry.dump() << '\n';
}

}  // namespace

std::string compute_manifest_id(const AdversarialSet& set) {
  std::string bytes = set.attack + '|' + set.source_model + '|' + json(set.params).dump() + '|';
  for (const auto& r : set.records) {
    bytes += r.id + ':' + std::to_string(r.label) + ':';
    bytes += sha256_hex(r.example.original) + sha256_hex(r.example.delta) +
             sha256_hex(r.example.applied) + sha256_hex(r.example.adversarial);
  }
  return sha256_hex(bytes);
}

AdversarialSet generate_adversarial_set(const ClassifierModel& model, const std::string& model_id,
                                        std::span<const Array1D> signals,
                                        std::span<const std::size_t> labels,
                                        std::span<const std::string> ids, const AttackParams& params) {
  if (signals.size() != labels.size() || signals.size() != ids.size()) {
    throw ShapeError("generate_adversarial_set: signals, labels and ids differ in length");
  }
  params.validate();
  AdversarialSet set;
  set.attack = params.t_prime == 0 ? "pgd" : "sap";
  set.source_model = model_id;
  set.params = params;
  set.records.resize(signals.size());
  parallel_for(signals.size(), [&](std::size_t i) {
    AdversarialExample ex = params.t_prime == 0 ? pgd_attack(model, signals[i], labels[i], params)
                                                : sap_attack(model, signals[i], labels[i], params);
    ex.provenance.attack = set.attack;
    ex.provenance.source_model = model_id;
    set.records[i] = {ids[i], labels[i], std::move(ex)};
  });
  set.manifest_id = compute_manifest_id(set);
  return set;
}

void write_adversarial_set(const AdversarialSet& set, const fs::path& dir) {
  fs::create_directories(dir / "samples");
  append_manifest_line(dir, {{"kind", "set"},
                             {"manifest_id", set.manifest_id},
                             {"attack", set.attack},
                             {"source_model", set.source_model},
                             {"params", set.params},
                             {"count", set.records.size()}});
  for (const auto& r : set.records) {
    json rec = {{"id", r.id},
                {"label", r.label},
                {"original", r.example.original},
                {"delta", r.example.delta},
                {"applied", r.example.applied},
                {"adversarial", r.example.adversarial},
                {"provenance",
                 {{"attack", r.example.provenance.attack},
                  {"source_model", r.example.provenance.source_model},
                  {"params", r.example.provenance.params}}}};
    const std::string text = rec.dump();
    const fs::path rel = fs::path("samples") / (r.id + ".json");
    {
      std::ofstream out(dir / rel, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + (dir / rel).string());
      out << text;
    }
    append_manifest_line(dir, {{"kind", "sample"},
                               {"set", set.manifest_id},
                               {"id", r.id},
                               {"file", rel.generic_string()},
                               {"label", r.label},
                               {"sha256", sha256_hex(text)}});
  }
}

AdversarialSet read_adversarial_set(const fs::path& dir) {
  const auto lines = read_lines(dir / kManifestName);
  if (lines.empty()) throw std::runtime_error("no adversarial manifest in " + dir.string());
  AdversarialSet set;
  std::string prev;
  bool have_set = false;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json entry = json::parse(lines[i]);
    if (entry.value("prev", "") != prev) {
      throw std::runtime_error("manifest chain broken at line " + std::to_string(i + 1));
    }
    prev = sha256_hex(lines[i]);
    const std::string kind = entry.at("kind");
    if (kind == "set") {
      // The latest set header wins; earlier sets remain in the audit log.
      set = AdversarialSet{};
      set.manifest_id = entry.at("manifest_id");
      set.attack = entry.at("attack");
      set.source_model = entry.at("source_model");
      set.params = entry.at("params").get<AttackParams>();
      have_set = true;
    } else if (kind == "sample") {
      if (!have_set || entry.at("set") != set.manifest_id) continue;
      const std::string text = read_file(dir / entry.at("file").get<std::string>());
      if (sha256_hex(text) != entry.at("sha256")) {
        throw std::runtime_error("checksum mismatch for sample " + entry.at("id").get<std::string>());
      }
      const json rec = json::parse(text);
      AdversarialRecord r;
      r.id = rec.at("id");
      r.label = rec.at("label");
      r.example.original = rec.at("original").get<Array1D>();
      r.example.delta = rec.at("delta").get<Array1D>();
      r.example.applied = rec.at("applied").get<Array1D>();
      r.example.adversarial = rec.at("adversarial").get<Array1D>();
      r.example.provenance.attack = rec.at("provenance").at("attack");
      r.example.provenance.source_model = rec.at("provenance").at("source_model");
      r.example.provenance.params = rec.at("provenance").at("params").get<AttackParams>();
      set.records.push_back(std::move(r));
    }
  }
  if (!have_set) throw std::runtime_error("manifest in " + dir.string() + " has no set header");
  if (compute_manifest_id(set) != set.manifest_id) {
    throw std::runtime_error("adversarial set content does not match manifest id " + set.manifest_id);
  }
  return set;
}

void record_manifest_use(const fs::path& dir, const std::string& model_id, const std::string& purpose) {
  if (!fs::exists(dir / kManifestName)) throw std::runtime_error("no adversarial manifest in " + dir.string());
  append_manifest_line(dir, {{"kind", "use"}, {"model", model_id}, {"purpose", purpose}});
}

}  // namespace ecgadv
