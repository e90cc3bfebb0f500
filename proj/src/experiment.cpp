#include "ecgadv/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ecgadv/digest.hpp"
#include "ecgadv/json_io.hpp"
#include "ecgadv/parallel.hpp"

namespace ecgadv {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool is_situation(const std::string& s) { return s == "I" || s == "II"; }

const TrainedDefense* find_method(const std::vector<TrainedDefense>& ds, DefenseMethod m) {
  for (const auto& d : ds) {
    if (d.method == m) return &d;
  }
  return nullptr;
}

std::size_t model_input_length(const DataConfig& d) {
  if (d.source == "synthetic") return d.length;
  return d.preprocess ? d.target_length : 0;
}

}  // namespace

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> out;
  const auto& d = data;
  if (d.source == "synthetic") {
    if (d.per_class < 1) out.push_back("data.per_class must be >= 1");
    if (d.length < 64) out.push_back("data.length must be >= 64");
  } else if (d.source == "records") {
    if (d.records_dir.empty()) {
      out.push_back("data.records_dir is required for source 'records'");
    } else if (!fs::is_directory(d.records_dir)) {
      out.push_back("data.records_dir '" + d.records_dir + "' is not a directory");
    }
    if (d.index_file.empty()) {
      out.push_back("data.index_file is required for source 'records'");
    } else if (!fs::exists(d.index_file)) {
      out.push_back("data.index_file '" + d.index_file + "' does not exist");
    }
    if (d.preprocess && d.target_length < 1) out.push_back("data.target_length must be >= 1");
  } else {
    out.push_back("data.source must be 'synthetic' or 'records', got '" + d.source + "'");
  }
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) {
    out.push_back("data.train_fraction must lie in (0, 1)");
  }

  if (model_spec != "desk" && model_spec != "cnn13") {
    out.push_back("model_spec must be 'desk' or 'cnn13', got '" + model_spec + "'");
  } else if (const std::size_t len = model_input_length(d); len > 0) {
    try {
      (void)build_model(model_spec, len, kNumClasses, 0);
    } catch (const std::exception& e) {
      out.push_back("model_spec '" + model_spec + "' cannot take inputs of length " +
                    std::to_string(len) + ": " + e.what());
    }
  }

  if (defenses.empty()) out.push_back("defenses must not be empty");
  bool has_source = false;
  for (const auto& name : defenses) {
    try {
      if (defense_method_from_string(name) == DefenseMethod::none) has_source = true;
    } catch (const std::exception& e) {
      out.push_back(std::string("defenses: ") + e.what());
    }
  }

  if (!(amplitude_scale > 0.0)) out.push_back("amplitude_scale must be > 0");
  if (amplitude_scale > 0.0) {
    for (auto& v : effective_plan(0).violations()) out.push_back(v);
  }

  const auto& p = protocol;
  for (const auto& s : p.situations) {
    if (!is_situation(s)) out.push_back("protocol.situations: unknown situation '" + s + "'");
    if (s == "I" && !has_source) out.push_back("situation I needs the 'none' defense as source");
  }
  auto check_attack = [&](const AttackParams& a, const std::string& where) {
    try {
      a.validate();
    } catch (const std::exception& e) {
      out.push_back(where + ": " + e.what());
    }
  };
  check_attack(p.attack, "protocol.attack");
  check_attack(p.epsilon_sweep_attack, "protocol.epsilon_sweep_attack");
  if (p.run_sweeps) {
    if (p.t_prime_values.empty()) out.push_back("protocol.t_prime_values must not be empty");
    for (double v : p.t_prime_values) {
      if (v < 0.0 || v != std::floor(v)) {
        out.push_back("protocol.t_prime_values must be integers >= 0");
        break;
      }
    }
    if (p.epsilon_values.empty()) out.push_back("protocol.epsilon_values must not be empty");
    for (double v : p.epsilon_values) {
      if (!(v > 0.0)) {
        out.push_back("protocol.epsilon_values must be > 0");
        break;
      }
    }
    if (!is_situation(p.sweep_situation)) {
      out.push_back("protocol.sweep_situation must be I or II");
    } else if (p.sweep_situation == "I" && !has_source) {
      out.push_back("sweeps in situation I need the 'none' defense as source");
    }
  }
  if (p.run_boundary) {
    if (!has_source) out.push_back("the boundary protocol needs the 'none' defense as source");
    if (p.boundary_budget < 1) out.push_back("protocol.boundary_budget must be >= 1");
    if (p.boundary_hanning_window < 1 || p.boundary_hanning_window % 2 == 0) {
      out.push_back("protocol.boundary_hanning_window must be odd and >= 1");
    }
  }
  if (seeds.empty()) out.push_back("seeds must not be empty");
  return out;
}

void ExperimentConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid experiment config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw std::invalid_argument(msg);
}

AttackParams ExperimentConfig::scaled(const AttackParams& a) const {
  AttackParams s = a;
  s.epsilon *= amplitude_scale;
  s.alpha *= amplitude_scale;
  return s;
}

TrainPlan ExperimentConfig::effective_plan(std::uint64_t seed) const {
  TrainPlan p = plan;
  p.model_spec = model_spec;
  p.seed = seed;
  p.attack = scaled(plan.attack);
  p.regularizer.epsilon_max *= amplitude_scale;
  p.regularizer.lambda *= amplitude_scale * amplitude_scale;
  return p;
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.data.source = "synthetic";
  c.data.per_class = 120;
  c.data.length = 256;
  c.data.train_fraction = 0.8;
  c.data.rebalance = false;
  c.model_spec = "desk";
  c.plan.e1 = 30;
  c.plan.e2 = 30;
  c.plan.attack.anchor = ClipAnchor::original;
  c.protocol.attack.anchor = ClipAnchor::original;
  c.protocol.epsilon_sweep_attack.anchor = ClipAnchor::original;
  c.amplitude_scale = 0.015;
  return c;
}

ExperimentConfig ExperimentConfig::full() {
  ExperimentConfig c;
  c.data.source = "records";
  c.data.train_fraction = 0.9;
  c.data.rebalance = true;
  c.model_spec = "cnn13";
  c.plan.e1 = 100;
  c.plan.e2 = 100;
  c.amplitude_scale = 1.0;
  c.seeds = {1, 2, 3, 4, 5};
  return c;
}

void to_json(json& j, const ExperimentConfig& c) {
  const auto& d = c.data;
  j = {{"data",
        {{"source", d.source},
         {"per_class", d.per_class},
         {"length", d.length},
         {"seed", d.seed},
         {"records_dir", d.records_dir},
         {"index_file", d.index_file},
         {"preprocess", d.preprocess},
         {"target_length", d.target_length},
         {"rebalance", d.rebalance},
         {"noise_copies", d.rebalance_config.noise_copies},
         {"af_copies", d.rebalance_config.af_copies},
         {"train_fraction", d.train_fraction},
         {"leakage_safe_split", d.leakage_safe_split}}},
       {"model_spec", c.model_spec},
       {"defenses", c.defenses},
       {"plan", c.plan},
       {"amplitude_scale", c.amplitude_scale},
       {"protocol",
        {{"situations", c.protocol.situations},
         {"attack", c.protocol.attack},
         {"t_prime_values", c.protocol.t_prime_values},
         {"epsilon_values", c.protocol.epsilon_values},
         {"epsilon_sweep_attack", c.protocol.epsilon_sweep_attack},
         {"sweep_situation", c.protocol.sweep_situation},
         {"run_sweeps", c.protocol.run_sweeps},
         {"run_boundary", c.protocol.run_boundary},
         {"boundary_budget", c.protocol.boundary_budget},
         {"boundary_victims", c.protocol.boundary_victims},
         {"boundary_hanning_window", c.protocol.boundary_hanning_window}}},
       {"seeds", c.seeds},
       {"threads", c.threads}};
}

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown_keys(j, {"preset", "data", "model_spec", "defenses", "plan", "amplitude_scale",
                          "protocol", "seeds", "threads"},
                      "experiment config");
  const std::string preset = j.value("preset", "desk");
  ExperimentConfig c;
  if (preset == "desk") {
    c = ExperimentConfig::desk();
  } else if (preset == "full") {
    c = ExperimentConfig::full();
  } else {
    throw std::invalid_argument("unknown preset '" + preset + "' (expected desk or full)");
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown_keys(d, {"source", "per_class", "length", "seed", "records_dir", "index_file",
                            "preprocess", "target_length", "rebalance", "noise_copies", "af_copies",
                            "train_fraction", "leakage_safe_split"},
                        "data");
    auto& o = c.data;
    read(d, "source", o.source);
    read(d, "per_class", o.per_class);
    read(d, "length", o.length);
    read(d, "seed", o.seed);
    read(d, "records_dir", o.records_dir);
    read(d, "index_file", o.index_file);
    read(d, "preprocess", o.preprocess);
    read(d, "target_length", o.target_length);
    read(d, "rebalance", o.rebalance);
    read(d, "noise_copies", o.rebalance_config.noise_copies);
    read(d, "af_copies", o.rebalance_config.af_copies);
    read(d, "train_fraction", o.train_fraction);
    read(d, "leakage_safe_split", o.leakage_safe_split);
  }
  read(j, "model_spec", c.model_spec);
  read(j, "defenses", c.defenses);
  if (j.contains("plan")) from_json(j.at("plan"), c.plan);
  read(j, "amplitude_scale", c.amplitude_scale);
  if (j.contains("protocol")) {
    const json& p = j.at("protocol");
    reject_unknown_keys(p, {"situations", "attack", "t_prime_values", "epsilon_values",
                            "epsilon_sweep_attack", "sweep_situation", "run_sweeps", "run_boundary",
                            "boundary_budget", "boundary_victims", "boundary_hanning_window"},
                        "protocol");
    auto& o = c.protocol;
    read(p, "situations", o.situations);
    if (p.contains("attack")) from_json(p.at("attack"), o.attack);
    read(p, "t_prime_values", o.t_prime_values);
    read(p, "epsilon_values", o.epsilon_values);
    if (p.contains("epsilon_sweep_attack")) from_json(p.at("epsilon_sweep_attack"), o.epsilon_sweep_attack);
    read(p, "sweep_situation", o.sweep_situation);
    read(p, "run_sweeps", o.run_sweeps);
    read(p, "run_boundary", o.run_boundary);
    read(p, "boundary_budget", o.boundary_budget);
    read(p, "boundary_victims", o.boundary_victims);
    read(p, "boundary_hanning_window", o.boundary_hanning_window);
  }
  read(j, "seeds", c.seeds);
  read(j, "threads", c.threads);
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

void write_config_snapshot(const ExperimentConfig& c, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir / "config.json");
  if (!out) throw std::runtime_error("cannot write config snapshot in " + dir.string());
  out << json(c).dump(2) << '\n';
}

SplitData prepare_data(const DataConfig& config) {
  Dataset all;
  if (config.source == "synthetic") {
    all = synthesize_ecg(config.per_class, config.length, config.seed);
  } else {
    all = load_records(config.records_dir, config.index_file);
    if (config.preprocess) all = preprocess(all, config.target_length);
  }
  SplitData s;
  if (config.rebalance && config.leakage_safe_split) {
    auto parts = split_then_rebalance(all, config.train_fraction, config.seed, config.rebalance_config);
    s.train = std::move(parts.first);
    s.test = std::move(parts.second);
  } else {
    if (config.rebalance) all = rebalance(all, config.rebalance_config);
    auto parts = split_dataset(all, config.train_fraction, config.seed);
    s.train = std::move(parts.first);
    s.test = std::move(parts.second);
  }
  return s;
}

namespace {

json data_manifest(const SplitData& s) {
  auto describe = [](const Dataset& d) {
    std::string bytes;
    for (const auto& r : d.records) bytes += r.id + ':' + sha256_hex(r.samples) + ';';
    const auto counts = d.class_counts();
    return json{{"records", d.size()},
                {"class_counts", counts},
                {"sha256", sha256_hex(bytes)},
                {"provenance", d.provenance}};
  };
  return {{"train", describe(s.train)}, {"test", describe(s.test)}};
}

void note(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const fs::path& out,
                                const ProgressFn& progress) {
  config.validate();
  if (config.threads > 0) set_max_threads(config.threads);
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(out);
  write_config_snapshot(config, out);

  const SplitData split = prepare_data(config.data);
  {
    std::ofstream m(out / "data_manifest.json");
    m << data_manifest(split).dump(2) << '\n';
  }
  const TrainingData train = split.train.training_data();
  const TrainingData test = split.test.training_data();
  note(progress, "data: " + std::to_string(train.size()) + " train / " + std::to_string(test.size()) +
                     " test records");

  ExperimentResult result;
  for (std::uint64_t seed : config.seeds) {
    SeedResult sr;
    sr.seed = seed;
    const fs::path seed_dir = out / ("seed" + std::to_string(seed));
    const TrainPlan plan = config.effective_plan(seed);
    for (const auto& name : config.defenses) {
      const auto t0 = std::chrono::steady_clock::now();
      TrainedDefense d = train_defense(defense_method_from_string(name), train, plan);
      d.save(seed_dir / "models" / name);
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream msg;
      msg << "seed " << seed << ": trained " << name << " in " << std::fixed
          << std::setprecision(1) << secs << "s";
      note(progress, msg.str());
      sr.defenses.push_back(std::move(d));
    }
    const TrainedDefense* source = find_method(sr.defenses, DefenseMethod::none);

    SituationOptions opts;
    opts.seed = seed;
    opts.persist_dir = seed_dir / "adversarial";
    const AttackParams headline = config.scaled(config.protocol.attack);
    for (const auto& s : config.protocol.situations) {
      sr.runs.push_back(run_situation(situation_from_string(s), sr.defenses, source, headline, test, opts));
      note(progress, "seed " + std::to_string(seed) + ": situation " + s + " done");
    }

    if (config.protocol.run_sweeps) {
      const Situation sweep_situation = situation_from_string(config.protocol.sweep_situation);
      auto tp = parameter_sweep(SweepAxis::t_prime, config.protocol.t_prime_values, headline,
                                sweep_situation, sr.defenses, source, test, opts);
      std::vector<double> eps;
      for (double v : config.protocol.epsilon_values) eps.push_back(v * config.amplitude_scale);
      auto ep = parameter_sweep(SweepAxis::epsilon, eps, config.scaled(config.protocol.epsilon_sweep_attack),
                                sweep_situation, sr.defenses, source, test, opts);
      // Report epsilon in reference units.
      for (std::size_t k = 0; k < ep.size(); ++k) ep[k].axis_value = config.protocol.epsilon_values[k];
      for (auto& r : tp) sr.runs.push_back(std::move(r));
      for (auto& r : ep) sr.runs.push_back(std::move(r));
      note(progress, "seed " + std::to_string(seed) + ": sweeps done");
    }

    if (config.protocol.run_boundary) {
      std::vector<TrainedDefense> defended;
      for (const auto& d : sr.defenses) {
        if (d.method != DefenseMethod::none) defended.push_back(d);
      }
      BoundaryEvalOptions bo;
      bo.budget = config.protocol.boundary_budget;
      bo.max_victims = config.protocol.boundary_victims;
      bo.seed = seed;
      bo.attack.hanning_window = config.protocol.boundary_hanning_window;
      sr.runs.push_back(run_boundary_eval(defended, *source, test, bo));
      note(progress, "seed " + std::to_string(seed) + ": boundary attack kept " +
                         std::to_string(sr.runs.back().generated) + " of " +
                         std::to_string(sr.runs.back().attempted) + " victims");
    }

    for (const auto& run : sr.runs) {
      for (auto& row : result_rows(run)) result.rows.push_back(std::move(row));
    }
    result.seeds.push_back(std::move(sr));
  }

  write_results_csv(result.rows, out / "results.csv");
  result.summary = summarize(result.rows);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream s(out / "summary.json");
  s << json{{"groups", result.summary}, {"seconds", result.seconds}}.dump(2) << '\n';
  return result;
}

namespace {

const ModelReport* report_for(const ProtocolRun& run, const std::string& method) {
  for (const auto& r : run.reports) {
    if (r.method == method) return &r;
  }
  return nullptr;
}

const ProtocolRun* find_run(const SeedResult& s, Situation situation, const std::string& axis) {
  for (const auto& r : s.runs) {
    if (r.situation == situation && r.axis == axis) return &r;
  }
  return nullptr;
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

}  // namespace

std::vector<CriterionVerdict> assess_desk_result(const ExperimentConfig& config,
                                                 const ExperimentResult& result) {
  std::vector<CriterionVerdict> out;

  // Undefended accuracy drop under its own SAP attack, in accuracy points.
  {
    CriterionVerdict v{"undefended self-SAP drop >= 30 points", true, ""};
    for (const auto& s : result.seeds) {
      const ProtocolRun* run = find_run(s, Situation::II, "none");
      const ModelReport* r = run ? report_for(*run, "none") : nullptr;
      if (r == nullptr) {
        v.pass = false;
        v.detail += "seed " + std::to_string(s.seed) + ": no situation II run; ";
        continue;
      }
      const double drop = (r->clean.accuracy - r->adversarial.accuracy) * 100.0;
      v.pass = v.pass && drop >= 30.0;
      v.detail += "seed " + std::to_string(s.seed) + ": " + fmt(r->clean.accuracy) + " -> " +
                  fmt(r->adversarial.accuracy) + " (" + fmt(drop, 1) + " pts); ";
    }
    out.push_back(v);
  }

  {
    CriterionVerdict v{"situation II: ADT >= DD and ADT >= undefended", true, ""};
    for (const auto& s : result.seeds) {
      const ProtocolRun* run = find_run(s, Situation::II, "none");
      const ModelReport* adt = run ? report_for(*run, "adt") : nullptr;
      const ModelReport* dd = run ? report_for(*run, "dd") : nullptr;
      const ModelReport* none = run ? report_for(*run, "none") : nullptr;
      if (!adt || !dd || !none) {
        v.pass = false;
        v.detail += "seed " + std::to_string(s.seed) + ": missing adt/dd/none report; ";
        continue;
      }
      const double a = adt->adversarial.accuracy;
      v.pass = v.pass && a >= dd->adversarial.accuracy && a >= none->adversarial.accuracy;
      v.detail += "seed " + std::to_string(s.seed) + ": adt " + fmt(a) + " dd " +
                  fmt(dd->adversarial.accuracy) + " none " + fmt(none->adversarial.accuracy) + "; ";
    }
    out.push_back(v);
  }

  {
    CriterionVerdict v{"situation I: ADT drop <= 10", true, ""};
    for (const auto& s : result.seeds) {
      const ProtocolRun* run = find_run(s, Situation::I, "none");
      const ModelReport* adt = run ? report_for(*run, "adt") : nullptr;
      if (!adt) {
        v.pass = false;
        v.detail += "seed " + std::to_string(s.seed) + ": missing adt report; ";
        continue;
      }
      v.pass = v.pass && adt->adversarial.drop_percent <= 10.0;
      v.detail += "seed " + std::to_string(s.seed) + ": " + fmt(adt->adversarial.drop_percent, 2) + "%; ";
    }
    out.push_back(v);
  }

  {
    CriterionVerdict v{"sweep tables complete", true, ""};
    const std::size_t models = config.defenses.size();
    for (const auto& [axis, values] :
         {std::pair{std::string("t_prime"), config.protocol.t_prime_values},
          std::pair{std::string("epsilon"), config.protocol.epsilon_values}}) {
      std::size_t rows = 0;
      for (const auto& r : result.rows) {
        if (r.axis == axis) ++rows;
      }
      const std::size_t expected = values.size() * models * result.seeds.size();
      v.pass = v.pass && rows == expected;
      v.detail += axis + " rows " + std::to_string(rows) + "/" + std::to_string(expected) + "; ";
    }
    out.push_back(v);
  }

  {
    // Mean over seeds per method; each step may rise by at most 5 points.
    CriterionVerdict v{"defended accuracy non-increasing in epsilon (+-5 points)", true, ""};
    std::map<std::string, std::map<double, std::vector<double>>> acc;
    for (const auto& r : result.rows) {
      if (r.axis == "epsilon" && r.method != "none") acc[r.method][r.axis_value].push_back(r.metrics.accuracy);
    }
    for (const auto& [method, by_eps] : acc) {
      double prev = 2.0;
      std::string trace;
      for (const auto& [eps, vals] : by_eps) {
        double m = 0.0;
        for (double x : vals) m += x;
        m /= static_cast<double>(vals.size());
        if (m > prev + 0.05) v.pass = false;
        prev = m;
        trace += fmt(m, 2) + " ";
      }
      v.detail += method + ": " + trace + "; ";
    }
    if (acc.empty()) {
      v.pass = false;
      v.detail = "no epsilon sweep rows";
    }
    out.push_back(v);
  }

  {
    CriterionVerdict v{"boundary: source 0%, every defended model > 0%", true, ""};
    for (const auto& s : result.seeds) {
      const ProtocolRun* run = find_run(s, Situation::boundary, "none");
      if (run == nullptr || run->generated == 0) {
        v.pass = false;
        v.detail += "seed " + std::to_string(s.seed) + ": no boundary samples; ";
        continue;
      }
      v.detail += "seed " + std::to_string(s.seed) + " (" + std::to_string(run->generated) + "/" +
                  std::to_string(run->attempted) + "):";
      for (const auto& r : run->reports) {
        const bool is_source = r.method.ends_with("@source");
        const double a = r.adversarial.accuracy;
        if (is_source ? a != 0.0 : !(a > 0.0)) v.pass = false;
        v.detail += " " + r.method + " " + fmt(a);
      }
      v.detail += "; ";
    }
    out.push_back(v);
  }
  return out;
}

}  // namespace ecgadv
