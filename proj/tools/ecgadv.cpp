// Command-line driver: data preparation, training, attacks, evaluation,
// sweeps and the desk reproduction pipeline.
//
// Precedence: built-in preset < --config file < command-line flags.
// Output goes to --out, else $ECGADV_OUT/<subcommand>, else runs/<subcommand>.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ecgadv/dataio.hpp"
#include "ecgadv/defenses.hpp"
#include "ecgadv/eval.hpp"
#include "ecgadv/experiment.hpp"
#include "ecgadv/json_io.hpp"
#include "ecgadv/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ecgadv;

namespace {

struct Globals {
  std::size_t threads = 0;
  std::string config;
  std::string out;
};

fs::path output_dir(const Globals& g, const std::string& command) {
  if (!g.out.empty()) return g.out;
  if (const char* root = std::getenv("ECGADV_OUT"); root != nullptr && *root != '\0') {
    return fs::path(root) / command;
  }
  return fs::path("runs") / command;
}

ExperimentConfig base_config(const Globals& g) {
  return g.config.empty() ? ExperimentConfig::desk() : load_experiment_config(g.config);
}

void write_command(const fs::path& out, int argc, char** argv) {
  json args = json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  std::ofstream f(out / "command.json");
  f << json{{"argv", args}}.dump(2) << '\n';
}

/// A prepared directory holds train/ and test/; a plain dataset directory
/// holds index.csv itself.
Dataset dataset_part(const fs::path& dir, const std::string& part) {
  if (fs::exists(dir / "index.csv")) return read_dataset(dir);
  if (fs::exists(dir / part / "index.csv")) return read_dataset(dir / part);
  throw std::runtime_error("no dataset at " + dir.string() + " (expected index.csv or " + part +
                           "/index.csv)");
}

std::vector<TrainedDefense> load_defenses(const std::vector<std::string>& dirs) {
  std::vector<TrainedDefense> out;
  for (const auto& d : dirs) out.push_back(TrainedDefense::load(d));
  return out;
}

void write_rows(const std::vector<ProtocolRun>& runs, const fs::path& out) {
  std::vector<ResultRow> rows;
  for (const auto& r : runs) {
    for (auto& row : result_rows(r)) rows.push_back(std::move(row));
  }
  write_results_csv(rows, out / "results.csv");
  std::ofstream s(out / "summary.json");
  s << json{{"groups", summarize(rows)}}.dump(2) << '\n';
}

void progress(const std::string& msg) { std::cerr << "[ecgadv] " << msg << std::endl; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial attacks and defenses for single-lead ECG classifiers"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--threads", g.threads, "Cap on worker threads (0 = all cores)");
  app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "Output directory");

  // data prepare
  auto* data = app.add_subcommand("data", "Dataset utilities");
  data->require_subcommand(1);
  auto* prepare = data->add_subcommand("prepare", "Build the train/test split described by the config");
  std::optional<std::size_t> per_class, length;
  std::string records_dir, index_file, challenge_dir;
  prepare->add_option("--per-class", per_class, "Synthetic records per class");
  prepare->add_option("--length", length, "Synthetic record length");
  prepare->add_option("--records", records_dir, "Directory of <id>.txt records");
  prepare->add_option("--index", index_file, "CSV index id,label");
  prepare->add_option("--convert-challenge", challenge_dir,
                      "Convert a challenge directory (REFERENCE.csv + .mat) and use it");

  // train
  auto* train = app.add_subcommand("train", "Train one defense");
  std::string defense_name;
  std::optional<std::uint64_t> train_seed;
  std::optional<int> epochs;
  std::string train_data;
  train->add_option("--defense", defense_name, "none, at, dd, adt, init-adt, dist-adt, jr, nsr")->required();
  train->add_option("--seed", train_seed, "Training seed");
  train->add_option("--epochs", epochs, "Epochs for both stages");
  train->add_option("--data", train_data, "Prepared dataset directory (default: build from config)");

  // attack
  auto* attack = app.add_subcommand("attack", "Generate an adversarial set against a model");
  std::string attack_method, model_dir, attack_data;
  std::optional<double> epsilon, alpha;
  std::optional<int> t, t_prime;
  std::optional<std::string> anchor;
  std::size_t budget = 2000;
  std::uint64_t attack_seed = 0;
  attack->add_option("--method", attack_method, "sap, pgd or boundary")
      ->required()
      ->check(CLI::IsMember({"sap", "pgd", "boundary"}));
  attack->add_option("--model", model_dir, "Trained defense directory")->required();
  attack->add_option("--data", attack_data, "Prepared dataset directory (test part is attacked)")->required();
  attack->add_option("--epsilon", epsilon, "Budget in reference units");
  attack->add_option("--alpha", alpha, "Step in reference units");
  attack->add_option("--t", t, "PGD iterations");
  attack->add_option("--t-prime", t_prime, "Smoothing iterations");
  attack->add_option("--anchor", anchor, "previous or original");
  attack->add_option("--budget", budget, "Query budget (boundary)");
  attack->add_option("--seed", attack_seed, "Seed (boundary)");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Score defended models under situation I or II");
  std::string situation_name = "I", source_dir, eval_data, reuse_set;
  std::vector<std::string> model_dirs;
  evaluate->add_option("--situation", situation_name, "I or II")->check(CLI::IsMember({"I", "II"}));
  evaluate->add_option("--models", model_dirs, "Trained defense directories")->required();
  evaluate->add_option("--source", source_dir, "Undefended source model (situation I)");
  evaluate->add_option("--data", eval_data, "Prepared dataset directory")->required();
  evaluate->add_option("--adversarial", reuse_set, "Existing situation I set to reuse (copied)");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Sweep t' or epsilon");
  std::string axis_name = "t_prime", sweep_situation = "I";
  std::vector<double> sweep_values;
  sweep->add_option("--axis", axis_name, "t_prime or epsilon")->check(CLI::IsMember({"t_prime", "epsilon"}));
  sweep->add_option("--values", sweep_values, "Axis values (epsilon in reference units)")->delimiter(',');
  sweep->add_option("--situation", sweep_situation, "I or II")->check(CLI::IsMember({"I", "II"}));
  sweep->add_option("--models", model_dirs, "Trained defense directories")->required();
  sweep->add_option("--source", source_dir, "Undefended source model (situation I)");
  sweep->add_option("--data", eval_data, "Prepared dataset directory")->required();

  // reproduce-desk
  auto* reproduce = app.add_subcommand("reproduce-desk", "Full desk pipeline on synthetic data");
  std::vector<std::uint64_t> seeds;
  bool strict = false;
  reproduce->add_option("--seeds", seeds, "Training seeds")->delimiter(',');
  reproduce->add_flag("--strict", strict, "Exit nonzero when a directional check fails");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g.threads > 0) set_max_threads(g.threads);
    ExperimentConfig config = base_config(g);
    if (g.threads > 0) config.threads = g.threads;

    if (*data && *prepare) {
      const fs::path out = output_dir(g, "data");
      fs::create_directories(out);
      if (!challenge_dir.empty()) {
        const std::size_t n = convert_challenge_directory(challenge_dir, out / "converted");
        progress("converted " + std::to_string(n) + " challenge records");
        config.data.source = "records";
        config.data.records_dir = (out / "converted" / "records").string();
        config.data.index_file = (out / "converted" / "index.csv").string();
      }
      if (per_class) config.data.per_class = *per_class;
      if (length) config.data.length = *length;
      if (!records_dir.empty()) {
        config.data.source = "records";
        config.data.records_dir = records_dir;
        config.data.index_file = index_file;
      }
      config.validate();
      write_config_snapshot(config, out);
      write_command(out, argc, argv);
      const SplitData split = prepare_data(config.data);
      write_dataset(split.train, out / "train");
      write_dataset(split.test, out / "test");
      const auto a = split.train.class_counts();
      const auto b = split.test.class_counts();
      std::cout << "train " << split.train.size() << " [" << a[0] << ' ' << a[1] << ' ' << a[2] << ' '
                << a[3] << "], test " << split.test.size() << " [" << b[0] << ' ' << b[1] << ' '
                << b[2] << ' ' << b[3] << "] -> " << out.string() << '\n';
      return 0;
    }

    if (*train) {
      const DefenseMethod method = defense_method_from_string(defense_name);
      if (epochs) config.plan.e1 = config.plan.e2 = *epochs;
      const std::uint64_t seed = train_seed.value_or(config.seeds.front());
      config.seeds = {seed};
      config.defenses = {defense_name};
      // Training alone needs no attack source.
      config.protocol.situations = {"II"};
      config.protocol.run_sweeps = false;
      config.protocol.run_boundary = false;
      config.validate();
      const fs::path out = output_dir(g, "train");
      write_config_snapshot(config, out);
      write_command(out, argc, argv);
      const Dataset ds = train_data.empty() ? prepare_data(config.data).train : dataset_part(train_data, "train");
      TrainedDefense d = train_defense(method, ds.training_data(), config.effective_plan(seed));
      d.save(out);
      std::cout << to_string(method) << " model " << d.model_id() << " -> " << out.string() << '\n';
      return 0;
    }

    if (*attack) {
      AttackParams p = config.protocol.attack;
      if (epsilon) p.epsilon = *epsilon;
      if (alpha) p.alpha = *alpha;
      if (t) p.t = *t;
      if (t_prime) p.t_prime = *t_prime;
      if (anchor) p.anchor = clip_anchor_from_string(*anchor);
      if (attack_method == "pgd") p.t_prime = 0;
      const AttackParams scaled = config.scaled(p);
      scaled.validate();
      const fs::path out = output_dir(g, "attack");
      write_config_snapshot(config, out);
      write_command(out, argc, argv);
      const TrainedDefense model = TrainedDefense::load(model_dir);
      const TrainingData test = dataset_part(attack_data, "test").training_data();
      AdversarialSet set;
      if (attack_method == "boundary") {
        BoundaryEvalOptions bo;
        bo.budget = budget;
        bo.seed = attack_seed;
        const BoundarySamples b = generate_boundary_samples(model, test, bo);
        set.attack = "boundary";
        set.source_model = model.model_id();
        set.records = b.records;
        set.manifest_id = compute_manifest_id(set);
        progress("boundary attack kept " + std::to_string(b.records.size()) + " of " +
                 std::to_string(b.attempted) + " victims");
      } else {
        std::vector<std::string> ids;
        for (std::size_t i = 0; i < test.size(); ++i) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "t%06zu", i);
          ids.push_back(buf);
        }
        set = generate_adversarial_set(model.deployable(), model.model_id(), test.signals,
                                       test.labels, ids, scaled);
      }
      write_adversarial_set(set, out / "adversarial");
      const auto report = evaluate_model(
          model.deployable(),
          [&] {
            std::vector<Array1D> xs;
            for (const auto& r : set.records) xs.push_back(r.example.adversarial);
            return xs;
          }(),
          [&] {
            std::vector<std::size_t> ls;
            for (const auto& r : set.records) ls.push_back(r.label);
            return ls;
          }());
      std::cout << set.attack << " set " << set.manifest_id << ": " << set.records.size()
                << " samples, model accuracy " << report.accuracy << " -> "
                << (out / "adversarial").string() << '\n';
      return 0;
    }

    if (*evaluate || *sweep) {
      const bool is_sweep = static_cast<bool>(*sweep);
      const fs::path out = output_dir(g, is_sweep ? "sweep" : "evaluate");
      write_config_snapshot(config, out);
      write_command(out, argc, argv);
      const Situation situation = situation_from_string(is_sweep ? sweep_situation : situation_name);
      const auto defended = load_defenses(model_dirs);
      std::optional<TrainedDefense> source;
      if (!source_dir.empty()) source = TrainedDefense::load(source_dir);
      if (situation == Situation::I && !source && reuse_set.empty()) {
        throw std::invalid_argument("situation I needs --source (or --adversarial)");
      }
      const TrainingData test = dataset_part(eval_data, "test").training_data();
      SituationOptions opts;
      opts.persist_dir = out / "adversarial";
      std::vector<ProtocolRun> runs;
      if (is_sweep) {
        const SweepAxis axis = sweep_axis_from_string(axis_name);
        std::vector<double> values = sweep_values;
        if (values.empty()) {
          values = axis == SweepAxis::t_prime ? config.protocol.t_prime_values : config.protocol.epsilon_values;
        }
        AttackParams fixed = axis == SweepAxis::t_prime ? config.protocol.attack
                                                        : config.protocol.epsilon_sweep_attack;
        std::vector<double> actual = values;
        if (axis == SweepAxis::epsilon) {
          for (double& v : actual) v *= config.amplitude_scale;
        }
        runs = parameter_sweep(axis, actual, config.scaled(fixed), situation, defended,
                               source ? &*source : nullptr, test, opts);
        for (std::size_t k = 0; k < runs.size(); ++k) runs[k].axis_value = values[k];
      } else if (!reuse_set.empty()) {
        // Copy so the appended use entries stay inside this run's directory.
        const AdversarialSet set = read_adversarial_set(reuse_set);
        const fs::path copy = out / "adversarial" / set.manifest_id;
        fs::create_directories(copy.parent_path());
        fs::copy(reuse_set, copy, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
        ProtocolRun run;
        run.situation = situation;
        run.source_model_id = set.source_model;
        for (const auto& d : defended) {
          run.reports.push_back(score_on_set(d, set, test, situation));
          record_manifest_use(copy, d.model_id(), "situation " + to_string(situation));
        }
        runs.push_back(std::move(run));
      } else {
        runs.push_back(run_situation(situation, defended, source ? &*source : nullptr,
                                     config.scaled(config.protocol.attack), test, opts));
      }
      write_rows(runs, out);
      for (const auto& run : runs) {
        for (const auto& r : run.reports) {
          std::cout << to_string(run.situation) << ' ' << run.axis << '=' << run.axis_value << ' '
                    << r.method << " clean " << r.clean.accuracy << " adversarial "
                    << r.adversarial.accuracy << " drop " << r.adversarial.drop_percent << "%\n";
        }
      }
      return 0;
    }

    if (*reproduce) {
      if (!seeds.empty()) config.seeds = seeds;
      const fs::path out = output_dir(g, "reproduce-desk");
      const ExperimentResult result = run_experiment(config, out, progress);
      write_command(out, argc, argv);
      const auto verdicts = assess_desk_result(config, result);
      json v = json::array();
      bool all = true;
      for (const auto& c : verdicts) {
        std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        v.push_back({{"check", c.name}, {"pass", c.pass}, {"detail", c.detail}});
        all = all && c.pass;
      }
      std::ofstream f(out / "checks.json");
      f << v.dump(2) << '\n';
      std::cout << "results: " << (out / "results.csv").string() << " (" << result.seconds << " s)\n";
      return strict && !all ? 2 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
