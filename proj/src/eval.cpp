#include "ecgadv/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

#include "ecgadv/parallel.hpp"

namespace ecgadv {

using nlohmann::json;

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::size_t ConfusionMatrix::truth_total(std::size_t g) const {
  const auto& row = counts.at(g);
  return std::accumulate(row.begin(), row.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::predicted_total(std::size_t p) const {
  std::size_t t = 0;
  for (const auto& row : counts) t += row.at(p);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("confusion_matrix: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= kNumClasses || predictions[i] >= kNumClasses) {
      throw std::invalid_argument("confusion_matrix: class index out of range at " + std::to_string(i));
    }
    ++cm.counts[labels[i]][predictions[i]];
  }
  return cm;
}

MetricsReport f1_scores(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.matrix = cm;
  std::size_t diag = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    diag += cm.counts[k][k];
    const std::size_t denom = cm.truth_total(k) + cm.predicted_total(k);
    r.f1[k] = denom == 0 ? 0.0
                         : 2.0 * static_cast<double>(cm.counts[k][k]) / static_cast<double>(denom);
  }
  r.macro_f1 = (r.f1[0] + r.f1[1] + r.f1[2] + r.f1[3]) / 4.0;
  const std::size_t total = cm.total();
  r.accuracy = total == 0 ? 0.0 : static_cast<double>(diag) / static_cast<double>(total);
  return r;
}

double performance_drop(double clean_accuracy, double adversarial_accuracy) {
  if (clean_accuracy <= 0.0) return 0.0;
  return (clean_accuracy - adversarial_accuracy) / clean_accuracy * 100.0;
}

MetricsReport evaluate_model(const ClassifierModel& model, std::span<const Array1D> signals,
                             std::span<const std::size_t> labels, double temperature) {
  const auto preds = predict_batch(model, signals, temperature);
  std::vector<std::size_t> p(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) p[i] = preds[i].label;
  return f1_scores(confusion_matrix(p, labels));
}

std::string to_string(Situation s) {
  switch (s) {
    case Situation::I: return "I";
    case Situation::II: return "II";
    case Situation::boundary: return "boundary";
  }
  return "?";
}

Situation situation_from_string(std::string_view s) {
  if (s == "I" || s == "i" || s == "1") return Situation::I;
  if (s == "II" || s == "ii" || s == "2") return Situation::II;
  if (s == "boundary") return Situation::boundary;
  throw std::invalid_argument("unknown situation '" + std::string(s) + "' (expected I, II, boundary)");
}

namespace {

std::vector<std::string> test_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "t%06zu", i);
    ids[i] = buf;
  }
  return ids;
}

AdversarialSet make_set(const TrainedDefense& attacker, const AttackParams& params,
                        const TrainingData& test, const SituationOptions& options) {
  const auto ids = test_ids(test.size());
  AdversarialSet set = generate_adversarial_set(attacker.deployable(), attacker.model_id(),
                                                test.signals, test.labels, ids, params);
  if (options.persist_dir) {
    const auto dir = *options.persist_dir / set.manifest_id;
    if (!std::filesystem::exists(dir / "manifest.jsonl")) write_adversarial_set(set, dir);
  }
  return set;
}

void note_use(const AdversarialSet& set, const std::string& model_id, Situation s,
              const SituationOptions& options) {
  if (options.persist_dir) {
    record_manifest_use(*options.persist_dir / set.manifest_id, model_id,
                        "situation " + to_string(s));
  }
}

}  // namespace

ModelReport score_on_set(const TrainedDefense& defense, const AdversarialSet& set,
                         const TrainingData& test, Situation situation, double temperature) {
  if (set.records.size() != test.size()) {
    throw std::invalid_argument("adversarial set " + set.manifest_id + " has " +
                                std::to_string(set.records.size()) + " records for a test set of " +
                                std::to_string(test.size()));
  }
  if (situation == Situation::II && set.source_model != defense.model_id()) {
    throw std::invalid_argument("situation II set " + set.manifest_id + " was generated against " +
                                set.source_model + ", not against " + defense.model_id());
  }
  ModelReport r;
  r.method = to_string(defense.method);
  r.model_id = defense.model_id();
  r.manifest_id = set.manifest_id;
  r.manifest_source = set.source_model;
  r.samples = set.records.size();
  r.clean = evaluate_model(defense.deployable(), test.signals, test.labels, temperature);
  std::vector<Array1D> adv(set.records.size());
  std::vector<std::size_t> labels(set.records.size());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (set.records[i].label != test.labels[i]) {
      throw std::invalid_argument("adversarial set " + set.manifest_id + " label mismatch at " +
                                  set.records[i].id);
    }
    adv[i] = set.records[i].example.adversarial;
    labels[i] = set.records[i].label;
  }
  r.adversarial = evaluate_model(defense.deployable(), adv, labels, temperature);
  r.adversarial.drop_percent = performance_drop(r.clean.accuracy, r.adversarial.accuracy);
  return r;
}

ProtocolRun run_situation(Situation situation, std::span<const TrainedDefense> defended,
                          const TrainedDefense* source, const AttackParams& params,
                          const TrainingData& test, const SituationOptions& options) {
  if (defended.empty()) throw std::invalid_argument("run_situation: no defended models");
  if (situation == Situation::boundary) {
    throw std::invalid_argument("run_situation handles situations I and II; use run_boundary_eval");
  }
  test.check();
  params.validate();
  ProtocolRun run;
  run.situation = situation;
  run.seed = options.seed;
  if (situation == Situation::I) {
    if (source == nullptr) throw std::invalid_argument("situation I requires a source model");
    run.source_model_id = source->model_id();
    const AdversarialSet set = make_set(*source, params, test, options);
    for (const auto& d : defended) {
      run.reports.push_back(score_on_set(d, set, test, situation, options.temperature));
      note_use(set, d.model_id(), situation, options);
    }
  } else {
    if (source != nullptr) run.source_model_id = source->model_id();
    for (const auto& d : defended) {
      const AdversarialSet set = make_set(d, params, test, options);
      run.reports.push_back(score_on_set(d, set, test, situation, options.temperature));
      note_use(set, d.model_id(), situation, options);
    }
  }
  return run;
}

BoundarySamples generate_boundary_samples(const TrainedDefense& source, const TrainingData& test,
                                          const BoundaryEvalOptions& options) {
  if (source.method != DefenseMethod::none) {
    throw std::invalid_argument("boundary evaluation needs a source model trained without defense");
  }
  test.check();
  const ClassifierModel& src = source.deployable();
  const auto preds = predict_batch(src, test.signals);

  std::vector<std::size_t> victims;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (preds[i].label == test.labels[i]) victims.push_back(i);
  }
  std::mt19937_64 rng(options.seed);
  std::shuffle(victims.begin(), victims.end(), rng);
  if (options.max_victims > 0 && victims.size() > options.max_victims) {
    victims.resize(options.max_victims);
  }

  std::array<std::vector<std::size_t>, kNumClasses> by_prediction;
  for (std::size_t i = 0; i < test.size(); ++i) by_prediction[preds[i].label].push_back(i);

  struct Outcome {
    bool success = false;
    std::size_t target = 0;
    BoundaryResult result;
  };
  std::vector<Outcome> outcomes(victims.size());
  const ClassOracle query = [&src](std::span<const double> x) { return predict(src, x).label; };
  const std::string source_id = source.model_id();
  parallel_for(victims.size(), [&](std::size_t v) {
    const std::size_t i = victims[v];
    std::mt19937_64 local(options.seed * 0x9E3779B97F4A7C15ULL + i);
    std::vector<std::size_t> targets;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      if (k != test.labels[i] && !by_prediction[k].empty()) targets.push_back(k);
    }
    if (targets.empty()) return;
    const std::size_t target = targets[local() % targets.size()];
    const auto& pool = by_prediction[target];
    const std::size_t seed_index = pool[local() % pool.size()];
    BoundaryParams bp = options.attack;
    bp.target_class = target;
    bp.budget = options.budget;
    bp.seed = local();
    BoundaryResult res = boundary_attack(query, test.signals[i], test.signals[seed_index], bp);
    if (res.improved && res.final_distance <= options.max_distance_ratio * res.initial_distance) {
      res.example.provenance.source_model = source_id;
      outcomes[v] = {true, target, std::move(res)};
    }
  });

  BoundarySamples out;
  out.attempted = victims.size();
  for (std::size_t v = 0; v < victims.size(); ++v) {
    if (!outcomes[v].success) continue;
    char id[32];
    std::snprintf(id, sizeof id, "t%06zu", victims[v]);
    out.records.push_back({id, test.labels[victims[v]], std::move(outcomes[v].result.example)});
    out.targets.push_back(outcomes[v].target);
  }
  return out;
}

ProtocolRun run_boundary_eval(std::span<const TrainedDefense> defended, const TrainedDefense& source,
                              const TrainingData& test, const BoundaryEvalOptions& options) {
  const BoundarySamples generated = generate_boundary_samples(source, test, options);
  std::vector<Array1D> samples;
  std::vector<std::size_t> labels;
  for (const auto& r : generated.records) {
    samples.push_back(r.example.adversarial);
    labels.push_back(r.label);
  }

  ProtocolRun run;
  run.situation = Situation::boundary;
  run.source_model_id = source.model_id();
  run.seed = options.seed;
  run.attempted = generated.attempted;
  run.generated = samples.size();
  const std::string manifest = "boundary:" + source.model_id().substr(0, 16) + ":" +
                               std::to_string(options.seed);
  auto score = [&](const TrainedDefense& d) {
    ModelReport r;
    r.method = to_string(d.method);
    r.model_id = d.model_id();
    r.manifest_id = manifest;
    r.manifest_source = source.model_id();
    r.samples = samples.size();
    r.clean = evaluate_model(d.deployable(), test.signals, test.labels);
    if (!samples.empty()) {
      r.adversarial = evaluate_model(d.deployable(), samples, labels);
      r.adversarial.drop_percent = performance_drop(r.clean.accuracy, r.adversarial.accuracy);
    }
    return r;
  };
  ModelReport self = score(source);
  self.method += "@source";
  run.reports.push_back(std::move(self));
  for (const auto& d : defended) run.reports.push_back(score(d));
  return run;
}

std::string to_string(SweepAxis a) { return a == SweepAxis::t_prime ? "t_prime" : "epsilon"; }

SweepAxis sweep_axis_from_string(std::string_view s) {
  if (s == "t_prime" || s == "t'" || s == "tprime") return SweepAxis::t_prime;
  if (s == "epsilon" || s == "eps") return SweepAxis::epsilon;
  throw std::invalid_argument("unknown sweep axis '" + std::string(s) + "' (expected t_prime, epsilon)");
}

std::vector<ProtocolRun> parameter_sweep(SweepAxis axis, std::span<const double> values,
                                         const AttackParams& fixed, Situation situation,
                                         std::span<const TrainedDefense> defended,
                                         const TrainedDefense* source, const TrainingData& test,
                                         const SituationOptions& options) {
  if (values.empty()) throw std::invalid_argument("parameter_sweep: no values");
  std::vector<ProtocolRun> runs;
  for (double v : values) {
    AttackParams p = fixed;
    if (axis == SweepAxis::t_prime) {
      if (v < 0.0 || v != std::floor(v)) throw std::invalid_argument("t' sweep values must be integers >= 0");
      p.t_prime = static_cast<int>(v);
    } else {
      p.epsilon = v;
    }
    ProtocolRun run = run_situation(situation, defended, source, p, test, options);
    run.axis = to_string(axis);
    run.axis_value = v;
    runs.push_back(std::move(run));
  }
  return runs;
}

std::vector<ResultRow> result_rows(const ProtocolRun& run) {
  std::vector<ResultRow> rows;
  for (const auto& r : run.reports) {
    ResultRow row;
    row.method = r.method;
    row.situation = to_string(run.situation);
    row.axis = run.axis;
    row.axis_value = run.axis_value;
    row.seed = run.seed;
    row.model_id = r.model_id;
    row.manifest_id = r.manifest_id;
    row.samples = r.samples;
    row.clean_accuracy = r.clean.accuracy;
    row.metrics = r.adversarial;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_results_csv(std::span<const ResultRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "method,situation,axis,axis_value,seed,model_id,manifest_id,samples,clean_accuracy,"
         "accuracy,f1_normal,f1_af,f1_other,f1_noise,macro_f1,drop_percent\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.method << ',' << r.situation << ',' << r.axis << ',' << r.axis_value << ',' << r.seed
        << ',' << r.model_id << ',' << r.manifest_id << ',' << r.samples << ','
        << r.clean_accuracy << ',' << r.metrics.accuracy;
    for (double f : r.metrics.f1) out << ',' << f;
    out << ',' << r.metrics.macro_f1 << ',' << r.metrics.drop_percent << '\n';
  }
}

json summarize(std::span<const ResultRow> rows) {
  using Key = std::tuple<std::string, std::string, std::string, double>;
  std::map<Key, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) groups[{r.method, r.situation, r.axis, r.axis_value}].push_back(&r);
  auto stats = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    return json{{"mean", mean}, {"std", sd}};
  };
  json out = json::array();
  for (const auto& [key, members] : groups) {
    std::vector<double> acc, f1, drop, clean;
    for (const auto* r : members) {
      acc.push_back(r->metrics.accuracy);
      f1.push_back(r->metrics.macro_f1);
      drop.push_back(r->metrics.drop_percent);
      clean.push_back(r->clean_accuracy);
    }
    out.push_back({{"method", std::get<0>(key)},
                   {"situation", std::get<1>(key)},
                   {"axis", std::get<2>(key)},
                   {"axis_value", std::get<3>(key)},
                   {"runs", members.size()},
                   {"clean_accuracy", stats(clean)},
                   {"accuracy", stats(acc)},
                   {"macro_f1", stats(f1)},
                   {"drop_percent", stats(drop)}});
  }
  return out;
}

}  // namespace ecgadv
