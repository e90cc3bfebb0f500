// Acceptance runner: one PASS/FAIL line per criterion.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecgadv/attacks.hpp"
#include "ecgadv/dataio.hpp"
#include "ecgadv/defenses.hpp"
#include "ecgadv/eval.hpp"
#include "ecgadv/experiment.hpp"

using namespace ecgadv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& title, double limit_seconds, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = limit_seconds <= 0.0 || secs <= limit_seconds;
  const bool pass = o.pass && in_time;
  if (!pass) ++g_failures;
  std::printf("[%s] %2d %s (%.2fs%s): %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), secs,
              in_time ? "" : ", over time limit", o.detail.c_str());
  std::fflush(stdout);
}

Array1D normal_vector(std::mt19937_64& rng, std::size_t n, double sd) {
  std::normal_distribution<double> d(0.0, sd);
  Array1D v(n);
  for (double& x : v) x = d(rng);
  return v;
}

std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

// Desk attack at reference budget eps = 10, alpha = 1.
AttackParams desk_attack(const ExperimentConfig& c) { return c.scaled(c.protocol.attack); }

Outcome kernels() {
  const AttackParams p;
  const KernelBank bank = KernelBank::from_params(p);
  double worst_sum = 0.0, worst_center = 0.0;
  bool symmetric = true;
  for (std::size_t i = 0; i < p.kernel_sizes.size(); ++i) {
    const Array1D& k = bank.kernels[i];
    const int s = p.kernel_sizes[i];
    const double sigma = p.kernel_stds[i];
    double total = 0.0;
    for (double v : k) total += v;
    worst_sum = std::max(worst_sum, std::abs(total - 1.0));
    for (int m = 0; m < s; ++m) symmetric = symmetric && k[m] == k[s - 1 - m];
    const int half = (s - 1) / 2;
    double z = 0.0;
    for (int d = -half; d <= half; ++d) z += std::exp(-static_cast<double>(d * d) / (2.0 * sigma * sigma));
    worst_center = std::max(worst_center, std::abs(k[half] - 1.0 / z) * z);
  }
  return {worst_sum <= 1e-12 && symmetric && worst_center <= 1e-12 && bank.kernels.size() == 5,
          "max |sum-1| " + fmt(worst_sum) + ", symmetric " + (symmetric ? "yes" : "no") +
              ", max centre rel. error " + fmt(worst_center)};
}

Outcome softmax_temperature() {
  std::mt19937_64 rng(2024);
  double worst_t1 = 0.0, worst_flat = 0.0;
  bool argmax_ok = true;
  for (int i = 0; i < 1000; ++i) {
    const Array1D z = normal_vector(rng, kNumClasses, 4.0);
    const Array1D p = softmax_with_temperature(z, 1.0);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    for (std::size_t k = 0; k < z.size(); ++k) worst_t1 = std::max(worst_t1, std::abs(p[k] - std::exp(z[k]) / denom));
    const Array1D flat = softmax_with_temperature(z, 1e6);
    for (double v : flat) worst_flat = std::max(worst_flat, std::abs(v - 1.0 / kNumClasses));
    const auto am = std::max_element(z.begin(), z.end()) - z.begin();
    for (double t : {0.05, 0.5, 2.0, 20.0, 1000.0}) {
      const Array1D q = softmax_with_temperature(z, t);
      argmax_ok = argmax_ok && std::max_element(q.begin(), q.end()) - q.begin() == am;
    }
  }
  return {worst_t1 < 1e-9 && worst_flat < 1e-3 && argmax_ok,
          "T=1 max error " + fmt(worst_t1) + ", T=1e6 max |p-1/4| " + fmt(worst_flat) +
              ", argmax invariant " + (argmax_ok ? "yes" : "no")};
}

Outcome gradient_fidelity(const Dataset& data) {
  double worst = 0.0;
  std::size_t compared = 0, skipped = 0;
  std::string where;
  std::mt19937_64 rng(77);
  for (int probe = 0; probe < 20; ++probe) {
    const auto model = build_model("desk", data.records[0].samples.size(), kNumClasses, 100 + probe);
    const Record& r = data.records[rng() % data.size()];
    const auto graph = make_loss_graph(model, one_hot(r.label), 1.0);
    ad::FiniteDifferenceOptions opt;
    opt.step = 1e-5;
    opt.max_coordinates = 4;
    opt.seed = rng();
    const auto rep = ad::finite_difference_check(graph, {{"x", r.samples}}, opt);
    compared += rep.compared;
    skipped += rep.skipped_kinks;
    if (rep.max_relative_error > worst) {
      worst = rep.max_relative_error;
      where = rep.worst_coordinate;
    }
  }
  return {worst < 1e-4 && compared >= 20,
          "max rel. error " + fmt(worst) + " at " + where + " over " + std::to_string(compared) +
              " coordinates in 20 probes (" + std::to_string(skipped) + " kink skips)"};
}

Outcome attack_contracts(const ClassifierModel& model, const Dataset& data, const AttackParams& base) {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  bool identical = true, smoothed = true;
  AttackParams p = base;
  p.anchor = ClipAnchor::original;
  const KernelBank bank = KernelBank::from_params(p);
  for (int i = 0; i < 100; ++i) {
    Array1D x = data.records[i % data.size()].samples;
    const Array1D noise = normal_vector(rng, x.size(), 0.05);
    for (std::size_t j = 0; j < x.size(); ++j) x[j] += noise[j];
    const std::size_t label = rng() % kNumClasses;
    const auto pgd = pgd_attack(model, x, label, p);
    for (std::size_t j = 0; j < x.size(); ++j) worst = std::max(worst, std::abs(pgd.adversarial[j] - x[j]));
    if (i < 20) {
      AttackParams z = p;
      z.t_prime = 0;
      const auto sap0 = sap_attack(model, x, label, z);
      identical = identical && sap0.adversarial == pgd.adversarial && sap0.delta == pgd.delta;
      const auto sap = sap_attack(model, x, label, p);
      smoothed = smoothed && sap.applied == smooth_perturbation(sap.delta, bank);
    }
  }
  return {worst <= p.epsilon + 1e-12 && identical && smoothed,
          "max |x_adv-x| " + fmt(worst, 6) + " vs eps " + fmt(p.epsilon, 6) + ", SAP(t'=0)==PGD " +
              (identical ? "yes" : "no") + ", applied==smooth(delta) " + (smoothed ? "yes" : "no")};
}

Outcome smoothness(const ClassifierModel& model, const Dataset& test, const AttackParams& p) {
  const std::size_t n = std::min<std::size_t>(64, test.size());
  std::vector<double> pgd_tv(n), sap_tv(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = test.records[i];
    pgd_tv[i] = total_variation(pgd_attack(model, r.samples, r.label, p).applied);
    sap_tv[i] = total_variation(sap_attack(model, r.samples, r.label, p).applied);
  }
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a += sap_tv[i] / n;
    b += pgd_tv[i] / n;
  }
  return {n == 64 && a < b, "mean TV over " + std::to_string(n) + " samples: SAP " + fmt(a) + " < PGD " + fmt(b)};
}

bool same_trace(const TrainedDefense& a, const TrainedDefense& b) {
  if (a.models.size() != b.models.size() || a.log.epochs.size() != b.log.epochs.size()) return false;
  for (std::size_t i = 0; i < a.models.size(); ++i)
    if (!(a.models[i] == b.models[i])) return false;
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i)
    if (a.log.epochs[i].digest != b.log.epochs[i].digest) return false;
  return a.soft_labels == b.soft_labels;
}

Outcome lattice(const ExperimentConfig& desk) {
  const TrainingData data = synthesize_ecg(50, desk.data.length, 11).training_data();
  TrainPlan p = desk.effective_plan(5);
  p.e1 = p.e2 = 5;
  p.c_stage1 = p.c_stage2 = 0.0;
  const bool at_std = same_trace(train_adversarial(data, p), train_standard(data, p));
  p.temperature_stage1 = p.temperature_stage2 = 20.0;
  const bool adt_dd = same_trace(train_adt(data, p, AdtVariant::full), train_distilled(data, p));
  return {at_std && adt_dd, std::string("AT(c=0)==standard ") + (at_std ? "yes" : "no") +
                                ", ADT(c=0,c=0)==DD " + (adt_dd ? "yes" : "no") +
                                " (200 samples, 5 epochs per stage, every epoch digest compared)"};
}

Outcome metric_oracle() {
  struct Case {
    std::array<std::array<std::size_t, 4>, 4> m;
    std::array<double, 4> f1;
  };
  // F1 of class k = 2 kk / (row sum + column sum), tallied by hand.
  const std::vector<Case> cases{
      {{{{2, 1, 0, 0}, {0, 1, 1, 0}, {0, 0, 1, 0}, {1, 0, 0, 1}}}, {4.0 / 6.0, 2.0 / 4.0, 2.0 / 3.0, 2.0 / 3.0}},
      {{{{5, 0, 0, 0}, {0, 3, 0, 0}, {0, 0, 7, 0}, {0, 0, 0, 1}}}, {1.0, 1.0, 1.0, 1.0}},
      {{{{0, 4, 0, 0}, {3, 0, 0, 0}, {0, 0, 0, 2}, {0, 0, 1, 0}}}, {0.0, 0.0, 0.0, 0.0}},
      {{{{10, 2, 3, 1}, {1, 4, 0, 0}, {2, 1, 6, 1}, {0, 0, 1, 2}}},
       {20.0 / 29.0, 8.0 / 12.0, 12.0 / 20.0, 4.0 / 7.0}},
      {{{{3, 0, 1, 0}, {0, 0, 0, 0}, {1, 0, 2, 0}, {0, 0, 0, 0}}}, {6.0 / 8.0, 0.0, 4.0 / 6.0, 0.0}},
  };
  bool exact = true, macro = true;
  for (const auto& c : cases) {
    ConfusionMatrix cm;
    cm.counts = c.m;
    const MetricsReport r = f1_scores(cm);
    for (std::size_t k = 0; k < 4; ++k) exact = exact && r.f1[k] == c.f1[k];
    const double expect = (c.f1[0] + c.f1[1] + c.f1[2] + c.f1[3]) / 4.0;
    macro = macro && std::abs(r.macro_f1 - expect) <= 1e-15;
  }
  return {exact && macro, "5 matrices: per-class F1 exact " + std::string(exact ? "yes" : "no") +
                              ", macro = mean of four " + (macro ? "yes" : "no")};
}

Outcome pipeline_counts(const std::string& real_index) {
  bool lengths = true, symmetric = true;
  for (std::size_t n : {1u, 100u, 8997u, 8998u, 8999u, 9000u, 9001u, 12000u, 18000u}) {
    Record r{"v", Array1D(n, 1.0), 0};
    const Record out = preprocess_record(r);
    lengths = lengths && out.samples.size() == kCanonicalLength;
    if (n < kCanonicalLength) {
      const std::size_t left = (kCanonicalLength - n) / 2;
      const std::size_t right = kCanonicalLength - n - left;
      for (std::size_t i = 0; i < left; ++i) symmetric = symmetric && out.samples[i] == 0.0;
      for (std::size_t i = 0; i < right; ++i) symmetric = symmetric && out.samples[kCanonicalLength - 1 - i] == 0.0;
      symmetric = symmetric && out.samples[left] == 1.0 && out.samples[left + n - 1] == 1.0;
      symmetric = symmetric && right - left <= 1;
    }
  }
  Dataset idx;
  for (std::size_t i = 0; i < 279; ++i) idx.records.push_back({"p" + std::to_string(i), {0.0}, 3});
  for (std::size_t i = 0; i < 758; ++i) idx.records.push_back({"a" + std::to_string(i), {0.0}, 1});
  for (std::size_t i = 0; i < 5050; ++i) idx.records.push_back({"n" + std::to_string(i), {0.0}, 0});
  const auto counts = rebalance(idx).class_counts();
  const bool arithmetic = counts[3] == 1674 && counts[1] == 1516 && counts[0] == 5050;
  std::string detail = "length 9000 for 9 variants " + std::string(lengths ? "yes" : "no") +
                       ", symmetric zero padding " + (symmetric ? "yes" : "no") + ", Noise 279->" +
                       std::to_string(counts[3]) + ", AF 758->" + std::to_string(counts[1]);
  bool real_ok = true;
  if (!real_index.empty() && fs::exists(real_index)) {
    Dataset real;
    std::ifstream in(real_index);
    std::string line;
    while (std::getline(in, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      real.records.push_back({line.substr(0, comma), {0.0}, class_from_token(line.substr(comma + 1))});
    }
    const auto before = real.class_counts();
    const auto after = rebalance(real).class_counts();
    real_ok = after[3] == 6 * before[3] && after[1] == 2 * before[1];
    detail += "; real index Noise " + std::to_string(before[3]) + "->" + std::to_string(after[3]) + ", AF " +
              std::to_string(before[1]) + "->" + std::to_string(after[1]);
  } else {
    detail += "; real index not provided";
  }
  return {lengths && symmetric && arithmetic && real_ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::string out_dir;
  std::string real_index;
  bool quick = false;
  app.add_option("--out", out_dir, "Keep the desk run artifacts in this directory");
  app.add_option("--real-index", real_index, "Challenge REFERENCE.csv for the real rebalancing count");
  app.add_flag("--quick", quick, "Skip the desk pipeline (criteria 9-11)");
  CLI11_PARSE(app, argc, argv);

  const ExperimentConfig desk = ExperimentConfig::desk();
  const AttackParams attack = desk_attack(desk);
  const SplitData split = prepare_data(desk.data);

  // Briefly trained desk model shared by criteria 4 and 5.
  TrainPlan plan = desk.effective_plan(1);
  plan.e1 = 10;
  const TrainedDefense standard = train_standard(split.train.training_data(), plan);

  report(1, "kernel correctness", 1.0, kernels);
  report(2, "softmax temperature", 1.0, softmax_temperature);
  report(3, "gradient fidelity", 60.0, [&] { return gradient_fidelity(split.test); });
  report(4, "attack contracts", 60.0, [&] { return attack_contracts(standard.deployable(), split.test, attack); });
  report(5, "smoothness", 120.0, [&] { return smoothness(standard.deployable(), split.test, attack); });
  report(6, "degenerate-equivalence lattice", 300.0, [&] { return lattice(desk); });
  report(7, "metric oracle", 1.0, metric_oracle);
  report(8, "pipeline counts", 60.0, [&] { return pipeline_counts(real_index); });

  if (quick) {
    std::printf("criteria 9-11 skipped (--quick)\n");
    return g_failures == 0 ? 0 : 1;
  }

  std::unique_ptr<fs::path> temp;
  fs::path run_dir = out_dir;
  if (run_dir.empty()) {
    std::random_device rd;
    run_dir = fs::temp_directory_path() / ("ecgadv_acceptance_" + std::to_string(rd()));
    temp = std::make_unique<fs::path>(run_dir);
  }
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentResult result;
  std::string run_error;
  try {
    result = run_experiment(desk, run_dir, [](const std::string& m) {
      std::fprintf(stderr, "  %s\n", m.c_str());
    });
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  const double pipeline_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::vector<CriterionVerdict> v;
  if (run_error.empty()) v = assess_desk_result(desk, result);
  auto join = [&](std::initializer_list<std::size_t> idx) {
    Outcome o{run_error.empty(), run_error.empty() ? "" : "pipeline failed: " + run_error};
    if (!run_error.empty()) return o;
    for (std::size_t i : idx) {
      o.pass = o.pass && v[i].pass;
      o.detail += (o.detail.empty() ? "" : " | ") + std::string(v[i].pass ? "ok " : "FAILED ") + v[i].name +
                  ": " + v[i].detail;
    }
    return o;
  };
  report(9, "directional robustness", 0.0, [&] {
    Outcome o = join({0, 1, 2});
    o.pass = o.pass && pipeline_secs <= 1800.0;
    o.detail += " | pipeline " + fmt(pipeline_secs, 4) + "s of 1800s";
    return o;
  });
  report(10, "sweep shape", 0.0, [&] { return join({3, 4}); });
  report(11, "boundary protocol", 600.0, [&] {
    Outcome o = join({5});
    if (!run_error.empty()) return o;
    // Regenerate the boundary samples of every seed and check their targets.
    const TrainingData test = split.test.training_data();
    std::size_t checked = 0;
    bool on_target = true;
    for (const auto& s : result.seeds) {
      const TrainedDefense* source = nullptr;
      for (const auto& d : s.defenses)
        if (d.method == DefenseMethod::none) source = &d;
      BoundaryEvalOptions bo;
      bo.budget = desk.protocol.boundary_budget;
      bo.max_victims = desk.protocol.boundary_victims;
      bo.seed = s.seed;
      bo.attack.hanning_window = desk.protocol.boundary_hanning_window;
      const auto samples = generate_boundary_samples(*source, test, bo);
      for (std::size_t i = 0; i < samples.records.size(); ++i, ++checked) {
        on_target = on_target &&
                    predict(source->deployable(), samples.records[i].example.adversarial).label == samples.targets[i];
      }
    }
    o.pass = o.pass && on_target && checked > 0;
    o.detail += " | " + std::to_string(checked) + " samples classified as their target: " + (on_target ? "yes" : "no");
    return o;
  });

  if (temp) {
    std::error_code ec;
    fs::remove_all(*temp, ec);
  }
  return g_failures == 0 ? 0 : 1;
}
