// Acceptance checks: one PASS/FAIL line per criterion. Run with a criterion name, or without
// arguments to run all of them.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cfaudit/ace.hpp"
#include "cfaudit/classifier.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/experiment.hpp"
#include "cfaudit/mediation.hpp"
#include "cfaudit/metrics.hpp"
#include "cfaudit/pce.hpp"
#include "cfaudit/setrep.hpp"
#include "support.hpp"

namespace {

using namespace cfaudit;
namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------- tolerances

constexpr double kMoonsBaselineAccuracy = 0.95;
constexpr double kMoonsAucGain = 0.05;
constexpr double kMoonsFarAbstain = 0.95;
constexpr double kMoonsIdAbstain = 0.10;
constexpr double kMoonsSeconds = 600.0;

constexpr double kConsistencySpearman = 0.9;
constexpr double kConsistencyCv = 0.8;

constexpr double kIdentityTolerance = 1e-6;

constexpr double kProbeSpuriousShare = 0.10;
constexpr double kProbeAuc = 0.95;

constexpr double kFidTolerance = 1e-9;
constexpr double kAucTolerance = 1e-12;
constexpr double kTnrTarget = 0.05;
constexpr double kTnrTolerance = 0.01;
constexpr double kDeletionConstant = 1.0;
constexpr double kDeletionConstantTolerance = 1e-6;
constexpr double kDeletionStepMax = 0.01;

constexpr double kAttentionSumTolerance = 1e-6;
constexpr double kBagAuc = 0.9;
constexpr double kLogSumEven = -1.386294;
constexpr double kLogSumSparse = -2.407946;
constexpr double kLogSumTolerance = 1e-5;

constexpr double kGradientRelError = 1e-4;

constexpr int kBiasSeeds = 10;
constexpr int kBiasRequired = 9;

// ---------------------------------------------------------------- reporting

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    details.push_back(what + (ok ? "" : " [failed]"));
  }
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

fs::path source_dir() { return CFAUDIT_SOURCE_DIR; }

fs::path fresh_output(const std::string& name) {
  return test_support::scratch_dir("acceptance_" + name);
}

experiment::Config load_config(const std::string& file, const fs::path& output) {
  auto config = experiment::Config::load(source_dir() / "configs" / file);
  config.set("output=" + json(output.string()).dump());
  return config;
}

// ---------------------------------------------------------------- two moons

Outcome two_moons() {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  const auto root = fresh_output("two_moons");

  auto config = load_config("two_moons.json", root);
  const auto bundle_dir = experiment::create_run_dir(config, "train-pce");
  const auto pce_report = experiment::run_train_pce(config, bundle_dir);

  config.set("bundle=" + json(bundle_dir.string()).dump());
  const auto ace_dir = experiment::create_run_dir(config, "ace-finetune");
  experiment::run_ace_finetune(config, ace_dir);

  config.set("bundle=" + json((ace_dir / "bundle").string()).dump());
  const auto eval_dir = experiment::create_run_dir(config, "evaluate-uncertainty");
  const auto eval = experiment::run_evaluate_uncertainty(config, eval_dir);

  const double accuracy = pce_report.at("classifier_test_accuracy").get<double>();
  out.check(accuracy >= kMoonsBaselineAccuracy, "baseline accuracy " + fmt(accuracy) + " >= " + fmt(kMoonsBaselineAccuracy));

  const auto& aid = eval.at("comparison").at("aid");
  const double pe_before = aid.at("mean_pe_before").get<double>(), pe_after = aid.at("mean_pe_after").get<double>();
  out.check(pe_after > pe_before, "band mean PE " + fmt(pe_before) + " -> " + fmt(pe_after) + " increases");
  const double auc_before = aid.at("auc_before").get<double>(), auc_after = aid.at("auc_after").get<double>();
  out.check(auc_after - auc_before >= kMoonsAucGain,
            "core-vs-band PE AUC " + fmt(auc_before) + " -> " + fmt(auc_after) + " gain >= " + fmt(kMoonsAucGain));

  const double far = eval.at("report").at("far_ood_abstain_rate").get<double>();
  out.check(far >= kMoonsFarAbstain, "far-grid rejection " + fmt(far) + " >= " + fmt(kMoonsFarAbstain));

  // every test point counts as id here, band points included
  const auto bundle = experiment::Bundle::load(ace_dir / "bundle");
  const auto abstains = bundle.guard().abstains(bundle.samples.images());
  const double id_rate = static_cast<double>(std::count(abstains.begin(), abstains.end(), true)) /
                         static_cast<double>(abstains.size());
  out.check(id_rate <= kMoonsIdAbstain, "id test rejection " + fmt(id_rate) + " <= " + fmt(kMoonsIdAbstain));

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.check(seconds <= kMoonsSeconds, "runtime " + fmt(seconds, 3) + " s <= " + fmt(kMoonsSeconds, 3) + " s");
  return out;
}

// ---------------------------------------------------------------- PCE consistency

Outcome pce_consistency() {
  Outcome out;
  const auto root = fresh_output("pce_consistency");
  auto config = load_config("loop_morphs.json", root);
  const auto bundle_dir = experiment::create_run_dir(config, "train-pce");
  experiment::run_train_pce(config, bundle_dir);
  config.set("bundle=" + json(bundle_dir.string()).dump());
  const auto metrics_dir = experiment::create_run_dir(config, "evaluate-metrics");
  const auto report = experiment::run_evaluate_metrics(config, metrics_dir);

  for (const auto& band : report.at("consistency")) {
    const auto range = band.at("band");
    const double rho = band.at("spearman").get<double>();
    out.check(band.at("spearman_defined").get<bool>() && rho >= kConsistencySpearman,
              "band [" + fmt(range[0].get<double>(), 2) + ", " + fmt(range[1].get<double>(), 2) + ") n=" +
                  std::to_string(band.at("count").get<int>()) + " spearman " + fmt(rho) + " >= " +
                  fmt(kConsistencySpearman));
  }
  const double cv = report.at("cv_score").get<double>();
  out.check(cv >= kConsistencyCv, "CV " + fmt(cv) + " >= " + fmt(kConsistencyCv) + " at thresholds (0.2, 0.8)");
  return out;
}

// ---------------------------------------------------------------- mediation identities

Outcome mediation_identities() {
  Outcome out;
  double worst = 0.0;
  const auto track = [&](double v) { worst = std::max(worst, std::abs(v)); };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    classifier::ArchitectureDescriptor d;
    if (seed % 2 == 0) {
      d.input_shape = {4};
      d.hidden = {8, 6};
    } else {
      d.kind = classifier::Architecture::cnn;
      d.input_shape = {1, 8, 8};
      d.hidden = {3, 4};
      d.dense_width = 8;
    }
    classifier::Classifier model(d, seed);
    model.to(torch::kFloat64);
    torch::manual_seed(seed);
    std::vector<std::int64_t> shape = {12};
    shape.insert(shape.end(), d.input_shape.begin(), d.input_shape.end());
    const auto x = torch::randn(shape, torch::kFloat64), xp = torch::randn(shape, torch::kFloat64);

    std::vector<std::int64_t> all(static_cast<std::size_t>(model.unit_count()));
    std::iota(all.begin(), all.end(), 0);
    const std::vector<std::int64_t> some = {0, 2};
    const double ate = mediation::ate(model, x, xp, 1);

    track(mediation::indirect_effect(model, some, x, x, 1));
    track(mediation::indirect_effect(model, {}, x, xp, 1));
    track(mediation::direct_effect(model, {}, x, xp, 1) - ate);
    track(mediation::indirect_effect(model, all, x, xp, 1) - ate);
    track(mediation::direct_effect(model, all, x, xp, 1));
    // identity explainer: x_c = x
    track(mediation::ate(model, x, x.clone(), 1));
  }
  out.check(worst <= kIdentityTolerance, "max identity residual " + fmt(worst, 3) + " <= " + fmt(kIdentityTolerance) +
                                             " over 10 random networks (MLP and CNN)");
  return out;
}

// ---------------------------------------------------------------- planted concept

// Units u = relu(x + 10), i.e. identity on the sampled range; class-1 logit = a . u.
classifier::Classifier identity_unit_model(std::int64_t units, std::int64_t informative, double weight) {
  classifier::ArchitectureDescriptor desc;
  desc.input_shape = {units};
  desc.hidden = {units};
  desc.class_count = 2;
  classifier::Classifier model(desc, 0);
  model.to(torch::kFloat64);
  torch::NoGradGuard no_grad;
  auto params = model.net()->parameters();
  params[0].copy_(torch::eye(units, torch::kFloat64));
  params[1].fill_(10.0);
  auto head = torch::zeros({2, units}, torch::kFloat64);
  head[1][informative] = weight;
  params[2].copy_(head);
  params[3].copy_(torch::tensor({0.0, -10.0 * weight}, torch::kFloat64));
  return model;
}

Outcome planted_concept() {
  Outcome out;
  constexpr std::int64_t units = 20, informative = 7, n = 400;
  const auto model = identity_unit_model(units, informative, 3.0);

  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  auto x = torch::empty({n, units}, torch::kFloat64);
  std::vector<data::LabeledSample> samples;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < units; ++j) x[i][j] = g(rng);
    const double v = x[i][informative].item<double>();
    x[i][informative] = (v >= 0 ? 1.0 : -1.0) * (0.25 + std::abs(v));
    data::LabeledSample s;
    s.image = x[i].clone();
    s.label = v >= 0 ? 1 : 0;
    s.concepts = std::vector<std::int8_t>{static_cast<std::int8_t>(v >= 0 ? 1 : 0)};
    s.id = "p" + std::to_string(i);
    samples.push_back(std::move(s));
  }
  const data::Dataset ds(std::move(samples), 2, data::Modality::vector, {"planted"});
  const auto probe = mediation::fit_concept_probe(model, ds, 0);

  const bool contains = std::find(probe.support.begin(), probe.support.end(), informative) != probe.support.end();
  const auto spurious = static_cast<double>(probe.support.size() - (contains ? 1 : 0)) / static_cast<double>(units);
  out.check(contains, "support contains unit " + std::to_string(informative) + " (support size " +
                          std::to_string(probe.support.size()) + ")");
  out.check(spurious <= kProbeSpuriousShare, "spurious support share " + fmt(spurious) + " <= " + fmt(kProbeSpuriousShare));
  out.check(probe.auc >= kProbeAuc, "probe AUC " + fmt(probe.auc) + " >= " + fmt(kProbeAuc));

  // counterfactual: the informative coordinate crosses over, the rest jitters
  auto xp = x + 0.3 * torch::randn({n, units}, torch::TensorOptions().dtype(torch::kFloat64));
  xp.select(1, informative).copy_(-x.select(1, informative));
  mediation::RankOptions options;
  options.seed = 3;
  const auto report = mediation::rank_concepts(model, {probe}, x, xp, options);
  double planted_ie = 0.0, control_ie = 0.0;
  for (const auto& c : report.concepts) (c.control ? control_ie : planted_ie) = std::abs(c.pooled.ie.mean);
  out.check(planted_ie > control_ie, "|IE| planted " + fmt(planted_ie) + " > random control " + fmt(control_ie));
  return out;
}

// ---------------------------------------------------------------- metric oracles

metrics::ActivationStats stats1(double mean, double variance) {
  metrics::ActivationStats s;
  s.mean = Eigen::VectorXd::Constant(1, mean);
  s.covariance = Eigen::MatrixXd::Constant(1, 1, variance);
  s.count = 2;
  return s;
}

double brute_force_auc(const std::vector<double>& neg, const std::vector<double>& pos) {
  double wins = 0.0;
  for (double p : pos)
    for (double q : neg) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  return wins / static_cast<double>(pos.size() * neg.size());
}

Outcome metric_oracles() {
  Outcome out;
  std::mt19937_64 rng(29);

  double fid_err = 0.0;
  std::uniform_real_distribution<double> u(0.05, 6.0);
  for (int i = 0; i < 200; ++i) {
    const double m1 = u(rng) - 3, v1 = u(rng), m2 = u(rng) - 3, v2 = u(rng);
    const double closed = (m1 - m2) * (m1 - m2) + v1 + v2 - 2.0 * std::sqrt(v1 * v2);
    fid_err = std::max(fid_err, std::abs(metrics::fid(stats1(m1, v1), stats1(m2, v2)) - closed));
  }
  out.check(fid_err <= kFidTolerance, "1-D FID max error " + fmt(fid_err, 3) + " <= " + fmt(kFidTolerance));

  double auc_err = 0.0;
  std::uniform_int_distribution<int> coarse(0, 15);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> neg(1 + rng() % 200), pos(1 + rng() % 200);
    for (auto& v : neg) v = coarse(rng);
    for (auto& v : pos) v = coarse(rng) + trial % 4;
    auc_err = std::max(auc_err, std::abs(metrics::separation_report(neg, pos).auc_roc - brute_force_auc(neg, pos)));
  }
  out.check(auc_err <= kAucTolerance, "AUC vs brute force max error " + fmt(auc_err, 3) + " (ties included)");

  std::normal_distribution<double> g;
  std::vector<double> a(10000), b(10000);
  for (auto& v : a) v = g(rng);
  for (auto& v : b) v = g(rng);
  const double tnr = metrics::separation_report(a, b).tnr_at_tpr95;
  out.check(std::abs(tnr - kTnrTarget) <= kTnrTolerance,
            "TNR@TPR95 on identical 10k normals " + fmt(tnr) + " within " + fmt(kTnrTarget) + " +/- " + fmt(kTnrTolerance));

  std::vector<double> grid;
  for (int i = 0; i <= 100; ++i) grid.push_back(i / 100.0);
  torch::manual_seed(29);
  const auto image = torch::rand({1, 12, 12});
  const auto importance = torch::rand({12, 12});
  const metrics::ProbFn constant = [](const torch::Tensor& x) {
    return torch::stack({torch::zeros({x.size(0)}), torch::ones({x.size(0)})}, 1);
  };
  const metrics::ProbFn step = [&](const torch::Tensor& x) {
    const auto same = (x - image).abs().flatten(1).amax(1).eq(0).to(torch::kFloat32);
    return torch::stack({1 - same, same}, 1);
  };
  const double constant_auc = metrics::deletion_auc(constant, image, importance, 1, grid).auc;
  const double step_auc = metrics::deletion_auc(step, image, importance, 1, grid).auc;
  out.check(std::abs(constant_auc - kDeletionConstant) <= kDeletionConstantTolerance,
            "deletion AUC constant curve " + fmt(constant_auc));
  out.check(step_auc <= kDeletionStepMax, "deletion AUC step curve " + fmt(step_auc) + " <= " + fmt(kDeletionStepMax));
  return out;
}

// ---------------------------------------------------------------- setrep

Outcome setrep_properties() {
  Outcome out;
  torch::manual_seed(31);
  setrep::SetModelConfig c;
  c.patch_shape = {4, 4};
  c.feature_dim = 8;
  c.encoder_hidden = {16};
  c.attention_hidden = 6;
  setrep::SetModel model(c);
  model->eval();

  bool invariant = true;
  double sum_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    data::PatchBag bag;
    bag.patches = torch::rand({1 + trial % 12, 4, 4});
    bag.outcome = {1.0};
    const auto alpha = model->attention_weights(bag);
    sum_err = std::max(sum_err, std::abs(alpha.sum().item<double>() - 1.0));
    auto permuted = bag;
    permuted.patches = bag.patches.index_select(0, torch::randperm(bag.patches.size(0), torch::kInt64));
    invariant = invariant && torch::equal(model->predict_outcome(permuted), model->predict_outcome(bag));
  }
  out.check(invariant, "bag predictions identical under 50 random permutations");
  out.check(sum_err <= kAttentionSumTolerance, "max |sum(alpha) - 1| " + fmt(sum_err, 3));

  const auto root = fresh_output("setrep");
  auto config = load_config("mnist_bags.json", root);
  const auto dir = experiment::create_run_dir(config, "train-setrep");
  const auto report = experiment::run_train_setrep(config, dir);
  const double auc = report.at("test_auc").get<double>();
  out.check(auc >= kBagAuc, "\"contains a 3\" test AUC " + fmt(auc) + " >= " + fmt(kBagAuc));

  const double even = setrep::log_sum_regularizer(torch::tensor({0.5, 0.5}, torch::kFloat64), 0.0).item<double>();
  const double sparse = setrep::log_sum_regularizer(torch::tensor({0.9, 0.1}, torch::kFloat64), 0.0).item<double>();
  out.check(std::abs(even - kLogSumEven) <= kLogSumTolerance && std::abs(sparse - kLogSumSparse) <= kLogSumTolerance &&
                sparse < even,
            "log-sum (0.9, 0.1) " + fmt(sparse) + " < (0.5, 0.5) " + fmt(even));
  return out;
}

// ---------------------------------------------------------------- gradient checks

Outcome gradient_checks() {
  Outcome out;
  torch::manual_seed(37);
  const auto report = [&](const std::string& name, double err) {
    out.check(err <= kGradientRelError, name + " rel err " + fmt(err, 3));
  };

  for (auto kind : {setrep::OutcomeKind::binary, setrep::OutcomeKind::continuous}) {
    setrep::SetModelConfig c;
    c.patch_shape = {2, 2};
    c.feature_dim = 4;
    c.encoder_hidden = {6};
    c.attention_hidden = 3;
    c.outcome_kind = kind;
    setrep::SetModel model(c);
    model->to(torch::kFloat64);
    data::PatchBag bag;
    bag.patches = torch::rand({4, 2, 2}, torch::kFloat64);
    bag.outcome = {1.0};
    const double target = kind == setrep::OutcomeKind::binary ? 1.0 : 0.7;
    report(std::string("subject2vec_loss (") + (kind == setrep::OutcomeKind::binary ? "binary" : "continuous") + ")",
           test_support::gradient_check([&] { return setrep::subject2vec_loss(model, bag, {target}, {}).total; },
                                        model->parameters()));
  }

  auto logits = torch::randn({3, 4}, torch::kFloat64).requires_grad_(true);
  const auto target = torch::softmax(torch::randn({3, 4}, torch::kFloat64), 1);
  report("KL consistency",
         test_support::gradient_check([&] { return pce::kl_consistency(torch::softmax(logits, 1), target); }, {logits}));

  const auto x = torch::rand({2, 1, 3, 3}, torch::kFloat64);
  auto xp = (x + torch::rand({2, 1, 3, 3}, torch::kFloat64) * 0.5 + 0.05).requires_grad_(true);
  pce::CarlContext ctx;
  ctx.segmentation = torch::tensor({{0, 0, 1}, {0, 1, 1}, {2, 2, 2}}, torch::kLong);
  ctx.object_probe = [](const torch::Tensor& t) { return torch::softmax(t.flatten(1).slice(1, 0, 3) * 2, 1); };
  report("CARL", test_support::gradient_check([&] { return pce::carl(x, xp, ctx); }, {xp}));

  auto M = torch::randn({2, 2}, torch::kFloat64).requires_grad_(true);
  const auto w = torch::randn({4, 2}, torch::kFloat64);
  const auto dirs = torch::randn({4, 2}, torch::kFloat64);
  report("path_length_penalty (linear toy)", test_support::gradient_check([&] {
           return pce::path_length_penalty([&](const torch::Tensor& v) { return v.matmul(M.t()); }, w, 0.3, dirs).penalty;
         }, {M}));

  auto real = torch::tensor({0.3, -0.2, 1.7, 0.95}, torch::kFloat64).requires_grad_(true);
  auto fake = torch::tensor({-0.4, 0.1, -1.8, 0.6}, torch::kFloat64).requires_grad_(true);
  report("hinge D loss", test_support::gradient_check([&] { return pce::hinge_discriminator_loss(real, fake); }, {real, fake}));
  report("hinge G loss", test_support::gradient_check([&] { return pce::hinge_generator_loss(fake); }, {fake}));
  return out;
}

// ---------------------------------------------------------------- bias detection

// Noisy two moons plus a nuisance coordinate carrying attribute a. In the biased set a agrees with
// the label for `agreement` of the samples; 0.5 makes it independent.
data::Dataset confounded_moons(std::size_t n, double agreement, std::uint64_t seed) {
  const auto moons = data::make_two_moons(n, 0.35, seed);
  std::mt19937_64 rng(seed * 7919 + 1);
  std::uniform_real_distribution<double> u;
  std::normal_distribution<double> g(0.0, 0.25);
  std::vector<data::LabeledSample> samples;
  for (std::size_t i = 0; i < moons.size(); ++i) {
    const auto& m = moons[i];
    const int a = u(rng) < agreement ? static_cast<int>(m.label) : 1 - static_cast<int>(m.label);
    data::LabeledSample s;
    s.image = torch::cat({m.image, torch::tensor({static_cast<float>(2 * a - 1 + g(rng))})});
    s.label = m.label;
    s.concepts = std::vector<std::int8_t>{static_cast<std::int8_t>(a)};
    s.id = m.id;
    samples.push_back(std::move(s));
  }
  return data::Dataset(std::move(samples), 2, data::Modality::vector, {"a"});
}

data::Dataset relabel_by_attribute(const data::Dataset& ds) {
  std::vector<data::LabeledSample> samples(ds.samples().begin(), ds.samples().end());
  for (auto& s : samples) s.label = s.concepts->at(0);
  return data::Dataset(std::move(samples), 2, data::Modality::vector, {"a"});
}

json bias_config(std::uint64_t seed) {
  return {{"schema_version", experiment::kSchemaVersion},
          {"classifier",
           {{"architecture", {{"kind", "mlp"}, {"hidden", {32, 32}}}},
            {"epochs", 30},
            {"batch_size", 64},
            {"learning_rate", 0.01},
            {"seed", seed}}},
          {"explainer",
           {{"model", {{"variant", "v1-ordinal"}, {"target_class", 1}, {"bins", 10}}},
            {"lambda_rec", 1.0},
            {"epochs", 20},
            {"seed", seed + 100}}}};
}

double confounding_for(const data::Dataset& train, const data::Dataset& probe, const metrics::ProbFn& oracle,
                       std::uint64_t seed) {
  const experiment::Config config(bias_config(seed));
  const auto model = classifier::train_classifier(train, experiment::classifier_config(config, train));
  const auto explainer = pce::train_pce(model, train, experiment::explainer_config(config, train));
  const metrics::ExplainFn explain = [&](const torch::Tensor& x, double c) { return explainer.explain(x, c); };
  const auto x = probe.images();
  const auto x_c = mediation::flipping_counterfactuals(model, explain, x, 1);
  return metrics::confounding_metric(oracle, x, x_c);
}

Outcome bias_detection() {
  Outcome out;
  int wins = 0;
  for (int run = 0; run < kBiasSeeds; ++run) {
    const auto seed = static_cast<std::uint64_t>(run + 1);
    const auto biased = confounded_moons(800, 0.95, seed);
    const auto unbiased = confounded_moons(800, 0.5, seed + 1000);
    const auto probe = confounded_moons(200, 0.5, seed + 2000);

    classifier::TrainingConfig oc;
    oc.architecture.input_shape = {3};
    oc.architecture.hidden = {16};
    oc.epochs = 20;
    oc.learning_rate = 0.01;
    oc.seed = seed;
    const auto oracle_model = classifier::train_classifier(relabel_by_attribute(confounded_moons(800, 0.5, seed + 3000)), oc);
    const metrics::ProbFn oracle = [&](const torch::Tensor& x) {
      torch::NoGradGuard no_grad;
      return oracle_model.predict(x);
    };

    const double b = confounding_for(biased, probe, oracle, seed);
    const double n = confounding_for(unbiased, probe, oracle, seed);
    wins += b > n ? 1 : 0;
    out.details.push_back("seed " + std::to_string(seed) + ": biased " + fmt(b, 3) + " vs unbiased " + fmt(n, 3));
  }
  out.check(wins >= kBiasRequired, "biased > unbiased in " + std::to_string(wins) + "/" + std::to_string(kBiasSeeds) +
                                       " runs (need " + std::to_string(kBiasRequired) + ")");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"two_moons", two_moons},
      {"pce_consistency", pce_consistency},
      {"mediation_identities", mediation_identities},
      {"planted_concept", planted_concept},
      {"metric_oracles", metric_oracles},
      {"setrep", setrep_properties},
      {"gradient_checks", gradient_checks},
      {"bias_detection", bias_detection},
  };
  std::vector<std::string> wanted(argv + 1, argv + argc);
  bool all_pass = true;
  for (const auto& [name, run] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    Outcome outcome;
    try {
      outcome = run();
    } catch (const std::exception& e) {
      outcome.check(false, std::string("error: ") + e.what());
    }
    all_pass = all_pass && outcome.pass;
    std::cout << (outcome.pass ? "PASS " : "FAIL ") << name << ":";
    for (std::size_t i = 0; i < outcome.details.size(); ++i) std::cout << (i ? "; " : " ") << outcome.details[i];
    std::cout << std::endl;
  }
  return all_pass ? EXIT_SUCCESS : EXIT_FAILURE;
}
