#pragma once

#include <filesystem>
#include <memory>

#include "cfaudit/ace.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/experiment.hpp"
#include "cfaudit/mediation.hpp"
#include "support.hpp"

// A small two-moons bundle (classifier, one-epoch explainer, two probes, effect report), built once
// per process and reloaded from disk like the CLI does.
inline const std::filesystem::path& tiny_bundle_dir() {
  static const std::filesystem::path dir = [] {
    using namespace cfaudit;
    auto dir = test_support::scratch_dir("tiny_bundle");
    const auto all = data::make_two_moons(240, 0.1, 3);
    const auto [train, test] = all.split(0.75, 1);
    const experiment::Config config(nlohmann::json{
        {"schema_version", experiment::kSchemaVersion},
        {"classifier",
         {{"architecture", {{"kind", "mlp"}, {"hidden", {8}}}}, {"epochs", 15}, {"learning_rate", 0.02}, {"seed", 1}}},
        {"explainer",
         {{"model", {{"variant", "v1-ordinal"}, {"target_class", 1}, {"bins", 10}}},
          {"epochs", 1},
          {"d_steps", 1},
          {"seed", 2}}}});
    const auto model = classifier::train_classifier(train, experiment::classifier_config(config, train));
    const auto explainer = pce::train_pce(model, train, experiment::explainer_config(config, train));

    std::vector<mediation::ConceptProbe> probes(2);
    probes[0].concept_name = "first";
    probes[0].coefficients.assign(static_cast<std::size_t>(model.unit_count()), 0.0);
    probes[0].coefficients[0] = 1.0;
    probes[0].support = {0};
    probes[1].concept_name = "all";
    probes[1].coefficients.assign(static_cast<std::size_t>(model.unit_count()), 0.5);
    for (std::int64_t u = 0; u < model.unit_count(); ++u) probes[1].support.push_back(u);
    const metrics::ExplainFn explain = [&](const torch::Tensor& x, double c) { return explainer.explain(x, c); };
    const auto effects = mediation::rank_concepts(model, explain, probes, test.images()).to_json();

    experiment::BundleParts parts;
    parts.classifier = &model;
    parts.explainer = &explainer;
    parts.samples = &test;
    parts.threshold = ace::choose_threshold(metrics::to_vector(explainer.discriminator_score(train.images())), 0.1);
    parts.quantile = 0.1;
    parts.probes = &probes;
    parts.effects = &effects;
    experiment::write_bundle(dir, parts);
    return dir;
  }();
  return dir;
}

inline std::shared_ptr<const cfaudit::experiment::Bundle> tiny_bundle() {
  return std::make_shared<const cfaudit::experiment::Bundle>(cfaudit::experiment::Bundle::load(tiny_bundle_dir()));
}
