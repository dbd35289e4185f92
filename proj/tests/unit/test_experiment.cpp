#include "testing.hpp"

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "bundle_fixture.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/experiment.hpp"
#include "cfaudit/image_io.hpp"

using namespace cfaudit;
using namespace cfaudit::experiment;
using json = nlohmann::json;

namespace {

Config minimal(json extra = json::object()) {
  json doc{{"schema_version", kSchemaVersion}};
  doc.merge_patch(extra);
  return Config(doc);
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("config paths, overrides and typed access") {
  auto config = minimal({{"explainer", {{"epochs", 3}}}});
  CHECK(config.has("explainer.epochs"));
  CHECK_FALSE(config.has("explainer.seed"));
  CHECK(config.get<int>("explainer.epochs") == 3);
  CHECK(config.get_or<int>("explainer.seed", 7) == 7);

  config.set("explainer.epochs=5");
  config.set("explainer.model.variant=v2-style");
  config.set("guard.quantile=0.1");
  config.set("name=\"quoted\"");
  CHECK(config.get<int>("explainer.epochs") == 5);
  CHECK(config.get<std::string>("explainer.model.variant") == "v2-style");
  CHECK(config.get<double>("guard.quantile") == 0.1);
  CHECK(config.get<std::string>("name") == "quoted");
  CHECK(config.section("explainer").at("model").is_object());
  CHECK(config.section("absent").empty());
}

TEST_CASE("config errors name the offending key") {
  const auto config = minimal({{"classifier", {{"epochs", "many"}}}});
  CHECK(message_of([&] { config.at("classifier.seed"); }).find("classifier.seed") != std::string::npos);
  CHECK_THROWS_AS(config.at("classifier.seed"), ConfigError);
  CHECK_THROWS_AS(config.get<int>("classifier.epochs"), ConfigError);
  auto mutable_config = config;
  CHECK_THROWS_AS(mutable_config.set("no-equals-sign"), ConfigError);
  CHECK_THROWS_AS(mutable_config.set("a..b=1"), ConfigError);
  CHECK_THROWS_AS(Config(json{{"dataset", {}}}), ConfigError);
  CHECK_THROWS_AS(Config(json{{"schema_version", 99}}), ConfigError);
  CHECK_THROWS_AS(Config(json::array()), ConfigError);
  CHECK_THROWS_AS(Config::load("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("output root precedence and fresh run directories") {
  const auto root = test_support::scratch_dir("run_dirs");
  ::setenv(kOutputRootEnv, (root / "from-env").c_str(), 1);
  CHECK(output_root(minimal()) == root / "from-env");
  CHECK(output_root(minimal({{"output", (root / "from-config").string()}})) == root / "from-config");
  ::unsetenv(kOutputRootEnv);
  CHECK(output_root(minimal()) == "runs");

  const auto config = minimal({{"output", root.string()}, {"marker", 42}});
  std::set<std::filesystem::path> dirs;
  for (int i = 0; i < 3; ++i) dirs.insert(create_run_dir(config, "step"));
  CHECK(dirs.size() == 3);
  for (const auto& d : dirs) {
    CHECK(d.parent_path() == root);
    CHECK(d.filename().string().rfind("step-", 0) == 0);
    CHECK(read_json(d / "resolved_config.json").at("marker") == 42);
  }
}

TEST_CASE("datasets from specs and seeded splits") {
  const auto moons = build_dataset({{"kind", "two_moons"}, {"n", 100}, {"noise", 0.1}, {"seed", 1}});
  CHECK(moons.size() == 100);
  CHECK(moons.sample_shape() == std::vector<std::int64_t>{2});
  const auto glyphs = build_dataset({{"kind", "glyph_digits"}, {"n", 20}, {"size", 8}, {"digits", {3, 8}}});
  CHECK(glyphs.class_count() == 2);
  CHECK(glyphs.sample_shape() == std::vector<std::int64_t>{1, 8, 8});
  CHECK_THROWS_AS(build_dataset({{"kind", "imagenet"}}), ConfigError);
  CHECK_THROWS_AS(build_dataset({{"n", 10}}), ConfigError);

  const auto s = split_dataset(moons, {{"test", 0.2}, {"val", 0.25}, {"seed", 4}});
  CHECK(s.test.size() == 20);
  CHECK(s.train.size() + s.validation.size() == 80);
  CHECK(s.validation.size() == 20);
  std::set<std::string> ids;
  for (const auto* part : {&s.train, &s.validation, &s.test})
    for (const auto& x : part->samples()) ids.insert(x.id);
  CHECK(ids.size() == 100);
  const auto again = split_dataset(moons, {{"test", 0.2}, {"val", 0.25}, {"seed", 4}});
  CHECK(again.test[0].id == s.test[0].id);

  // tags win over fractions when every sample has one
  std::vector<data::LabeledSample> tagged(moons.samples().begin(), moons.samples().end());
  for (std::size_t i = 0; i < tagged.size(); ++i) tagged[i].split = i < 10 ? "test" : "train";
  const auto t = split_dataset(data::Dataset(tagged, 2, data::Modality::vector), {{"test", 0.5}});
  CHECK(t.test.size() == 10);
  CHECK(t.train.size() + t.validation.size() == 90);
}

TEST_CASE("model configs take the input shape from the data") {
  const auto moons = build_dataset({{"kind", "two_moons"}, {"n", 20}});
  const auto config = minimal({{"classifier", {{"architecture", {{"hidden", {4}}, {"input_shape", {9}}}}, {"epochs", 2}}},
                               {"explainer", {{"epochs", 1}, {"model", {{"bins", 6}}}}}});
  const auto c = classifier_config(config, moons);
  CHECK(c.architecture.input_shape == std::vector<std::int64_t>{2});
  CHECK(c.epochs == 2);
  const auto e = explainer_config(config, moons);
  CHECK(e.model.input_shape == std::vector<std::int64_t>{2});
  CHECK(e.model.bins == 6);
  CHECK(e.epochs == 1);
  CHECK_THROWS_AS(explainer_config(minimal({{"explainer", {{"epochs", -1}}}}), moons), ConfigError);
  CHECK_THROWS_AS(classifier_config(minimal({{"classifier", {{"epochs", "x"}}}}), moons), ConfigError);
}

TEST_CASE("bundle round trip keeps models, guard, probes and effects") {
  const auto bundle = Bundle::load(tiny_bundle_dir());
  REQUIRE(bundle.explainer);
  CHECK(bundle.manifest.at("format") == kBundleFormat);
  CHECK(bundle.samples.size() == 60);
  CHECK(bundle.probes.size() == 2);
  CHECK(bundle.probes[0].concept_name == "first");
  REQUIRE(bundle.effects);
  CHECK(bundle.effects->at("ranking").size() == 3);  // includes the random control
  const auto again = Bundle::load(tiny_bundle_dir());
  torch::NoGradGuard no_grad;
  const auto x = bundle.samples.images();
  CHECK(torch::equal(bundle.classifier.predict(x), again.classifier.predict(x)));
  CHECK(torch::equal(bundle.explainer->explain(x, 0.3), again.explainer->explain(x, 0.3)));
  const auto guard = bundle.guard();
  CHECK(guard.threshold() == bundle.threshold);
  CHECK_THROWS_AS(Bundle::load(test_support::scratch_dir("not_a_bundle")), ConfigError);
}

TEST_CASE("sweep panels are ordered bin centres with matching posteriors") {
  const auto bundle = Bundle::load(tiny_bundle_dir());
  const auto& ex = *bundle.explainer;
  const auto x = bundle.samples[0].image;
  const auto panels = sweep_panels(ex, x, 10);
  REQUIRE(panels.size() == 10);
  torch::NoGradGuard no_grad;
  for (std::size_t k = 0; k < panels.size(); ++k) {
    CHECK(panels[k].c == doctest::Approx((static_cast<double>(k) + 0.5) / 10.0));
    if (k > 0) CHECK(panels[k].c > panels[k - 1].c);
    const auto single = ex.explain(x.unsqueeze(0), panels[k].c);
    CHECK(torch::allclose(single[0], panels[k].image, 1e-5, 1e-6));
    CHECK(panels[k].f_xc == doctest::Approx(ex.target_probability(panels[k].image.unsqueeze(0))[0].item<double>()));
  }
  CHECK_THROWS_AS(sweep_panels(ex, x, 0), ArgumentError);
}

TEST_CASE("train-classifier step writes its report and figure") {
  const auto root = test_support::scratch_dir("step_classifier");
  const auto config = minimal({{"output", root.string()},
                               {"dataset", {{"kind", "two_moons"}, {"n", 200}, {"seed", 2}}},
                               {"classifier", {{"architecture", {{"hidden", {8}}}}, {"epochs", 5}, {"learning_rate", 0.02}}}});
  const auto dir = create_run_dir(config, "train-classifier");
  const auto report = run_train_classifier(config, dir);
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "loss.png"));
  CHECK(std::filesystem::exists(dir / "classifier"));
  CHECK(report.at("test_accuracy").get<double>() >= 0.0);
  CHECK(read_json(dir / "report.json") == report);
}

TEST_CASE("reruns of a step write byte-identical reports") {
  const auto root = test_support::scratch_dir("step_rerun");
  const auto config = minimal({{"output", root.string()},
                               {"dataset", {{"kind", "two_moons"}, {"n", 120}, {"seed", 5}}},
                               {"classifier", {{"architecture", {{"hidden", {4}}}}, {"epochs", 2}}}});
  const auto a = create_run_dir(config, "train-classifier"), b = create_run_dir(config, "train-classifier");
  run_train_classifier(config, a);
  run_train_classifier(config, b);
  CHECK(io::read_text(a / "report.json") == io::read_text(b / "report.json"));
}

TEST_CASE("train-setrep writes an attention table and the lambda1 sweep") {
  const auto root = test_support::scratch_dir("step_setrep");
  const auto config = minimal({{"output", root.string()},
                               {"dataset", {{"kind", "glyph_digits"}, {"n", 200}, {"size", 8}, {"seed", 3}}},
                               {"bags", {{"count", 16}, {"test_count", 6}, {"min_size", 2}, {"max_size", 4}}},
                               {"setrep", {{"feature_dim", 4}, {"encoder_hidden", {8}}, {"attention_hidden", 4},
                                           {"epochs", 1}, {"lambda1_sweep", {0.0, 10.0}}}}});
  const auto dir = create_run_dir(config, "train-setrep");
  const auto report = run_train_setrep(config, dir);
  REQUIRE(report.at("lambda1_sweep").size() == 2);
  CHECK(report.at("lambda1_sweep")[1].at("lambda1") == 10.0);
  CHECK(report.at("test_effective_rank").get<double>() >= 1.0);

  std::istringstream table(io::read_text(dir / "attention.csv"));
  std::string line;
  std::getline(table, line);
  CHECK(line == "bag_id,outcome,patch_index,member_id,attention");
  std::map<std::string, double> totals;
  while (std::getline(table, line)) totals[line.substr(0, line.find(','))] += std::stod(line.substr(line.rfind(',') + 1));
  CHECK(totals.size() == 6);
  for (const auto& [bag, total] : totals) CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("pipeline steps reject configs without their inputs") {
  const auto root = test_support::scratch_dir("step_errors");
  const auto config = minimal({{"output", root.string()}});
  CHECK_THROWS_AS(run_train_classifier(config, root), ConfigError);
  CHECK_THROWS_AS(run_evaluate_uncertainty(config, root), ConfigError);
}

}
