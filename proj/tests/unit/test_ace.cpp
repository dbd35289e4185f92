#include "testing.hpp"

#include <cmath>
#include <random>
#include <set>

#include "cfaudit/ace.hpp"
#include "cfaudit/classifier.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/pce.hpp"

using namespace cfaudit;
using namespace cfaudit::ace;

namespace {

classifier::Classifier moon_classifier(std::uint64_t seed = 1) {
  classifier::ArchitectureDescriptor d;
  d.input_shape = {2};
  d.hidden = {8, 8};
  return classifier::Classifier(d, seed);
}

pce::ExplainerModel untrained_explainer(const classifier::Classifier& model) {
  pce::ExplainerConfig c;
  c.input_shape = {2};
  c.latent_dim = 4;
  c.hidden = 16;
  c.blocks = 1;
  c.output_low = {-2.0, -2.0};
  c.output_high = {3.0, 2.0};
  return pce::ExplainerModel(c, model, 2);
}

pce::ExplainerModel ready_explainer(const classifier::Classifier& model) {
  auto e = untrained_explainer(model);
  e.mark_trained({});
  return e;
}

ScoreFn constant_score(double s) {
  return [s](const torch::Tensor& x) { return torch::full({x.size(0)}, s, torch::kFloat64); };
}

bool same_parameters(const classifier::Classifier& a, const classifier::Classifier& b) {
  const auto pa = a.net()->parameters(), pb = b.net()->parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!torch::equal(pa[i], pb[i])) return false;
  return true;
}

}  // namespace

TEST_SUITE("ace") {

TEST_CASE("soft labels pair the target with its complement") {
  const auto one_hot = soft_label(1.0, 1, 0, 2);
  CHECK(one_hot == std::vector<double>{0.0, 1.0});
  const auto mixed = soft_label(0.3, 2, 0, 4);
  CHECK(mixed[2] == doctest::Approx(0.3));
  CHECK(mixed[0] == doctest::Approx(0.7));
  CHECK(mixed[1] == 0.0);
  CHECK_THROWS_AS(soft_label(1.2, 1, 0, 2), ArgumentError);
  CHECK_THROWS_AS(soft_label(0.5, 1, 1, 2), ArgumentError);
}

TEST_CASE("complement class is the source label or the runner-up") {
  classifier::ArchitectureDescriptor d;
  d.input_shape = {2};
  d.hidden = {4};
  d.class_count = 3;
  classifier::Classifier model(d, 4);
  data::LabeledSample s;
  s.image = torch::tensor({0.3f, -0.2f});
  s.label = 2;
  CHECK(complement_class(model, s, 1) == 2);
  s.label = 1;
  const auto p = model.predict(s.image.unsqueeze(0))[0];
  const auto expected = p[0].item<float>() >= p[2].item<float>() ? 0 : 2;
  CHECK(complement_class(model, s, 1) == expected);
}

TEST_CASE("augmentation pool size, labels, provenance and determinism") {
  const auto moons = data::make_two_moons(40, 0.1, 3);
  const auto model = moon_classifier();
  const auto explainer = ready_explainer(model);
  const auto pool = build_augmentation_pool(explainer, model, moons, 4, 11);
  REQUIRE(pool.size() == 160);
  CHECK(pool.images().sizes() == torch::IntArrayRef({160, 2}));
  std::set<std::string> ids;
  for (const auto& s : moons.samples()) ids.insert(s.id);
  for (const auto& e : pool.entries) {
    CHECK(ids.count(e.source_id) == 1);
    double sum = 0.0;
    for (double v : e.soft_label) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0));
    CHECK(e.soft_label[1] == doctest::Approx(e.sampled_c));
  }
  const auto again = build_augmentation_pool(explainer, model, moons, 4, 11);
  CHECK(torch::equal(pool.images(), again.images()));
  CHECK(torch::equal(pool.soft_labels(), again.soft_labels()));
  const auto other = build_augmentation_pool(explainer, model, moons, 4, 12);
  CHECK_FALSE(torch::equal(pool.soft_labels(), other.soft_labels()));

  CHECK_THROWS_AS(build_augmentation_pool(explainer, model, moons, 0, 1), ArgumentError);
  CHECK_THROWS_AS(build_augmentation_pool(untrained_explainer(model), model, moons, 4, 1), StateError);
}

TEST_CASE("augmentation pool persists as a soft-label manifest") {
  const auto moons = data::make_two_moons(10, 0.1, 3);
  const auto model = moon_classifier();
  const auto pool = build_augmentation_pool(ready_explainer(model), model, moons, 2, 5);
  const auto dir = test_support::scratch_dir("ace_pool");
  pool.save(dir);
  const auto back = AugmentationPool::load(dir);
  REQUIRE(back.size() == pool.size());
  CHECK(back.target_class == pool.target_class);
  CHECK(torch::allclose(back.images(), pool.images()));
  CHECK(torch::allclose(back.soft_labels(), pool.soft_labels()));
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(back.entries[i].source_id == pool.entries[i].source_id);
    CHECK(back.entries[i].sampled_c == pool.entries[i].sampled_c);
  }
  const auto loaded = data::load_manifest(dir / "manifest.json");
  CHECK(loaded.soft_labels.size() == pool.size());
}

TEST_CASE("mixed batches cover the real data and respect the ratio") {
  const auto moons = data::make_two_moons(50, 0.1, 3);
  const auto model = moon_classifier();
  const auto pool = build_augmentation_pool(ready_explainer(model), model, moons, 1, 5);

  const auto real_only = mixed_batches(moons, pool, 0.0, 16, 1);
  std::int64_t rows = 0;
  for (const auto& b : real_only) {
    rows += b.images.size(0);
    CHECK(torch::equal(std::get<0>(b.targets.max(1)), torch::ones({b.targets.size(0)})));
  }
  CHECK(rows == 50);

  const auto half = mixed_batches(moons, pool, 0.5, 16, 1);
  CHECK(half.size() == 7);  // ceil(50 / 8)
  for (const auto& b : half) {
    CHECK(b.targets.size(1) == 2);
    CHECK(torch::allclose(b.targets.sum(1), torch::ones({b.targets.size(0)})));
  }
  CHECK(half.front().images.size(0) == 16);
  CHECK_THROWS_AS(mixed_batches(moons, pool, 1.5, 16, 1), ArgumentError);
}

TEST_CASE("mix ratio 0 equals plain fine-tuning on real data") {
  const auto moons = data::make_two_moons(120, 0.1, 3);
  const auto [train, val] = moons.split(0.75, 1);
  const auto model = moon_classifier(2);
  const auto pool = build_augmentation_pool(ready_explainer(model), model, train, 1, 5);
  AceConfig cfg;
  cfg.mix_ratio = 0.0;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 16;
  cfg.seed = 4;
  cfg.accuracy_drop_budget = 1.0;
  const auto result = ace_finetune(model, train, pool, val, cfg);

  classifier::FinetuneConfig fc;
  fc.epochs = 2;
  fc.learning_rate = 1e-2;
  std::vector<classifier::Classifier> snapshots;
  classifier::finetune(
      model,
      [&](std::int64_t epoch) {
        return mixed_batches(train, {}, 0.0, 16, cfg.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
      },
      fc, [&](std::int64_t, const classifier::Classifier& m) { snapshots.push_back(m.clone()); });
  REQUIRE(result.selected_epoch >= 1);
  CHECK(same_parameters(result.model, snapshots[static_cast<std::size_t>(result.selected_epoch - 1)]));
}

TEST_CASE("zero learning rate keeps the baseline exactly") {
  const auto moons = data::make_two_moons(80, 0.1, 3);
  const auto [train, val] = moons.split(0.75, 1);
  const auto model = moon_classifier(2);
  const auto pool = build_augmentation_pool(ready_explainer(model), model, train, 1, 5);
  AceConfig cfg;
  cfg.mix_ratio = 0.0;
  cfg.learning_rate = 0.0;
  cfg.epochs = 2;
  const auto result = ace_finetune(model, train, pool, val, cfg);
  CHECK(same_parameters(result.model, model));
  for (const auto& c : result.checkpoints) CHECK(c.accuracy == result.baseline.accuracy);
  const GuardedClassifier guard(result.model, constant_score(1.0), 0.5);
  const GuardedClassifier baseline(model, constant_score(1.0), 0.5);
  ace::UncertaintySets sets{val.images(), val.labels(), {}, {}, {}};
  CHECK(evaluate_uncertainty(guard, sets).accuracy == evaluate_uncertainty(baseline, sets).accuracy);
}

TEST_CASE("fine-tuning preserves parameter shapes and picks a checkpoint within budget") {
  const auto moons = data::make_two_moons(200, 0.1, 3);
  const auto [train, val] = moons.split(0.75, 1);
  const auto model = classifier::train_classifier(train, [] {
    classifier::TrainingConfig c;
    c.architecture.input_shape = {2};
    c.architecture.hidden = {8, 8};
    c.epochs = 30;
    c.learning_rate = 1e-2;
    return c;
  }());
  const auto pool = build_augmentation_pool(ready_explainer(model), model, train, 2, 5);
  AceConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 1e-3;
  const auto result = ace_finetune(model, train, pool, val, cfg);
  const auto before = model.net()->parameters(), after = result.model.net()->parameters();
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].sizes() == after[i].sizes());
  CHECK(result.checkpoints.size() == 3);
  const auto& chosen = result.checkpoints[static_cast<std::size_t>(result.selected_epoch - 1)];
  bool any_within = false;
  for (const auto& c : result.checkpoints) any_within |= c.accuracy >= result.baseline.accuracy - cfg.accuracy_drop_budget;
  if (any_within) {
    CHECK(chosen.accuracy >= result.baseline.accuracy - cfg.accuracy_drop_budget);
    for (const auto& c : result.checkpoints)
      if (c.accuracy >= result.baseline.accuracy - cfg.accuracy_drop_budget) CHECK(chosen.ece <= c.ece);
  }
  CHECK(result.to_json().at("checkpoints").size() == 3);
}

TEST_CASE("ace config validation and json") {
  AceConfig c;
  c.mix_ratio = 0.25;
  c.epochs = 7;
  const auto back = AceConfig::from_json(c.to_json());
  CHECK(back.mix_ratio == 0.25);
  CHECK(back.epochs == 7);
  c.mix_ratio = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  AceConfig e;
  e.epochs = 0;
  CHECK_THROWS_AS(e.validate(), ConfigError);
}

TEST_CASE("guard returns a posterior or abstains by threshold") {
  const auto model = moon_classifier();
  const auto x = torch::randn({5, 2});
  const auto keep = GuardedClassifier(model, constant_score(0.9), 0.5).predict(x);
  for (const auto& o : keep) {
    REQUIRE(std::holds_alternative<torch::Tensor>(o));
    CHECK(std::get<torch::Tensor>(o).size(0) == 2);
  }
  for (const auto& o : GuardedClassifier(model, constant_score(0.3), 0.5).predict(x))
    CHECK(std::holds_alternative<Abstain>(o));
  for (const auto& o : GuardedClassifier(model, constant_score(0.0), 0.0).predict(x))
    CHECK(std::holds_alternative<torch::Tensor>(o));
}

TEST_CASE("guard is total over random scores and thresholds") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto model = moon_classifier();
  for (int trial = 0; trial < 20; ++trial) {
    const double h = u(rng);
    const ScoreFn score = [](const torch::Tensor& x) { return torch::sigmoid(x.select(1, 0)).to(torch::kFloat64); };
    const GuardedClassifier guard(model, score, h);
    const auto x = torch::randn({12, 2}, torch::kFloat64);
    const auto outcomes = guard.predict(x);
    const auto s = metrics::to_vector(score(x));
    REQUIRE(outcomes.size() == 12);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      CHECK(outcomes[i].index() == (s[i] >= h ? 0u : 1u));
    }
  }
}

TEST_CASE("threshold is the lower quantile of id scores") {
  std::vector<double> scores(101);
  std::iota(scores.begin(), scores.end(), 0.0);
  std::shuffle(scores.begin(), scores.end(), std::mt19937(1));
  CHECK(choose_threshold(scores, 0.05) == doctest::Approx(5.0));
  CHECK(choose_threshold(scores, 0.0) == 0.0);
  CHECK(choose_threshold({1.0, 2.0}, 0.5) == doctest::Approx(1.5));
  CHECK_THROWS_AS(choose_threshold({}, 0.05), ArgumentError);
}

TEST_CASE("discriminator guard rejects about the requested share of held-out id data") {
  const auto moons = data::make_two_moons(400, 0.1, 3);
  const auto model = moon_classifier();
  const auto explainer = ready_explainer(model);
  const auto guard = make_guard(model, explainer, moons.images(), 0.05);
  const auto reject = guard.abstains(moons.images());
  const auto rate = static_cast<double>(std::count(reject.begin(), reject.end(), true)) / 400.0;
  CHECK(rate == doctest::Approx(0.05).epsilon(0.2));
}

TEST_CASE("uncertainty report on identical sets shows no separation") {
  const auto moons = data::make_two_moons(300, 0.1, 3);
  const auto model = moon_classifier();
  const GuardedClassifier guard(
      model, [](const torch::Tensor& x) { return x.select(1, 1).to(torch::kFloat64); }, -10.0);
  ace::UncertaintySets sets{moons.images(), moons.labels(), moons.images(), moons.images(), moons.images()};
  const auto r = evaluate_uncertainty(guard, sets);
  CHECK(r.aid->auc_roc == doctest::Approx(0.5));
  CHECK(r.near_ood->auc_roc == doctest::Approx(0.5));
  CHECK(r.far_ood->auc_roc == doctest::Approx(0.5));
  CHECK(*r.far_ood_abstain_rate == 0.0);
  CHECK(r.id_abstain_rate == 0.0);
  CHECK(r.to_json().at("aid").is_object());

  ace::UncertaintySets partial{moons.images(), moons.labels(), {}, {}, {}};
  const auto p = evaluate_uncertainty(guard, partial);
  CHECK_FALSE(p.aid.has_value());
  CHECK(p.to_json().at("far_ood").is_null());

  ace::UncertaintySets empty{moons.images(), moons.labels(), torch::zeros({0, 2}), {}, {}};
  CHECK_THROWS_AS(evaluate_uncertainty(guard, empty), ArgumentError);
}

TEST_CASE("entropy quantile mask keeps the most uncertain share") {
  const auto model = moon_classifier(5);
  torch::manual_seed(3);
  const auto x = torch::randn({200, 2}) * 2;
  const auto mask = entropy_quantile_mask(model, x, 0.075);
  CHECK(std::count(mask.begin(), mask.end(), true) == 15);
  const auto pe = metrics::to_vector(classifier::predictive_entropy(model, x));
  double lowest_kept = 1e9, highest_dropped = -1e9;
  for (std::size_t i = 0; i < pe.size(); ++i) {
    if (mask[i]) lowest_kept = std::min(lowest_kept, pe[i]);
    else highest_dropped = std::max(highest_dropped, pe[i]);
  }
  CHECK(lowest_kept >= highest_dropped);
  CHECK_THROWS_AS(entropy_quantile_mask(model, x, 0.0), ArgumentError);
}

TEST_CASE("two-moons band and far grid geometry") {
  const auto pts = torch::tensor({{0.0f, 1.0f}, {1.0f, -0.5f}, {0.5f, 0.25f}, {5.0f, 5.0f}}).reshape({4, 2});
  const auto band = moon_band_mask(pts);
  CHECK_FALSE(band[0]);
  CHECK_FALSE(band[1]);
  const auto moons = data::make_two_moons(200, 0.1, 1);
  const auto grid = moon_far_grid(moons.images());
  REQUIRE(grid.size(0) > 100);
  const auto g = grid.accessor<float, 2>();
  for (std::int64_t i = 0; i < grid.size(0); ++i) {
    const auto d = data::moon_distances(g[i][0], g[i][1]);
    CHECK(d.to_upper > 1.0);
    CHECK(d.to_lower > 1.0);
  }
  CHECK_THROWS_AS(moon_band_mask(torch::zeros({3, 3})), ArgumentError);
}

}  // TEST_SUITE
