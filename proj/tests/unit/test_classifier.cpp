#include "testing.hpp"

#include <cmath>
#include <random>

#include "cfaudit/classifier.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/data.hpp"

using namespace cfaudit;
using namespace cfaudit::classifier;

namespace {

ArchitectureDescriptor mlp(std::int64_t in, std::vector<std::int64_t> hidden, std::int64_t k) {
  ArchitectureDescriptor d;
  d.input_shape = {in};
  d.hidden = std::move(hidden);
  d.class_count = k;
  return d;
}

ArchitectureDescriptor cnn() {
  ArchitectureDescriptor d;
  d.kind = Architecture::cnn;
  d.input_shape = {1, 12, 12};
  d.hidden = {4, 6};
  d.dense_width = 16;
  d.class_count = 3;
  return d;
}

}  // namespace

TEST_SUITE("classifier") {

TEST_CASE("predictions are probability vectors for every architecture") {
  for (const auto& d : {mlp(2, {8, 8}, 2), cnn()}) {
    Classifier model(d, 1);
    std::vector<std::int64_t> shape = {5};
    shape.insert(shape.end(), d.input_shape.begin(), d.input_shape.end());
    const auto p = model.predict(torch::rand(shape));
    CHECK(p.size(1) == d.class_count);
    CHECK((p >= 0).all().item<bool>());
    CHECK((p.sum(1) - 1).abs().max().item<float>() < 1e-6);
  }
}

TEST_CASE("phi2 of phi1 reproduces f at every tap layer") {
  for (const auto& d : {mlp(2, {8, 8, 8}, 2), cnn()}) {
    Classifier model(d, 2);
    std::vector<std::int64_t> shape = {4};
    shape.insert(shape.end(), d.input_shape.begin(), d.input_shape.end());
    const auto x = torch::rand(shape);
    const auto reference = torch::softmax(model.logits(x), 1);
    auto names = model.stage_names();
    names.pop_back();
    for (const auto& name : names) {
      model.set_tap_layer(name);
      const auto tapped = model.tap(x);
      CHECK((model.phi2(tapped.activations) - reference).abs().max().item<float>() < 1e-6);
      CHECK(torch::equal(tapped.probabilities, model.predict(x)));
    }
    CHECK_THROWS_AS(model.set_tap_layer("logits"), ArgumentError);
    CHECK_THROWS_AS(model.set_tap_layer("nope"), ArgumentError);
  }
}

TEST_CASE("input shape mismatch is rejected") {
  Classifier model(mlp(2, {4}, 2), 0);
  CHECK_THROWS_AS(model.predict(torch::rand({3, 3})), ArgumentError);
  CHECK_THROWS_AS(model.predict(torch::rand({2})), ArgumentError);
}

TEST_CASE("untrained model on a zero input is near uniform") {
  Classifier model(cnn(), 3);
  const auto p = model.predict(torch::zeros({1, 1, 12, 12}));
  CHECK((p.max() - p.min()).item<float>() < 0.2);
}

TEST_CASE("predictive entropy reference values") {
  CHECK(predictive_entropy(std::vector<double>{1.0, 0.0}) == 0.0);
  CHECK(predictive_entropy(std::vector<double>{0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(predictive_entropy(std::vector<double>{0.25, 0.75}) == doctest::Approx(0.5623).epsilon(1e-4));
  const auto t = predictive_entropy(torch::tensor({{1.0, 0.0}, {0.5, 0.5}, {0.25, 0.75}}, torch::kFloat64));
  CHECK(t[0].item<double>() == 0.0);
  CHECK(t[2].item<double>() == doctest::Approx(0.562335).epsilon(1e-6));
}

TEST_CASE("predictive entropy stays within [0, ln K]") {
  std::mt19937 rng(4);
  std::gamma_distribution<double> gamma(0.3, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t k = 2 + rng() % 9;
    std::vector<double> p(k);
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (sum == 0.0) continue;
    for (auto& v : p) v /= sum;
    const double h = predictive_entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST_CASE("two-moons MLP reaches high validation accuracy deterministically") {
  const auto moons = data::make_two_moons(2000, 0.1, 42);
  TrainingConfig config;
  config.architecture = mlp(2, {32, 32}, 2);
  config.epochs = 40;
  config.learning_rate = 1e-2;
  config.seed = 5;
  const auto model = train_classifier(moons, config);
  CHECK(model.report().val_accuracy >= 0.95);
  const auto again = train_classifier(moons, config);
  CHECK(again.report().final_train_loss == model.report().final_train_loss);
}

TEST_CASE("single-class data is rejected") {
  auto moons = data::make_two_moons(20, 0.1, 0);
  std::vector<std::size_t> zeros;
  for (std::size_t i = 0; i < moons.size(); ++i)
    if (moons[i].label == 0) zeros.push_back(i);
  CHECK_THROWS_AS(train_classifier(moons.subset(zeros), {}), ArgumentError);
}

TEST_CASE("cross-entropy gradients match central differences") {
  Classifier model(mlp(3, {6, 5}, 3), 7);
  model.to(torch::kFloat64);
  const auto x = torch::randn({4, 3}, torch::kFloat64);
  const auto y = torch::tensor({0, 2, 1, 2}, torch::kInt64);
  const auto loss = [&] { return torch::cross_entropy_loss(model.logits(x), y); };
  CHECK(test_support::gradient_check(loss, model.net()->parameters()) <= 1e-4);
}

TEST_CASE("fine-tuning contracts") {
  Classifier model(mlp(2, {8}, 2), 8);
  const auto x = torch::randn({32, 2});
  torch::Tensor own;
  {
    torch::NoGradGuard g;
    own = model.predict(x);
  }
  const BatchSource self = [&](std::int64_t) { return std::vector<SoftLabeledBatch>{{x, own}}; };

  SUBCASE("zero learning rate leaves parameters unchanged") {
    const auto tuned = finetune(model, self, {.epochs = 3, .learning_rate = 0.0});
    const auto a = model.net()->parameters();
    const auto b = tuned.net()->parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));
  }
  SUBCASE("self-distillation does not increase the loss") {
    std::vector<double> losses;
    finetune(model, self, {.epochs = 6, .learning_rate = 1e-3}, [&](std::int64_t, const Classifier& m) {
      torch::NoGradGuard g;
      losses.push_back(soft_cross_entropy(m.logits(x), own).item<double>());
    });
    torch::NoGradGuard g;
    const double start = soft_cross_entropy(model.logits(x), own).item<double>();
    // own predictions are already the minimiser; Adam only jitters around it
    for (double l : losses) CHECK(l <= start + 1e-4);
  }
  SUBCASE("one-hot soft targets reduce to cross-entropy") {
    const auto labels = torch::randint(0, 2, {32}, torch::kInt64);
    const auto logits = model.logits(x);
    const auto soft = soft_cross_entropy(logits, torch::one_hot(labels, 2).to(torch::kFloat32));
    CHECK(soft.item<float>() == doctest::Approx(torch::cross_entropy_loss(logits, labels).item<float>()));
  }
  SUBCASE("invalid targets are rejected") {
    const BatchSource bad = [&](std::int64_t) {
      return std::vector<SoftLabeledBatch>{{x, torch::full({32, 2}, 0.7)}};
    };
    CHECK_THROWS_AS(finetune(model, bad, {}), ArgumentError);
  }
  SUBCASE("fine-tuning preserves architecture") {
    const auto tuned = finetune(model, self, {.epochs = 1, .learning_rate = 1e-2});
    const auto a = model.net()->parameters();
    const auto b = tuned.net()->parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].sizes() == b[i].sizes());
  }
}

TEST_CASE("intervene_forward identities") {
  for (const auto& d : {mlp(2, {8, 8}, 2), cnn()}) {
    Classifier model(d, 9);
    std::vector<std::int64_t> shape = {3};
    shape.insert(shape.end(), d.input_shape.begin(), d.input_shape.end());
    const auto x = torch::rand(shape);
    const auto x2 = torch::rand(shape);
    const auto p = model.predict(x);
    CHECK(torch::equal(intervene_forward(model, x, {}, torch::Tensor()), p));

    const auto units_n = model.unit_count();
    std::vector<std::int64_t> some = {0, units_n - 1};
    const auto own = unit_values(model, model.phi1(x), some);
    CHECK(torch::equal(intervene_forward(model, x, some, own), p));

    std::vector<std::int64_t> all(static_cast<std::size_t>(units_n));
    std::iota(all.begin(), all.end(), 0);
    const auto other = unit_values(model, model.phi1(x2), all);
    CHECK((intervene_forward(model, x, all, other) - model.predict(x2)).abs().max().item<float>() < 1e-6);

    CHECK_THROWS_AS(intervene_forward(model, x, {units_n}, own.narrow(1, 0, 1)), ArgumentError);
    CHECK_THROWS_AS(intervene_forward(model, x, some, own.narrow(1, 0, 1)), ArgumentError);
  }
}

TEST_CASE("cnn units are channels under max-pool vectorization") {
  Classifier model(cnn(), 1);
  CHECK(model.tap_layer() == "dense");
  model.set_tap_layer("conv2");
  CHECK(model.unit_count() == 6);
  CHECK(model.unit_shape() == std::vector<std::int64_t>{3, 3});
  auto flat = cnn();
  flat.vectorization = Vectorization::flatten;
  flat.tap_layer = "conv2";
  Classifier flat_model(flat, 1);
  CHECK(flat_model.unit_count() == 6 * 3 * 3);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = test_support::scratch_dir("classifier_ckpt");
  Classifier model(cnn(), 11);
  model.set_tap_layer("conv1");
  model.set_report({.final_train_loss = 0.5, .train_accuracy = 0.9, .val_accuracy = 0.8, .epoch_losses = {1, 0.5}});
  model.save(dir);
  const auto back = Classifier::load(dir);
  CHECK(back.tap_layer() == "conv1");
  CHECK(back.report().val_accuracy == 0.8);
  const auto x = torch::rand({2, 1, 12, 12});
  CHECK(torch::equal(back.predict(x), model.predict(x)));
  CHECK_THROWS_AS(Classifier::load(dir / "missing"), ArgumentError);
}

}
