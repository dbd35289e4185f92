#include "testing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfaudit/common.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/setrep.hpp"

using namespace cfaudit;
using namespace cfaudit::setrep;

namespace {

SetModel tiny_model(std::uint64_t seed, OutcomeKind kind = OutcomeKind::binary) {
  torch::manual_seed(seed);
  SetModelConfig c;
  c.patch_shape = {2, 2};
  c.feature_dim = 4;
  c.encoder_hidden = {6};
  c.attention_hidden = 3;
  c.outcome_kind = kind;
  return SetModel(c);
}

data::PatchBag bag_of(torch::Tensor patches, double outcome = 1.0) {
  data::PatchBag bag;
  bag.subject_id = "b";
  bag.patches = std::move(patches);
  bag.outcome = {outcome};
  return bag;
}

std::int64_t parameter_count(torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace

TEST_SUITE("setrep") {

TEST_CASE("equivariant layer hand-evaluated example") {
  const auto H = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, torch::kFloat64);
  const auto out = equivariant_layer(H, torch::eye(2, torch::kFloat64), torch::zeros({2}, torch::kFloat64));
  CHECK(torch::equal(out, torch::tensor({{0.0, -1.0}, {-1.0, 0.0}}, torch::kFloat64)));
}

TEST_CASE("equivariant layer on a single row returns the bias") {
  const auto b = torch::tensor({0.3, -1.2, 2.0});
  const auto out = equivariant_layer(torch::randn({1, 4}), torch::randn({3, 4}), b);
  CHECK(torch::equal(out[0], b));
}

TEST_CASE("equivariant layer commutes with every row permutation for N <= 5") {
  for (std::int64_t n = 1; n <= 5; ++n) {
    const auto H = torch::randn({n, 3}, torch::kFloat64);
    const auto W = torch::randn({2, 3}, torch::kFloat64);
    const auto b = torch::randn({2}, torch::kFloat64);
    const auto reference = equivariant_layer(H, W, b);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    do {
      const auto idx = torch::tensor(perm);
      const auto permuted = equivariant_layer(H.index_select(0, idx), W, b);
      CHECK(torch::allclose(permuted, reference.index_select(0, idx), 0.0, 1e-12));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST_CASE("equivariant layer rejects mismatched shapes") {
  CHECK_THROWS_AS(equivariant_layer(torch::randn({2, 3}), torch::randn({2, 4}), torch::randn({2})), ArgumentError);
  CHECK_THROWS_AS(equivariant_layer(torch::randn({2, 3}), torch::randn({2, 3}), torch::randn({3})), ArgumentError);
  CHECK_THROWS_AS(equivariant_layer(torch::randn({0, 3}), torch::randn({2, 3}), torch::randn({2})), ArgumentError);
}

TEST_CASE("attention is a simplex element and equivariant") {
  auto model = tiny_model(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + trial % 7;
    const auto bag = bag_of(torch::rand({n, 2, 2}));
    const auto alpha = model->attention_weights(bag);
    CHECK((alpha >= 0).all().item<bool>());
    CHECK(std::abs(alpha.sum().item<double>() - 1.0) <= 1e-6);

    const auto perm = torch::randperm(n, torch::kInt64);
    const auto permuted = bag_of(bag.patches.index_select(0, perm));
    CHECK(torch::equal(model->attention_weights(permuted), alpha.index_select(0, perm)));
    CHECK(torch::equal(model->predict_outcome(permuted), model->predict_outcome(bag)));
    CHECK(torch::equal(model->aggregate(permuted), model->aggregate(bag)));
  }
}

TEST_CASE("identical patches get uniform attention") {
  auto model = tiny_model(2);
  const auto bag = bag_of(torch::rand({1, 2, 2}).repeat({5, 1, 1}));
  const auto alpha = model->attention_weights(bag);
  CHECK(torch::allclose(alpha, torch::full({5}, 0.2), 0.0, 1e-7));
}

TEST_CASE("aggregation special cases") {
  auto model = tiny_model(3);
  const auto single = bag_of(torch::rand({1, 2, 2}));
  CHECK(torch::allclose(model->aggregate(single), model->encode(single.patches)[0], 0.0, 1e-7));

  const auto bag = bag_of(torch::rand({4, 2, 2}));
  const auto uniform = model->aggregate_with_weights(bag, torch::full({4}, 0.25));
  CHECK(torch::allclose(uniform, model->encode(bag.patches).mean(0), 0.0, 1e-6));
}

TEST_CASE("log-sum regulariser values") {
  const auto even = log_sum_regularizer(torch::tensor({0.5, 0.5}, torch::kFloat64), 0.0).item<double>();
  const auto sparse = log_sum_regularizer(torch::tensor({0.9, 0.1}, torch::kFloat64), 0.0).item<double>();
  CHECK(even == doctest::Approx(-1.386294).epsilon(1e-6));
  CHECK(sparse == doctest::Approx(-2.407946).epsilon(1e-6));
  CHECK(sparse < even);
}

TEST_CASE("loss decomposition contracts") {
  auto model = tiny_model(4);
  const auto bag = bag_of(torch::rand({3, 2, 2}));
  const auto plain = subject2vec_loss(model, bag, {1.0}, {.lambda1 = 0.0, .lambda2 = 0.0});
  CHECK(plain.total.item<double>() == plain.discriminative.item<double>());
  const auto full = subject2vec_loss(model, bag, {1.0}, {});
  CHECK(full.total.item<double>() ==
        doctest::Approx(full.discriminative.item<double>() + 10.0 * full.generative.item<double>() +
                        full.regularizer.item<double>()));
  const auto x = torch::rand({3, 2, 2});
  CHECK(reconstruction_distance(x, x).item<double>() == 0.0);
  // per-patch l2 norms averaged: patches differ by 0.5 in all 4 entries -> norm 1
  CHECK(reconstruction_distance(x, x + 0.5).item<double>() == doctest::Approx(1.0));
  CHECK_THROWS_AS(subject2vec_loss(model, bag, {1.0, 0.0}, {}), ArgumentError);
}

TEST_CASE("subject2vec loss gradients match central differences") {
  for (auto kind : {OutcomeKind::binary, OutcomeKind::continuous}) {
    auto model = tiny_model(5, kind);
    model->to(torch::kFloat64);
    REQUIRE(parameter_count(*model) <= 1000);
    const auto bag = bag_of(torch::rand({4, 2, 2}, torch::kFloat64), 1.0);
    const auto loss = [&] { return subject2vec_loss(model, bag, {kind == OutcomeKind::binary ? 1.0 : 0.7}, {}).total; };
    CHECK(test_support::gradient_check(loss, model->parameters()) <= 1e-4);
  }
}

TEST_CASE("training is reproducible and validates its input") {
  const auto digits = data::make_glyph_digits(120, 2, {.size = 8});
  const data::SamplePredicate three = [](const data::LabeledSample& s) { return s.label == 3; };
  const auto bags = data::make_bags(digits, {.bag_count = 16, .min_size = 2, .max_size = 5}, three, 1);
  SetTrainConfig config;
  config.model.feature_dim = 8;
  config.model.encoder_hidden = {16};
  config.model.attention_hidden = 8;
  config.epochs = 2;
  config.seed = 3;
  const auto a = train_setrep(bags, config);
  const auto b = train_setrep(bags, config);
  CHECK(a.report.epoch_losses == b.report.epoch_losses);
  CHECK(a.report.effective_rank > 0.0);

  std::vector<data::PatchBag> same = {bags[0], bags[0]};
  same[1].outcome = same[0].outcome;
  CHECK_THROWS_AS(train_setrep(same, config), ArgumentError);
  CHECK_THROWS_AS(train_setrep({bags[0]}, config), ArgumentError);
}

TEST_CASE("effective rank of simple spectra") {
  // two orthogonal directions with equal energy -> rank 2
  auto m = torch::zeros({4, 3}, torch::kFloat64);
  m[0][0] = 1; m[1][0] = -1; m[2][1] = 1; m[3][1] = -1;
  CHECK(effective_rank(m) == doctest::Approx(2.0));
  CHECK(effective_rank(torch::ones({5, 3})) == 0.0);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = test_support::scratch_dir("setrep_ckpt");
  auto model = tiny_model(6);
  save_set_model(model, dir);
  auto back = load_set_model(dir);
  const auto bag = bag_of(torch::rand({3, 2, 2}));
  CHECK(torch::equal(back->predict_outcome(bag), model->predict_outcome(bag)));
}

}
