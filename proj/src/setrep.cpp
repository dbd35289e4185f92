#include "cfaudit/setrep.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>

#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"

namespace cfaudit::setrep {

using nlohmann::json;

json SetModelConfig::to_json() const {
  return {{"patch_shape", patch_shape},
          {"feature_dim", feature_dim},
          {"encoder_hidden", encoder_hidden},
          {"attention_hidden", attention_hidden},
          {"outcome_dim", outcome_dim},
          {"outcome_kind", outcome_kind == OutcomeKind::binary ? "binary" : "continuous"}};
}

SetModelConfig SetModelConfig::from_json(const json& j) {
  SetModelConfig c;
  c.patch_shape = j.at("patch_shape").get<std::vector<std::int64_t>>();
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.attention_hidden = j.value("attention_hidden", c.attention_hidden);
  c.outcome_dim = j.value("outcome_dim", c.outcome_dim);
  const auto kind = j.value("outcome_kind", std::string("binary"));
  if (kind != "binary" && kind != "continuous") throw ArgumentError("unknown outcome kind: " + kind);
  c.outcome_kind = kind == "binary" ? OutcomeKind::binary : OutcomeKind::continuous;
  return c;
}

// ============================================================== equivariant layer

torch::Tensor equivariant_layer(const torch::Tensor& H, const torch::Tensor& W, const torch::Tensor& b) {
  if (H.dim() != 2 || H.size(0) < 1) throw ArgumentError("equivariant_layer expects a non-empty N x d matrix");
  if (W.dim() != 2 || W.size(1) != H.size(1)) throw ArgumentError("W must be L x d");
  if (b.dim() != 1 || b.size(0) != W.size(0)) throw ArgumentError("b must have length L");
  const auto colmax = std::get<0>(H.max(0, true));
  return torch::addmm(b, H - colmax, W.t());
}

EquivariantLinearImpl::EquivariantLinearImpl(std::int64_t in, std::int64_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = register_parameter("weight", torch::empty({out, in}).uniform_(-bound, bound));
  bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
}

torch::Tensor EquivariantLinearImpl::forward(const torch::Tensor& H) { return equivariant_layer(H, weight, bias); }

// ============================================================== model

SetModelImpl::SetModelImpl(SetModelConfig config) : config_(std::move(config)) {
  if (config_.patch_shape.empty()) throw ArgumentError("patch shape required");
  if (config_.feature_dim < 1 || config_.outcome_dim < 1 || config_.attention_hidden < 1)
    throw ArgumentError("set model sizes must be positive");
  const std::int64_t in = std::accumulate(config_.patch_shape.begin(), config_.patch_shape.end(), std::int64_t{1},
                                          std::multiplies<>());
  encoder_ = torch::nn::Sequential(torch::nn::Flatten());
  std::int64_t width = in;
  for (auto h : config_.encoder_hidden) {
    encoder_->push_back(torch::nn::Linear(width, h));
    encoder_->push_back(torch::nn::ELU());
    width = h;
  }
  encoder_->push_back(torch::nn::Linear(width, config_.feature_dim));

  decoder_ = torch::nn::Sequential();
  width = config_.feature_dim;
  for (auto it = config_.encoder_hidden.rbegin(); it != config_.encoder_hidden.rend(); ++it) {
    decoder_->push_back(torch::nn::Linear(width, *it));
    decoder_->push_back(torch::nn::ELU());
    width = *it;
  }
  decoder_->push_back(torch::nn::Linear(width, in));

  register_module("encoder", encoder_);
  register_module("decoder", decoder_);
  attention1_ = register_module("attention1", EquivariantLinear(config_.feature_dim, config_.attention_hidden));
  attention2_ = register_module("attention2", EquivariantLinear(config_.attention_hidden, 1));
  predictor_ = register_module("predictor", torch::nn::Linear(config_.feature_dim, config_.outcome_dim));
}

torch::Tensor SetModelImpl::encode(const torch::Tensor& patches) { return encoder_->forward(patches); }

torch::Tensor SetModelImpl::decode(const torch::Tensor& features) {
  std::vector<std::int64_t> shape = {features.size(0)};
  shape.insert(shape.end(), config_.patch_shape.begin(), config_.patch_shape.end());
  return decoder_->forward(features).view(shape);
}

torch::Tensor SetModelImpl::attention(const torch::Tensor& features) {
  auto h = torch::elu(attention1_->forward(features));
  auto score = torch::sigmoid(attention2_->forward(h)).squeeze(1);
  return torch::softmax(score, 0);
}

std::vector<std::int64_t> canonical_order(const torch::Tensor& patches) {
  const auto n = patches.size(0);
  const auto flat = patches.detach().to(torch::kCPU).to(torch::kFloat64).reshape({n, -1}).contiguous();
  const auto m = flat.size(1);
  const double* base = flat.data_ptr<double>();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return std::lexicographical_compare(base + a * m, base + (a + 1) * m, base + b * m, base + (b + 1) * m);
  });
  return order;
}

BagPass SetModelImpl::pass(const torch::Tensor& patches_in) {
  if (!patches_in.defined() || patches_in.dim() < 1 || patches_in.size(0) < 1)
    throw ArgumentError("bag must contain at least one patch");
  std::vector<std::int64_t> expected = {patches_in.size(0)};
  expected.insert(expected.end(), config_.patch_shape.begin(), config_.patch_shape.end());
  if (patches_in.sizes().vec() != expected) throw ArgumentError("patch shape does not match the set model");
  const auto dtype = predictor_->weight.scalar_type();

  BagPass out;
  out.order = canonical_order(patches_in);
  out.patches = patches_in.index_select(0, torch::tensor(out.order, torch::kInt64)).to(dtype);
  out.features = encode(out.patches);
  out.reconstructions = decode(out.features);
  out.alpha = attention(out.features);
  out.representation = (out.alpha.unsqueeze(1) * out.features).sum(0);
  out.outcome_logits = predictor_->forward(out.representation.unsqueeze(0)).squeeze(0);
  return out;
}

torch::Tensor SetModelImpl::attention_weights(const data::PatchBag& bag) {
  const auto p = pass(bag.patches);
  auto alpha = torch::empty_like(p.alpha);
  alpha.index_copy_(0, torch::tensor(p.order, torch::kInt64), p.alpha);
  return alpha;
}

torch::Tensor SetModelImpl::aggregate(const data::PatchBag& bag) { return pass(bag.patches).representation; }

torch::Tensor SetModelImpl::aggregate_with_weights(const data::PatchBag& bag, const torch::Tensor& weights) {
  if (weights.dim() != 1 || weights.size(0) != static_cast<std::int64_t>(bag.size()))
    throw ArgumentError("one weight per patch required");
  const auto p = pass(bag.patches);
  const auto w = weights.to(p.features.scalar_type()).index_select(0, torch::tensor(p.order, torch::kInt64));
  return (w.unsqueeze(1) * p.features).sum(0);
}

torch::Tensor SetModelImpl::outcome_from_logits(const torch::Tensor& logits) const {
  return config_.outcome_kind == OutcomeKind::binary ? torch::sigmoid(logits) : logits;
}

torch::Tensor SetModelImpl::predict_outcome(const data::PatchBag& bag) {
  return outcome_from_logits(pass(bag.patches).outcome_logits);
}

// ============================================================== losses

torch::Tensor log_sum_regularizer(const torch::Tensor& alpha, double epsilon) {
  if (epsilon < 0.0) throw ArgumentError("epsilon must be nonnegative");
  return torch::log(alpha + epsilon).sum();
}

torch::Tensor reconstruction_distance(const torch::Tensor& patches, const torch::Tensor& reconstructions) {
  if (patches.sizes() != reconstructions.sizes()) throw ArgumentError("reconstruction shape mismatch");
  const auto n = patches.size(0);
  return torch::linalg_vector_norm((patches - reconstructions).reshape({n, -1}), 2, {1}, false, std::nullopt)
      .mean();
}

LossTerms subject2vec_loss(SetModel& model, const data::PatchBag& bag, const std::vector<double>& outcome,
                           const LossWeights& weights) {
  const auto& cfg = model->config();
  if (static_cast<std::int64_t>(outcome.size()) != cfg.outcome_dim)
    throw ArgumentError("outcome vector length does not match the model");
  const auto p = model->pass(bag.patches);
  const auto target = torch::tensor(outcome, torch::kFloat64).to(p.outcome_logits.scalar_type());
  LossTerms terms;
  terms.discriminative = cfg.outcome_kind == OutcomeKind::binary
                             ? torch::binary_cross_entropy_with_logits(p.outcome_logits, target)
                             : torch::mse_loss(p.outcome_logits, target);
  terms.generative = reconstruction_distance(p.patches, p.reconstructions);
  terms.regularizer = log_sum_regularizer(p.alpha, weights.epsilon);
  terms.total = terms.discriminative + weights.lambda1 * terms.generative + weights.lambda2 * terms.regularizer;
  return terms;
}

// ============================================================== training

json SetTrainReport::to_json() const { return {{"epoch_losses", epoch_losses}, {"effective_rank", effective_rank}}; }

double effective_rank(const torch::Tensor& matrix) {
  if (matrix.dim() != 2) throw ArgumentError("effective_rank expects a matrix");
  auto m = matrix.detach().to(torch::kFloat64);
  m = m - m.mean(0, true);
  const auto s = torch::linalg_svdvals(m);
  const double total = s.sum().item<double>();
  if (total <= 0.0) return 0.0;
  const auto p = s / total;
  const double entropy = -torch::special::xlogy(p, p).sum().item<double>();
  return std::exp(entropy);
}

double latent_effective_rank(SetModel& model, const std::vector<data::PatchBag>& bags) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> features;
  for (const auto& bag : bags) features.push_back(model->encode(bag.patches.to(torch::kFloat32)));
  return effective_rank(torch::cat(features));
}

TrainedSetModel train_setrep(const std::vector<data::PatchBag>& bags, const SetTrainConfig& config) {
  if (bags.size() < 2) throw ArgumentError("train_setrep needs at least two bags");
  const auto& first = bags.front();
  if (first.outcome.empty()) throw ArgumentError("bags need outcomes");
  if (config.epochs < 1 || config.bags_per_step < 1) throw ArgumentError("epochs and bags_per_step must be positive");
  if (config.weights.lambda1 < 0.0 || config.weights.lambda2 < 0.0) throw ArgumentError("lambdas must be >= 0");

  auto model_config = config.model;
  if (model_config.patch_shape.empty())
    model_config.patch_shape.assign(first.patches.sizes().begin() + 1, first.patches.sizes().end());
  model_config.outcome_dim = static_cast<std::int64_t>(first.outcome.size());
  bool varied = false;
  for (const auto& bag : bags) {
    if (bag.outcome.size() != first.outcome.size()) throw ArgumentError("inconsistent outcome length across bags");
    if (bag.size() < 1) throw ArgumentError("empty bag " + bag.subject_id);
    varied = varied || bag.outcome != first.outcome;
  }
  if (!varied) throw ArgumentError("all bags share one outcome; both outcomes must be represented");

  SetModel model(nullptr);
  {
    std::lock_guard lock(torch_seed_mutex());
    torch::manual_seed(config.seed);
    model = SetModel(model_config);
  }
  torch::optim::Adam optimizer(
      model->parameters(),
      torch::optim::AdamOptions(config.learning_rate).betas({config.beta1, config.beta2}));

  std::mt19937_64 rng(config.seed ^ 0x5bd1e995ULL);
  std::vector<std::size_t> order(bags.size());
  std::iota(order.begin(), order.end(), 0);
  TrainedSetModel out{model, {}};
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.bags_per_step)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(config.bags_per_step));
      optimizer.zero_grad();
      torch::Tensor step_loss = torch::zeros({});
      for (std::size_t k = start; k < stop; ++k) {
        const auto& bag = bags[order[k]];
        step_loss = step_loss + subject2vec_loss(model, bag, bag.outcome, config.weights).total;
      }
      step_loss = step_loss / static_cast<double>(stop - start);
      const double value = step_loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingError("subject2vec loss diverged",
                            "epoch=" + std::to_string(epoch) + " loss=" + std::to_string(value));
      step_loss.backward();
      optimizer.step();
      epoch_total += value * static_cast<double>(stop - start);
    }
    out.report.epoch_losses.push_back(epoch_total / static_cast<double>(bags.size()));
    log::info("setrep epoch " + std::to_string(epoch) + " loss " + std::to_string(out.report.epoch_losses.back()));
  }
  out.report.effective_rank = latent_effective_rank(model, bags);
  return out;
}

// ============================================================== persistence

void save_set_model(SetModel& model, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  json doc = {{"format", kCheckpointFormat}, {"config", model->config().to_json()}};
  io::write_text(directory / "descriptor.json", doc.dump(2));
  torch::save(model, (directory / "parameters.pt").string());
}

SetModel load_set_model(const std::filesystem::path& directory) {
  const auto doc = json::parse(io::read_text(directory / "descriptor.json"));
  if (doc.value("format", "") != kCheckpointFormat)
    throw ArgumentError("not a set-model checkpoint: " + directory.string());
  SetModel model(SetModelConfig::from_json(doc.at("config")));
  torch::load(model, (directory / "parameters.pt").string());
  return model;
}

}  // namespace cfaudit::setrep
