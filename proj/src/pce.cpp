#include "cfaudit/pce.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>

#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"
#include "cfaudit/metrics.hpp"

namespace cfaudit::pce {

using nlohmann::json;

std::string to_string(Variant variant) { return variant == Variant::v2_style ? "v2-style" : "v1-ordinal"; }

Variant variant_from_string(const std::string& name) {
  if (name == "v1-ordinal" || name == "v1") return Variant::v1_ordinal;
  if (name == "v2-style" || name == "v2") return Variant::v2_style;
  throw ArgumentError("unknown explainer variant: " + name);
}

// ============================================================== config

std::int64_t ExplainerConfig::input_size() const {
  return std::accumulate(input_shape.begin(), input_shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::int64_t ExplainerConfig::latent_layers() const { return variant == Variant::v2_style ? blocks + 1 : 1; }

void ExplainerConfig::validate() const {
  if (input_shape.empty()) throw ArgumentError("explainer input shape required");
  for (auto d : input_shape)
    if (d < 1) throw ArgumentError("explainer input shape must be positive");
  if (bins < 2) throw ArgumentError("explainer needs at least 2 condition bins");
  if (target_class < 0) throw ArgumentError("target class must be non-negative");
  if (latent_dim < 1 || hidden < 1 || condition_embedding < 1) throw ArgumentError("explainer widths must be positive");
  if (blocks < 0 || blocks > 6) throw ArgumentError("explainer blocks must lie in [0, 6]");
  if (output_low.size() != output_high.size()) throw ArgumentError("output_low and output_high differ in length");
  if (!output_low.empty()) {
    if (static_cast<std::int64_t>(output_low.size()) != input_size())
      throw ArgumentError("output range must give one bound per input feature");
    for (std::size_t i = 0; i < output_low.size(); ++i)
      if (!(output_low[i] < output_high[i])) throw ArgumentError("output_low must be below output_high");
  }
}

json ExplainerConfig::to_json() const {
  return {{"variant", pce::to_string(variant)},
          {"input_shape", input_shape},
          {"target_class", target_class},
          {"bins", bins},
          {"latent_dim", latent_dim},
          {"hidden", hidden},
          {"blocks", blocks},
          {"condition_embedding", condition_embedding},
          {"output_low", output_low},
          {"output_high", output_high}};
}

ExplainerConfig ExplainerConfig::from_json(const json& j) {
  ExplainerConfig c;
  c.variant = variant_from_string(j.value("variant", std::string("v1-ordinal")));
  c.input_shape = j.at("input_shape").get<std::vector<std::int64_t>>();
  c.target_class = j.value("target_class", c.target_class);
  c.bins = j.value("bins", c.bins);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.blocks = j.value("blocks", c.blocks);
  c.condition_embedding = j.value("condition_embedding", c.condition_embedding);
  c.output_low = j.value("output_low", c.output_low);
  c.output_high = j.value("output_high", c.output_high);
  c.validate();
  return c;
}

// ============================================================== building blocks

namespace {

torch::Tensor unit(const torch::Tensor& v) { return v / v.norm().clamp_min(1e-12); }

torch::Tensor condition_bins(const torch::Tensor& c, std::int64_t bins) {
  return (c.detach() * static_cast<double>(bins)).floor().clamp(0, bins - 1).to(torch::kLong);
}

torch::Tensor bin_centers(const torch::Tensor& bins, std::int64_t count) {
  return (bins.to(torch::kFloat64) + 0.5) / static_cast<double>(count);
}

}  // namespace

SpectralLinearImpl::SpectralLinearImpl(std::int64_t in, std::int64_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = register_parameter("weight", torch::empty({out, in}).uniform_(-bound, bound));
  bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
  u = register_buffer("u", unit(torch::randn({out})));
}

torch::Tensor SpectralLinearImpl::normalized_weight() {
  if (is_training()) {
    torch::NoGradGuard no_grad;
    const auto v = unit(weight.t().mv(u));
    u.copy_(unit(weight.mv(v)));
  }
  const auto u_now = u.detach().clone();
  const auto v = unit(weight.detach().t().mv(u_now));
  const auto sigma = torch::dot(u_now, weight.mv(v));
  return weight / sigma;
}

torch::Tensor SpectralLinearImpl::forward(const torch::Tensor& x) {
  return torch::addmm(bias, x, normalized_weight().t());
}

ConditionalBatchNormImpl::ConditionalBatchNormImpl(std::int64_t features, std::int64_t bins) {
  norm_ = register_module("norm", torch::nn::BatchNorm1d(torch::nn::BatchNorm1dOptions(features).affine(false)));
  gamma_ = register_module("gamma", torch::nn::Embedding(bins, features));
  beta_ = register_module("beta", torch::nn::Embedding(bins, features));
  torch::NoGradGuard no_grad;
  gamma_->weight.fill_(1.0);
  beta_->weight.zero_();
}

torch::Tensor ConditionalBatchNormImpl::forward(const torch::Tensor& h, const torch::Tensor& bins) {
  return norm_(h) * gamma_(bins) + beta_(bins);
}

namespace {

class ResBlockImpl : public torch::nn::Module {
 public:
  explicit ResBlockImpl(std::int64_t width) {
    fc1 = register_module("fc1", torch::nn::Linear(width, width));
    fc2 = register_module("fc2", torch::nn::Linear(width, width));
  }
  torch::Tensor forward(const torch::Tensor& h) { return h + fc2(torch::relu(fc1(torch::relu(h)))); }
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(ResBlock);

class CondResBlockImpl : public torch::nn::Module {
 public:
  CondResBlockImpl(std::int64_t width, std::int64_t bins) {
    cbn1 = register_module("cbn1", ConditionalBatchNorm(width, bins));
    fc1 = register_module("fc1", torch::nn::Linear(width, width));
    cbn2 = register_module("cbn2", ConditionalBatchNorm(width, bins));
    fc2 = register_module("fc2", torch::nn::Linear(width, width));
  }
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& bins) {
    auto y = fc1(torch::relu(cbn1(h, bins)));
    return h + fc2(torch::relu(cbn2(y, bins)));
  }
  ConditionalBatchNorm cbn1{nullptr}, cbn2{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(CondResBlock);

// Residual block modulated by a per-layer style s_l = A_l([w_l, phi(c)]).
class StyleBlockImpl : public torch::nn::Module {
 public:
  StyleBlockImpl(std::int64_t width, std::int64_t style_in) {
    affine = register_module("affine", torch::nn::Linear(style_in, 2 * width));
    fc1 = register_module("fc1", torch::nn::Linear(width, width));
    fc2 = register_module("fc2", torch::nn::Linear(width, width));
  }
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& style_input) {
    const auto s = affine(style_input).chunk(2, 1);
    auto y = fc1(torch::relu(h)) * (1.0 + s[0]) + s[1];
    return h + fc2(torch::relu(y));
  }
  torch::nn::Linear affine{nullptr}, fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(StyleBlock);

class SpectralResBlockImpl : public torch::nn::Module {
 public:
  explicit SpectralResBlockImpl(std::int64_t width) {
    sn1 = register_module("sn1", SpectralLinear(width, width));
    sn2 = register_module("sn2", SpectralLinear(width, width));
  }
  torch::Tensor forward(const torch::Tensor& h) {
    return h + sn2(torch::leaky_relu(sn1(torch::leaky_relu(h, 0.2)), 0.2));
  }
  SpectralLinear sn1{nullptr}, sn2{nullptr};
};
TORCH_MODULE(SpectralResBlock);

}  // namespace

torch::Tensor ordinal_projection(const torch::Tensor& phi, const torch::Tensor& V, const torch::Tensor& bins) {
  if (phi.dim() != 2 || V.dim() != 2 || V.size(1) != phi.size(1))
    throw ArgumentError("ordinal_projection expects phi [B, F] and V [N, F]");
  if (bins.dim() != 1 || bins.size(0) != phi.size(0)) throw ArgumentError("one bin index per row required");
  const auto n = bins.to(torch::kLong);
  if (n.numel() > 0 && (n.min().item<std::int64_t>() < 0 || n.max().item<std::int64_t>() >= V.size(0)))
    throw ArgumentError("condition bin out of range [0, " + std::to_string(V.size(0)) + ")");
  const auto projections = phi.matmul(V.t());
  const auto prefix = torch::cat({torch::zeros({phi.size(0), 1}, phi.options()), projections.cumsum(1)}, 1);
  return prefix.gather(1, n.unsqueeze(1)).squeeze(1);
}

ExplainerNetImpl::ExplainerNetImpl(ExplainerConfig config, std::int64_t auxiliary_dim)
    : config_(std::move(config)), auxiliary_dim_(auxiliary_dim) {
  config_.validate();
  const auto in = config_.input_size();
  const auto H = config_.hidden;
  const auto z = config_.latent_dim;
  const bool v2 = config_.variant == Variant::v2_style;

  enc_in_ = register_module("enc_in", torch::nn::Linear(in, H));
  enc_blocks_ = register_module("enc_blocks", torch::nn::ModuleList());
  for (std::int64_t b = 0; b < config_.blocks; ++b) enc_blocks_->push_back(ResBlock(H));
  enc_out_ = register_module("enc_out", torch::nn::Linear(H, config_.latent_layers() * z));

  gen_blocks_ = register_module("gen_blocks", torch::nn::ModuleList());
  if (v2) {
    const auto E = config_.condition_embedding;
    condition_embed_ = register_module(
        "condition_embed", torch::nn::Sequential(torch::nn::Linear(1, E),
                                                 torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
                                                 torch::nn::Linear(E, E)));
    gen_in_ = register_module("gen_in", torch::nn::Linear(z + E, H));
    for (std::int64_t b = 0; b < config_.blocks; ++b) gen_blocks_->push_back(StyleBlock(H, z + E));
  } else {
    gen_in_ = register_module("gen_in", torch::nn::Linear(z, H));
    for (std::int64_t b = 0; b < config_.blocks; ++b) gen_blocks_->push_back(CondResBlock(H, config_.bins));
  }
  gen_out_ = register_module("gen_out", torch::nn::Linear(H, in));

  if (config_.output_low.empty()) {
    out_low_ = register_buffer("out_low", torch::zeros({in}));
    out_high_ = register_buffer("out_high", torch::ones({in}));
  } else {
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    out_low_ = register_buffer("out_low", torch::tensor(config_.output_low, opts).to(torch::kFloat32));
    out_high_ = register_buffer("out_high", torch::tensor(config_.output_high, opts).to(torch::kFloat32));
  }

  disc_in_ = register_module("disc_in", SpectralLinear(in, H));
  disc_blocks_ = register_module("disc_blocks", torch::nn::ModuleList());
  for (std::int64_t b = 0; b < config_.blocks; ++b) disc_blocks_->push_back(SpectralResBlock(H));
  const auto F = H + auxiliary_dim_;
  psi_ = register_module("psi", SpectralLinear(F, 1));
  V_ = register_parameter("V", torch::randn({config_.bins, F}) / std::sqrt(static_cast<double>(F)));
}

torch::Tensor ExplainerNetImpl::encode(const torch::Tensor& x) {
  auto h = enc_in_(x.flatten(1));
  for (auto& block : *enc_blocks_) h = block->as<ResBlockImpl>()->forward(h);
  auto w = enc_out_(torch::relu(h));
  if (config_.variant == Variant::v2_style) w = w.view({w.size(0), config_.latent_layers(), config_.latent_dim});
  return w;
}

torch::Tensor ExplainerNetImpl::squash(const torch::Tensor& raw) const {
  auto out = out_low_ + (out_high_ - out_low_) * torch::sigmoid(raw);
  std::vector<std::int64_t> shape{raw.size(0)};
  shape.insert(shape.end(), config_.input_shape.begin(), config_.input_shape.end());
  return out.view(shape);
}

torch::Tensor ExplainerNetImpl::generate(const torch::Tensor& latent, const torch::Tensor& c) {
  if (c.dim() != 1 || c.size(0) != latent.size(0)) throw ArgumentError("one condition per latent row required");
  torch::Tensor h;
  if (config_.variant == Variant::v2_style) {
    const auto e = condition_embed_->forward(c.to(latent.scalar_type()).unsqueeze(1));
    h = gen_in_(torch::cat({latent.select(1, 0), e}, 1));
    std::int64_t layer = 1;
    for (auto& block : *gen_blocks_)
      h = block->as<StyleBlockImpl>()->forward(h, torch::cat({latent.select(1, layer++), e}, 1));
  } else {
    const auto bins = condition_bins(c, config_.bins);
    h = gen_in_(latent);
    for (auto& block : *gen_blocks_) h = block->as<CondResBlockImpl>()->forward(h, bins);
  }
  return squash(gen_out_(torch::relu(h)));
}

torch::Tensor ExplainerNetImpl::features(const torch::Tensor& x, const torch::Tensor& auxiliary) {
  auto h = disc_in_(x.flatten(1));
  for (auto& block : *disc_blocks_) h = block->as<SpectralResBlockImpl>()->forward(h);
  h = torch::leaky_relu(h, 0.2);
  if (auxiliary_dim_ > 0) {
    if (!auxiliary.defined() || auxiliary.size(0) != h.size(0))
      throw ArgumentError("discriminator expects auxiliary classifier features");
    h = torch::cat({h, auxiliary.flatten(1).to(h.scalar_type())}, 1);
  }
  return h;
}

torch::Tensor ExplainerNetImpl::logit(const torch::Tensor& phi, const torch::Tensor& bins) {
  return psi_(phi).squeeze(1) + ordinal_projection(phi, V_, bins);
}

std::vector<torch::Tensor> ExplainerNetImpl::generator_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters())
    if (item.key().rfind("enc_", 0) == 0 || item.key().rfind("gen_", 0) == 0 ||
        item.key().rfind("condition_embed", 0) == 0)
      out.push_back(item.value());
  return out;
}

std::vector<torch::Tensor> ExplainerNetImpl::discriminator_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters())
    if (item.key().rfind("disc_", 0) == 0 || item.key().rfind("psi", 0) == 0 || item.key() == "V")
      out.push_back(item.value());
  return out;
}

// ============================================================== losses

torch::Tensor kl_consistency(const torch::Tensor& realized, const torch::Tensor& requested, double eps) {
  if (realized.sizes() != requested.sizes()) throw ArgumentError("kl_consistency inputs differ in shape");
  if (realized.dim() < 1 || realized.dim() > 2) throw ArgumentError("kl_consistency expects [B] or [B, K]");
  const auto p = realized.clamp(eps, 1.0 - eps);
  const auto q = requested.to(realized.scalar_type()).clamp(eps, 1.0 - eps);
  if (realized.dim() == 1) return (p * (p.log() - q.log()) + (1 - p) * ((1 - p).log() - (1 - q).log())).mean();
  return (p * (p.log() - q.log())).sum(1).mean();
}

torch::Tensor carl(const torch::Tensor& x, const torch::Tensor& x_prime, const CarlContext& context) {
  if (x.sizes() != x_prime.sizes()) throw ArgumentError("carl inputs differ in shape");
  if (x.dim() < 2) throw ArgumentError("carl expects batched inputs");
  auto d = (x - x_prime).abs();
  if (d.dim() == 4) d = d.mean(1);

  torch::Tensor loss;
  if (!context.segmentation) {
    loss = d.mean();
  } else {
    auto labels = *context.segmentation;
    const auto spatial = d.sizes().slice(1);
    if (labels.sizes() == spatial) {
      labels = labels.unsqueeze(0).expand(d.sizes());
    } else if (!(labels.dim() == d.dim() && labels.sizes() == d.sizes())) {
      throw ArgumentError("segmentation label map does not match the spatial shape of the inputs");
    }
    const auto regions = std::get<0>(at::_unique(labels.flatten(), /*sorted=*/true));
    auto total = torch::zeros({d.size(0)}, d.options());
    for (std::int64_t r = 0; r < regions.numel(); ++r) {
      const auto mask = labels.eq(regions[r]).to(d.scalar_type());
      const auto area = mask.flatten(1).sum(1);
      const auto mass = (mask * d).flatten(1).sum(1);
      total = total + torch::where(area > 0, mass / area.clamp_min(1.0), torch::zeros_like(area));
    }
    loss = total.mean();
  }
  if (context.object_probe) loss = loss + kl_consistency(context.object_probe(x), context.object_probe(x_prime));
  return loss;
}

torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean();
}

torch::Tensor hinge_generator_loss(const torch::Tensor& fake_logits) { return -fake_logits.mean(); }

torch::Tensor logistic_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return torch::softplus(-real_logits).mean() + torch::softplus(fake_logits).mean();
}

torch::Tensor logistic_generator_loss(const torch::Tensor& fake_logits) { return torch::softplus(-fake_logits).mean(); }

bool check_bin_balance(const torch::Tensor& bins, std::int64_t bin_count) {
  const auto counts = torch::bincount(bins.to(torch::kLong).flatten(), {}, bin_count);
  const auto spread = counts.max().item<std::int64_t>() - counts.min().item<std::int64_t>();
  if (spread <= 1) return true;
  std::ostringstream msg;
  msg << "unbalanced condition bins in batch (counts";
  for (std::int64_t i = 0; i < counts.numel(); ++i) msg << ' ' << counts[i].item<std::int64_t>();
  msg << ')';
  log::warn(msg.str());
  return false;
}

ReconstructionTerms reconstruction_loss(const GeneratorFns& fns, const torch::Tensor& x, const torch::Tensor& fx,
                                        const torch::Tensor& c, Variant variant, const CarlContext& context) {
  ReconstructionTerms terms;
  const auto ex = fns.encode(x);
  const auto x_self = fns.generate(ex, fx);
  const auto x_hat = fns.generate(ex, c);
  const auto x_cyclic = fns.generate(fns.encode(x_hat), fx);
  terms.self = carl(x, x_self, context);
  terms.cyclic = carl(x, x_cyclic, context);
  if (variant == Variant::v2_style) {
    terms.latent = (ex - fns.encode(x_self)).abs().mean() + (ex - fns.encode(x_cyclic)).abs().mean();
  } else {
    terms.latent = torch::zeros({}, terms.self.options());
  }
  terms.total = terms.self + terms.cyclic + terms.latent;
  return terms;
}

namespace {

// Per-sample |J_w^T y| for unit-norm y, kept differentiable.
torch::Tensor projected_norms(const std::function<torch::Tensor(const torch::Tensor&)>& g, const torch::Tensor& w,
                              const torch::Tensor* directions, std::optional<at::Generator> generator) {
  torch::AutoGradMode enable_grad(true);
  auto wl = w.detach().requires_grad_(true);
  const auto y = g(wl);
  auto dir = directions ? *directions : torch::randn(y.sizes(), generator, y.options().requires_grad(false));
  if (dir.sizes() != y.sizes()) throw ArgumentError("path-length directions must match the generator output");
  std::vector<std::int64_t> view(static_cast<std::size_t>(y.dim()), 1);
  view[0] = y.size(0);
  dir = dir.to(y.scalar_type());
  dir = dir / dir.flatten(1).norm(2, 1).clamp_min(1e-12).view(view);
  const auto inner = (y * dir).sum();
  torch::Tensor grad;
  if (inner.requires_grad()) {
    grad = torch::autograd::grad({inner}, {wl}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                 /*allow_unused=*/true)[0];
  }
  if (!grad.defined()) grad = torch::zeros_like(wl);
  return grad.flatten(1).norm(2, 1);
}

}  // namespace

PathLengthResult path_length_penalty(const std::function<torch::Tensor(const torch::Tensor&)>& g,
                                     const torch::Tensor& w, double a, const torch::Tensor& directions) {
  const auto norms = projected_norms(g, w, &directions, std::nullopt);
  return {(norms - a).pow(2).mean(), norms.detach()};
}

torch::Tensor PathLengthRegularizer::operator()(const std::function<torch::Tensor(const torch::Tensor&)>& g,
                                                const torch::Tensor& w, std::optional<at::Generator> generator) {
  const auto norms = projected_norms(g, w, nullptr, std::move(generator));
  a_ = decay_ * a_ + (1.0 - decay_) * norms.detach().mean().item<double>();
  return (norms - a_).pow(2).mean();
}

// ============================================================== model

json TrainLog::to_json() const {
  return {{"discriminator", discriminator}, {"adversarial", adversarial}, {"consistency", consistency},
          {"reconstruction", reconstruction}, {"path_length", path_length}, {"cv", cv}, {"warnings", warnings}};
}

TrainLog TrainLog::from_json(const json& j) {
  TrainLog log;
  log.discriminator = j.value("discriminator", log.discriminator);
  log.adversarial = j.value("adversarial", log.adversarial);
  log.consistency = j.value("consistency", log.consistency);
  log.reconstruction = j.value("reconstruction", log.reconstruction);
  log.path_length = j.value("path_length", log.path_length);
  log.cv = j.value("cv", log.cv);
  log.warnings = j.value("warnings", log.warnings);
  return log;
}

namespace {

std::int64_t auxiliary_width(const ExplainerConfig& config, const classifier::Classifier& classifier) {
  if (config.variant != Variant::v2_style) return 0;
  torch::NoGradGuard no_grad;
  std::vector<std::int64_t> shape{1};
  shape.insert(shape.end(), config.input_shape.begin(), config.input_shape.end());
  return classifier.penultimate(torch::zeros(shape, torch::TensorOptions().dtype(classifier.dtype()))).size(1);
}

}  // namespace

ExplainerModel::ExplainerModel(ExplainerConfig config, classifier::Classifier classifier, std::uint64_t seed)
    : classifier_(std::move(classifier)), net_(nullptr) {
  config.validate();
  if (config.input_shape != classifier_.descriptor().input_shape)
    throw ArgumentError("explainer and classifier input shapes differ");
  if (config.target_class >= classifier_.class_count()) throw ArgumentError("target class outside the classifier");
  const auto aux = auxiliary_width(config, classifier_);
  std::lock_guard lock(torch_seed_mutex());
  torch::manual_seed(seed);
  net_ = ExplainerNet(std::move(config), aux);
}

void ExplainerModel::mark_trained(TrainLog log) {
  net_->eval();
  trained_ = true;
  log_ = std::move(log);
}

torch::Tensor ExplainerModel::batch(const torch::Tensor& x) const {
  const auto& shape = config().input_shape;
  auto b = x.dim() == static_cast<std::int64_t>(shape.size()) ? x.unsqueeze(0) : x;
  bool ok = b.dim() == static_cast<std::int64_t>(shape.size()) + 1;
  for (std::size_t i = 0; ok && i < shape.size(); ++i) ok = b.size(static_cast<std::int64_t>(i) + 1) == shape[i];
  if (!ok) throw ArgumentError("input does not match the explainer input shape");
  return b.to(torch::kFloat32);
}

void ExplainerModel::require_trained() const {
  if (!trained_) throw StateError("explainer has not been trained");
}

torch::Tensor ExplainerModel::target_probability(const torch::Tensor& x) const {
  return classifier_.predict(x).select(1, config().target_class);
}

torch::Tensor ExplainerModel::auxiliary(const torch::Tensor& x) const {
  if (config().variant != Variant::v2_style) return {};
  return classifier_.penultimate(x);
}

torch::Tensor ExplainerModel::discriminator_logit(const torch::Tensor& x, const torch::Tensor& bins) const {
  return net_->logit(net_->features(x, auxiliary(x)), bins);
}

torch::Tensor ExplainerModel::explain(const torch::Tensor& x, const torch::Tensor& c) const {
  require_trained();
  const bool single = x.dim() == static_cast<std::int64_t>(config().input_shape.size());
  const auto xb = batch(x);
  auto cb = c.to(torch::kFloat32).flatten();
  if (cb.numel() == 1) cb = cb.expand({xb.size(0)}).contiguous();
  if (cb.size(0) != xb.size(0)) throw ArgumentError("one condition per input required");
  if (cb.min().item<double>() < 0.0 || cb.max().item<double>() > 1.0)
    throw ArgumentError("condition must lie in [0, 1]");
  torch::NoGradGuard no_grad;
  auto out = net_->generate(net_->encode(xb), cb);
  return single ? out.squeeze(0) : out;
}

torch::Tensor ExplainerModel::explain(const torch::Tensor& x, double c) const {
  return explain(x, torch::tensor(c, torch::kFloat32));
}

torch::Tensor ExplainerModel::sweep(const torch::Tensor& sample) const {
  const auto N = config().bins;
  const auto centers = (torch::arange(N, torch::kFloat32) + 0.5) / static_cast<double>(N);
  const auto xb = batch(sample);
  if (xb.size(0) != 1) throw ArgumentError("sweep expects a single sample");
  std::vector<std::int64_t> repeat(static_cast<std::size_t>(xb.dim()), 1);
  repeat[0] = N;
  return explain(xb.repeat(repeat), centers);
}

torch::Tensor ExplainerModel::discriminator_score(const torch::Tensor& x) const {
  require_trained();
  torch::NoGradGuard no_grad;
  const auto xb = batch(x);
  const auto bins = condition_bins(target_probability(xb), config().bins);
  return torch::sigmoid(discriminator_logit(xb, bins));
}

double ExplainerModel::ordinal_condition_logit(const torch::Tensor& sample, std::int64_t n) const {
  if (n < 0 || n >= config().bins)
    throw ArgumentError("bin index " + std::to_string(n) + " outside [0, " + std::to_string(config().bins) + ")");
  torch::NoGradGuard no_grad;
  const auto xb = batch(sample);
  if (xb.size(0) != 1) throw ArgumentError("ordinal_condition_logit expects a single sample");
  const auto phi = net_->features(xb, auxiliary(xb));
  return ordinal_projection(phi, net_->V(), torch::full({1}, n, torch::kLong)).item<double>();
}

void ExplainerModel::save(const std::filesystem::path& directory) const {
  std::filesystem::create_directories(directory);
  json doc = {{"format", kCheckpointFormat},
              {"variant", to_string(config().variant)},
              {"config", config().to_json()},
              {"trained", trained_},
              {"log", log_.to_json()}};
  io::write_text(directory / "descriptor.json", doc.dump(2));
  const auto V = net_->V().detach().to(torch::kFloat64).contiguous();
  json rows = json::array();
  for (std::int64_t i = 0; i < V.size(0); ++i) rows.push_back(metrics::to_vector(V[i]));
  io::write_text(directory / "v_matrix.json", json{{"rows", rows}}.dump());
  torch::save(net_, (directory / "parameters.pt").string());
}

ExplainerModel ExplainerModel::load(const std::filesystem::path& directory, classifier::Classifier classifier) {
  const auto doc = json::parse(io::read_text(directory / "descriptor.json"));
  if (doc.value("format", "") != kCheckpointFormat)
    throw ArgumentError("not an explainer checkpoint: " + directory.string());
  ExplainerModel model(ExplainerConfig::from_json(doc.at("config")), std::move(classifier), 0);
  torch::load(model.net_, (directory / "parameters.pt").string());
  if (doc.value("trained", false)) {
    model.mark_trained(TrainLog::from_json(doc.value("log", json::object())));
  } else {
    model.net_->eval();
  }
  return model;
}

// ============================================================== training

ExplainerTrainConfig ExplainerTrainConfig::defaults(Variant variant) {
  ExplainerTrainConfig c;
  c.model.variant = variant;
  if (variant == Variant::v2_style) {
    c.lambda_adv = 10.0;
    c.lambda_f = 10.0;
    c.lambda_rec = 100.0;
    c.d_steps = 1;
    c.learning_rate = 2e-3;
    c.beta2 = 0.99;
    c.path_length = true;
  }
  return c;
}

void ExplainerTrainConfig::validate() const {
  model.validate();
  if (lambda_adv < 0 || lambda_f < 0 || lambda_rec < 0) throw ArgumentError("loss weights must be non-negative");
  if (epochs < 1 || batch_size < 1 || d_steps < 1) throw ArgumentError("epochs, batch size and d_steps must be >= 1");
  if (!(learning_rate > 0)) throw ArgumentError("learning rate must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ArgumentError("Adam betas must lie in [0, 1)");
  if (path_length_decay < 0 || path_length_decay >= 1) throw ArgumentError("path-length decay must lie in [0, 1)");
  if (probe_size < 1) throw ArgumentError("probe size must be >= 1");
  if (background_weight < 0 || background_margin < 0) throw ArgumentError("background weight and margin must be >= 0");
}

json ExplainerTrainConfig::to_json() const {
  return {{"model", model.to_json()},       {"lambda_adv", lambda_adv},
          {"lambda_f", lambda_f},           {"lambda_rec", lambda_rec},
          {"epochs", epochs},               {"batch_size", batch_size},
          {"d_steps", d_steps},             {"learning_rate", learning_rate},
          {"beta1", beta1},                 {"beta2", beta2},
          {"path_length", path_length},     {"path_length_decay", path_length_decay},
          {"probe_size", probe_size},       {"background_weight", background_weight},
          {"background_margin", background_margin}, {"seed", seed}};
}

ExplainerTrainConfig ExplainerTrainConfig::from_json(const json& j) {
  const auto model = ExplainerConfig::from_json(j.at("model"));
  auto c = defaults(model.variant);
  c.model = model;
  c.lambda_adv = j.value("lambda_adv", c.lambda_adv);
  c.lambda_f = j.value("lambda_f", c.lambda_f);
  c.lambda_rec = j.value("lambda_rec", c.lambda_rec);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.d_steps = j.value("d_steps", c.d_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.path_length = j.value("path_length", c.path_length);
  c.path_length_decay = j.value("path_length_decay", c.path_length_decay);
  c.probe_size = j.value("probe_size", c.probe_size);
  c.background_weight = j.value("background_weight", c.background_weight);
  c.background_margin = j.value("background_margin", c.background_margin);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

FrozenParameters::FrozenParameters(const torch::nn::Module& module) {
  for (auto p : module.parameters()) {
    saved_.emplace_back(p, p.requires_grad());
    p.requires_grad_(false);
  }
}

FrozenParameters::~FrozenParameters() {
  for (auto& [p, flag] : saved_) p.requires_grad_(flag);
}

namespace {

struct BinSampler {
  std::vector<std::vector<std::int64_t>> members;  // non-empty bins only

  BinSampler(const std::vector<std::int64_t>& bins, std::int64_t count) {
    std::vector<std::vector<std::int64_t>> by_bin(static_cast<std::size_t>(count));
    for (std::size_t i = 0; i < bins.size(); ++i) by_bin[static_cast<std::size_t>(bins[i])].push_back(
        static_cast<std::int64_t>(i));
    for (auto& m : by_bin)
      if (!m.empty()) members.push_back(std::move(m));
  }

  std::vector<std::int64_t> draw(std::int64_t n, std::mt19937_64& rng) const {
    std::vector<std::int64_t> out;
    std::uniform_int_distribution<std::size_t> start(0, members.size() - 1);
    const auto offset = start(rng);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& m = members[(offset + static_cast<std::size_t>(i)) % members.size()];
      std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
      out.push_back(m[pick(rng)]);
    }
    return out;
  }
};

torch::Tensor requested_conditions(std::int64_t n, std::int64_t bins, Variant variant, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int64_t> start(0, bins - 1);
  std::uniform_real_distribution<double> within(0.0, 1.0);
  const auto offset = start(rng);
  std::vector<float> c;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto b = (offset + i) % bins;
    const double u = variant == Variant::v2_style ? std::min(within(rng), 1.0 - 1e-6) : 0.5;
    c.push_back(static_cast<float>((static_cast<double>(b) + u) / static_cast<double>(bins)));
  }
  return torch::tensor(c);
}

void ensure_finite(const torch::Tensor& loss, const std::string& name, std::int64_t epoch) {
  if (!std::isfinite(loss.item<double>()))
    throw TrainingError("explainer training diverged", name + " loss is not finite at epoch " + std::to_string(epoch));
}

}  // namespace

ExplainerModel train_pce(const classifier::Classifier& classifier, const data::Dataset& data,
                         const ExplainerTrainConfig& config, const ExplainerEpochCallback& on_epoch) {
  config.validate();
  auto model_config = config.model;
  if (model_config.input_shape != data.sample_shape())
    throw ArgumentError("explainer input shape does not match the dataset");
  if (model_config.output_low.empty() && data.modality() == data::Modality::vector) {
    const auto flat = data.images().flatten(1).to(torch::kFloat64);
    const auto lo = std::get<0>(flat.min(0));
    const auto hi = std::get<0>(flat.max(0));
    const auto margin = (hi - lo).clamp_min(1e-3) * 0.1;
    model_config.output_low = metrics::to_vector(lo - margin);
    model_config.output_high = metrics::to_vector(hi + margin);
  }

  ExplainerModel model(model_config, classifier, config.seed);
  auto& net = model.net();
  FrozenParameters freeze(*classifier.net());
  const auto variant = model_config.variant;
  const auto N = model_config.bins;

  const auto X = data.images().to(torch::kFloat32);
  torch::Tensor fx;
  {
    torch::NoGradGuard no_grad;
    fx = model.target_probability(X).to(torch::kFloat32);
  }
  std::vector<std::int64_t> real_bins;
  for (std::int64_t i = 0; i < fx.size(0); ++i) real_bins.push_back(data::bin_index(fx[i].item<double>(), N));
  const BinSampler sampler(real_bins, N);
  const auto real_bins_t = torch::tensor(real_bins, torch::kLong);

  std::mt19937_64 rng(config.seed ^ 0x5ce5ce5ce5ce5ce5ULL);
  auto generator = at::make_generator<at::CPUGeneratorImpl>(config.seed + 17);

  std::vector<std::int64_t> probe(static_cast<std::size_t>(X.size(0)));
  std::iota(probe.begin(), probe.end(), 0);
  std::shuffle(probe.begin(), probe.end(), rng);
  probe.resize(static_cast<std::size_t>(std::min<std::int64_t>(config.probe_size, X.size(0))));
  const auto probe_t = torch::tensor(probe, torch::kLong);

  auto adam = [&](std::vector<torch::Tensor> params) {
    return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(config.learning_rate)
                                                     .betas({config.beta1, config.beta2}));
  };
  auto opt_g = adam(net->generator_parameters());
  auto opt_d = adam(net->discriminator_parameters());

  const GeneratorFns fns{[&](const torch::Tensor& x) { return net->encode(x); },
                         [&](const torch::Tensor& z, const torch::Tensor& c) { return net->generate(z, c); }};
  PathLengthRegularizer path_length(config.path_length_decay);

  torch::Tensor bg_low, bg_span;
  if (config.background_weight > 0) {
    const auto lo = std::get<0>(X.min(0));
    const auto hi = std::get<0>(X.max(0));
    bg_low = lo - config.background_margin * (hi - lo);
    auto bg_high = hi + config.background_margin * (hi - lo);
    if (data.modality() == data::Modality::image) {
      bg_low = bg_low.clamp_min(0.0);
      bg_high = bg_high.clamp_max(1.0);
    }
    bg_span = bg_high - bg_low;
  }

  const auto B = config.batch_size;
  const auto steps = std::max<std::int64_t>(1, (X.size(0) + B - 1) / B);
  TrainLog log;
  net->train();

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    double sum_d = 0, sum_adv = 0, sum_kl = 0, sum_rec = 0, sum_pl = 0;
    for (std::int64_t step = 0; step < steps; ++step) {
      for (std::int64_t k = 0; k < config.d_steps; ++k) {
        const auto real_idx = torch::tensor(sampler.draw(B, rng), torch::kLong);
        const auto src_idx = torch::tensor(sampler.draw(B, rng), torch::kLong);
        const auto c = requested_conditions(B, N, variant, rng);
        const auto c_bins = condition_bins(c, N);
        torch::Tensor x_fake;
        {
          torch::NoGradGuard no_grad;
          x_fake = net->generate(net->encode(X.index_select(0, src_idx)), c);
        }
        const auto real_logits = model.discriminator_logit(X.index_select(0, real_idx),
                                                           real_bins_t.index_select(0, real_idx));
        const auto fake_logits = model.discriminator_logit(x_fake, c_bins);
        auto loss_d = variant == Variant::v1_ordinal ? hinge_discriminator_loss(real_logits, fake_logits)
                                                     : logistic_discriminator_loss(real_logits, fake_logits);
        if (config.background_weight > 0) {
          torch::Tensor bg, bg_bins;
          {
            torch::NoGradGuard no_grad;
            std::vector<std::int64_t> shape{B};
            for (auto d : X.sizes().slice(1)) shape.push_back(d);
            bg = bg_low + bg_span * torch::rand(shape, generator);
            bg_bins = condition_bins(model.target_probability(bg).to(torch::kFloat32), N);
          }
          const auto bg_logits = model.discriminator_logit(bg, bg_bins);
          const auto bg_loss = variant == Variant::v1_ordinal ? torch::relu(1.0 + bg_logits).mean()
                                                              : torch::softplus(bg_logits).mean();
          loss_d = loss_d + config.background_weight * bg_loss;
        }
        ensure_finite(loss_d, "discriminator", epoch);
        opt_d.zero_grad();
        loss_d.backward();
        opt_d.step();
        sum_d += loss_d.item<double>() / static_cast<double>(config.d_steps);
      }

      const auto src_idx = torch::tensor(sampler.draw(B, rng), torch::kLong);
      const auto xs = X.index_select(0, src_idx);
      const auto fxs = fx.index_select(0, src_idx);
      const auto c = requested_conditions(B, N, variant, rng);
      const auto c_bins = condition_bins(c, N);
      check_bin_balance(c_bins, N);

      const auto z = net->encode(xs);
      const auto x_c = net->generate(z, c);
      const auto fake_logits = model.discriminator_logit(x_c, c_bins);
      const auto adv = variant == Variant::v1_ordinal ? hinge_generator_loss(fake_logits)
                                                      : logistic_generator_loss(fake_logits);
      const auto target = variant == Variant::v1_ordinal ? bin_centers(c_bins, N).to(torch::kFloat32) : c;
      const auto kl = kl_consistency(model.target_probability(x_c), target);
      const auto rec = reconstruction_loss(fns, xs, fxs, c, variant);
      auto pl = torch::zeros({});
      if (variant == Variant::v2_style && config.path_length) {
        pl = path_length([&](const torch::Tensor& w) { return net->generate(w, c); }, z, generator);
      }
      const auto total = config.lambda_adv * (adv + pl) + config.lambda_f * kl + config.lambda_rec * rec.total;
      ensure_finite(total, "generator", epoch);
      opt_g.zero_grad();
      total.backward();
      opt_g.step();

      sum_adv += adv.item<double>();
      sum_kl += kl.item<double>();
      sum_rec += rec.total.item<double>();
      sum_pl += pl.item<double>();
    }
    const double denom = static_cast<double>(steps);
    log.discriminator.push_back(sum_d / denom);
    log.adversarial.push_back(sum_adv / denom);
    log.consistency.push_back(sum_kl / denom);
    log.reconstruction.push_back(sum_rec / denom);
    log.path_length.push_back(sum_pl / denom);

    {
      torch::NoGradGuard no_grad;
      net->eval();
      const auto xp = X.index_select(0, probe_t);
      const auto p = fx.index_select(0, probe_t);
      const auto flip = torch::where(p >= 0.5, torch::full_like(p, 0.5 / N), torch::full_like(p, 1.0 - 0.5 / N));
      const auto q = model.target_probability(net->generate(net->encode(xp), flip));
      log.cv.push_back(metrics::cv_score(p, q));
      net->train();
    }
    if (log.discriminator.back() < 0.05 && log.cv.back() < 0.1) {
      const auto msg = "possible mode collapse at epoch " + std::to_string(epoch) +
                       ": discriminator loss near zero while CV stays below 0.1";
      log::warn(msg);
      log.warnings.push_back(msg);
    }
    log::info("pce epoch " + std::to_string(epoch) + " d=" + std::to_string(log.discriminator.back()) +
              " adv=" + std::to_string(log.adversarial.back()) + " kl=" + std::to_string(log.consistency.back()) +
              " rec=" + std::to_string(log.reconstruction.back()) + " cv=" + std::to_string(log.cv.back()));
    if (on_epoch) on_epoch(epoch, log);
  }
  model.mark_trained(std::move(log));
  return model;
}

}  // namespace cfaudit::pce
