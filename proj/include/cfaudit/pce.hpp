#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/classifier.hpp"
#include "cfaudit/data.hpp"

namespace cfaudit::pce {

/// v1: bin-conditioned generator (conditional BN) with hinge loss.
/// v2: extended-latent encoder, style-modulated decoder with a continuous condition embedding, logistic loss.
enum class Variant { v1_ordinal, v2_style };

std::string to_string(Variant variant);
Variant variant_from_string(const std::string& name);

inline constexpr const char* kCheckpointFormat = "cfaudit.pce/1";

struct ExplainerConfig {
  Variant variant = Variant::v1_ordinal;
  std::vector<std::int64_t> input_shape;
  std::int64_t target_class = 1;
  std::int64_t bins = 10;
  std::int64_t latent_dim = 64;
  std::int64_t hidden = 256;
  std::int64_t blocks = 3;
  std::int64_t condition_embedding = 16;  // v2 width of phi(c)
  // Per-feature output range of G after flattening; empty means [0, 1].
  std::vector<double> output_low;
  std::vector<double> output_high;

  std::int64_t input_size() const;
  /// Number of per-layer latents in W+ (v2); 1 for v1.
  std::int64_t latent_layers() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ExplainerConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------- building blocks

/// Linear layer whose weight is divided by its largest singular value (one power iteration per training call).
class SpectralLinearImpl : public torch::nn::Module {
 public:
  SpectralLinearImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor normalized_weight();

  torch::Tensor weight;
  torch::Tensor bias;
  torch::Tensor u;
};
TORCH_MODULE(SpectralLinear);

/// BatchNorm without affine terms, followed by a per-bin scale and shift.
class ConditionalBatchNormImpl : public torch::nn::Module {
 public:
  ConditionalBatchNormImpl(std::int64_t features, std::int64_t bins);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& bins);

 private:
  torch::nn::BatchNorm1d norm_{nullptr};
  torch::nn::Embedding gamma_{nullptr};
  torch::nn::Embedding beta_{nullptr};
};
TORCH_MODULE(ConditionalBatchNorm);

/// r(n|x) = sum_{i<n} v_i . phi(x) for each row; n must lie in [0, N).
torch::Tensor ordinal_projection(const torch::Tensor& phi, const torch::Tensor& V, const torch::Tensor& bins);

/// Encoder, generator and projection discriminator for one variant.
class ExplainerNetImpl : public torch::nn::Module {
 public:
  ExplainerNetImpl(ExplainerConfig config, std::int64_t auxiliary_dim);

  const ExplainerConfig& config() const { return config_; }

  /// [B, z] for v1, [B, L, z] for v2.
  torch::Tensor encode(const torch::Tensor& x);
  /// c holds requested target-class posteriors [B]; v1 uses only their bins.
  torch::Tensor generate(const torch::Tensor& latent, const torch::Tensor& c);

  /// phi(x), concatenated with `auxiliary` features when the net was built with them.
  torch::Tensor features(const torch::Tensor& x, const torch::Tensor& auxiliary);
  /// psi(phi) + r(n|x).
  torch::Tensor logit(const torch::Tensor& phi, const torch::Tensor& bins);
  torch::Tensor& V() { return V_; }

  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;

 private:
  torch::Tensor squash(const torch::Tensor& raw) const;

  ExplainerConfig config_;
  std::int64_t auxiliary_dim_;

  torch::nn::Linear enc_in_{nullptr};
  torch::nn::ModuleList enc_blocks_{nullptr};
  torch::nn::Linear enc_out_{nullptr};

  torch::nn::Linear gen_in_{nullptr};
  torch::nn::ModuleList gen_blocks_{nullptr};
  torch::nn::Sequential condition_embed_{nullptr};
  torch::nn::Linear gen_out_{nullptr};
  torch::Tensor out_low_;
  torch::Tensor out_high_;

  SpectralLinear disc_in_{nullptr};
  torch::nn::ModuleList disc_blocks_{nullptr};
  SpectralLinear psi_{nullptr};
  torch::Tensor V_;
};
TORCH_MODULE(ExplainerNet);

// ---------------------------------------------------------------- loss terms

/// KL(realized || requested) per row, summed over classes and averaged over the batch.
/// 1-D inputs are Bernoulli probabilities of the target class. Both sides are clamped to [eps, 1 - eps].
torch::Tensor kl_consistency(const torch::Tensor& realized, const torch::Tensor& requested, double eps = 1e-6);

using ProbeFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct CarlContext {
  /// Integer region labels over the spatial shape, shared [H, W] or per sample [B, H, W].
  std::optional<torch::Tensor> segmentation;
  /// Batched object-detector probabilities [B, K].
  ProbeFn object_probe;
};

/// Sum over regions of the region-normalised channel-mean |x - x'|, plus KL(O(x) || O(x')); batch mean.
torch::Tensor carl(const torch::Tensor& x, const torch::Tensor& x_prime, const CarlContext& context = {});

torch::Tensor hinge_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor hinge_generator_loss(const torch::Tensor& fake_logits);
torch::Tensor logistic_discriminator_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
torch::Tensor logistic_generator_loss(const torch::Tensor& fake_logits);

/// Warns when the bin counts of a batch differ by more than one; returns whether it was balanced.
bool check_bin_balance(const torch::Tensor& bins, std::int64_t bin_count);

struct GeneratorFns {
  std::function<torch::Tensor(const torch::Tensor&)> encode;
  std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)> generate;
};

struct ReconstructionTerms {
  torch::Tensor self;
  torch::Tensor cyclic;
  torch::Tensor latent;  // zero for v1
  torch::Tensor total;
};

/// Self term CARL(x, G(E(x), f(x))) and cyclic term CARL(x, G(E(G(E(x), c)), f(x)));
/// v2 adds mean |e(x) - e(x_bar)| for both reconstructions.
ReconstructionTerms reconstruction_loss(const GeneratorFns& fns, const torch::Tensor& x, const torch::Tensor& fx,
                                        const torch::Tensor& c, Variant variant, const CarlContext& context = {});

struct PathLengthResult {
  torch::Tensor penalty;  // mean (|J^T y| - a)^2
  torch::Tensor norms;    // per-sample |J^T y|, detached
};

/// `directions` are image-space vectors shaped like g(w); each sample's direction is rescaled to unit norm.
PathLengthResult path_length_penalty(const std::function<torch::Tensor(const torch::Tensor&)>& g,
                                     const torch::Tensor& w, double a, const torch::Tensor& directions);

/// Keeps a as an exponential moving average of observed norms (updated before the penalty is taken).
class PathLengthRegularizer {
 public:
  explicit PathLengthRegularizer(double decay = 0.99) : decay_(decay) {}
  torch::Tensor operator()(const std::function<torch::Tensor(const torch::Tensor&)>& g, const torch::Tensor& w,
                           std::optional<at::Generator> generator = std::nullopt);
  double a() const { return a_; }

 private:
  double decay_;
  double a_ = 0.0;
};

// ---------------------------------------------------------------- model

struct TrainLog {
  std::vector<double> discriminator;
  std::vector<double> adversarial;
  std::vector<double> consistency;
  std::vector<double> reconstruction;
  std::vector<double> path_length;
  std::vector<double> cv;
  std::vector<std::string> warnings;
  nlohmann::json to_json() const;
  static TrainLog from_json(const nlohmann::json& j);
};

/// Trained explainer bound to the frozen classifier it explains.
/// Inference methods are const and reentrant once training has finished.
class ExplainerModel {
 public:
  ExplainerModel(ExplainerConfig config, classifier::Classifier classifier, std::uint64_t seed);

  const ExplainerConfig& config() const { return net_->config(); }
  const classifier::Classifier& classifier() const { return classifier_; }
  ExplainerNet& net() { return net_; }
  bool trained() const { return trained_; }
  const TrainLog& log() const { return log_; }
  void mark_trained(TrainLog log);

  /// Target-class posterior of the classifier, [B].
  torch::Tensor target_probability(const torch::Tensor& x) const;
  /// Auxiliary discriminator input (classifier penultimate for v2, undefined for v1).
  torch::Tensor auxiliary(const torch::Tensor& x) const;
  /// Full D logit with the condition bin of each row.
  torch::Tensor discriminator_logit(const torch::Tensor& x, const torch::Tensor& bins) const;

  /// G(E(x), c); x batched or a single sample, c one value per row.
  torch::Tensor explain(const torch::Tensor& x, const torch::Tensor& c) const;
  torch::Tensor explain(const torch::Tensor& x, double c) const;
  /// Counterfactuals of one sample at every bin centre, [N, ...].
  torch::Tensor sweep(const torch::Tensor& sample) const;

  /// sigmoid of the D logit at the bin of the classifier's own posterior.
  torch::Tensor discriminator_score(const torch::Tensor& x) const;
  double ordinal_condition_logit(const torch::Tensor& sample, std::int64_t n) const;

  void save(const std::filesystem::path& directory) const;
  static ExplainerModel load(const std::filesystem::path& directory, classifier::Classifier classifier);

 private:
  torch::Tensor batch(const torch::Tensor& x) const;
  void require_trained() const;

  classifier::Classifier classifier_;
  mutable ExplainerNet net_;
  bool trained_ = false;
  TrainLog log_;
};

// ---------------------------------------------------------------- training

/// lambda_adv, lambda_f, lambda_rec correspond to lambda1, lambda2, lambda3 of the ordinal variant.
struct ExplainerTrainConfig {
  ExplainerConfig model;
  double lambda_adv = 1.0;
  double lambda_f = 1.0;
  double lambda_rec = 0.5;
  std::int64_t epochs = 20;
  std::int64_t batch_size = 32;
  std::int64_t d_steps = 5;
  double learning_rate = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.9;
  bool path_length = false;
  double path_length_decay = 0.99;
  std::int64_t probe_size = 128;  // samples used for the per-epoch CV check
  // Extra D negatives drawn uniformly from the data box widened by background_margin * range
  // (clamped to [0, 1] for images); weight 0 disables them.
  double background_weight = 0.0;
  double background_margin = 1.0;
  std::uint64_t seed = 0;

  static ExplainerTrainConfig defaults(Variant variant);
  void validate() const;
  nlohmann::json to_json() const;
  static ExplainerTrainConfig from_json(const nlohmann::json& j);
};

/// Restores requires_grad on every parameter of a module when it goes out of scope.
class FrozenParameters {
 public:
  explicit FrozenParameters(const torch::nn::Module& module);
  ~FrozenParameters();
  FrozenParameters(const FrozenParameters&) = delete;
  FrozenParameters& operator=(const FrozenParameters&) = delete;

 private:
  std::vector<std::pair<torch::Tensor, bool>> saved_;
};

using ExplainerEpochCallback = std::function<void(std::int64_t epoch, const TrainLog& log)>;

/// Adversarial training of E, G, D against the frozen classifier; real batches are stratified by f(x) bin
/// and requested conditions cycle through all bins.
ExplainerModel train_pce(const classifier::Classifier& classifier, const data::Dataset& data,
                         const ExplainerTrainConfig& config, const ExplainerEpochCallback& on_epoch = {});

}  // namespace cfaudit::pce
