#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/data.hpp"

namespace cfaudit::classifier {

enum class Architecture { mlp, cnn };
/// How a tap activation is turned into one value per unit for probing.
enum class Vectorization { max_pool, flatten };

inline constexpr const char* kCheckpointFormat = "cfaudit.classifier/1";

struct ArchitectureDescriptor {
  Architecture kind = Architecture::mlp;
  std::vector<std::int64_t> input_shape = {2};
  std::int64_t class_count = 2;
  std::vector<std::int64_t> hidden = {32, 32};  // MLP widths, or CNN channels per conv stage
  std::int64_t dense_width = 64;               // CNN only
  std::string tap_layer;                       // empty: last stage before "logits"
  Vectorization vectorization = Vectorization::max_pool;

  nlohmann::json to_json() const;
  static ArchitectureDescriptor from_json(const nlohmann::json& j);
};

/// Stack of named stages; each stage maps the previous activation to the next.
class ClassifierNetImpl : public torch::nn::Cloneable<ClassifierNetImpl> {
 public:
  explicit ClassifierNetImpl(ArchitectureDescriptor descriptor);
  void reset() override;

  torch::Tensor forward(torch::Tensor x);
  /// Runs stages [first, last] inclusive.
  torch::Tensor run(torch::Tensor x, std::size_t first, std::size_t last);

  const std::vector<std::string>& stage_names() const { return names_; }
  std::size_t stage_index(const std::string& name) const;
  const ArchitectureDescriptor& descriptor() const { return descriptor_; }

 private:
  ArchitectureDescriptor descriptor_;
  std::vector<std::string> names_;
  std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(ClassifierNet);

struct TrainingReport {
  double final_train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> epoch_losses;
  nlohmann::json to_json() const;
  static TrainingReport from_json(const nlohmann::json& j);
};

struct TapResult {
  torch::Tensor activations;    // raw Phi1 output at the tap stage
  torch::Tensor probabilities;  // [B, K]
};

/// The audited black box f = Phi2 o Phi1 with the split at a named tap stage.
/// Inference methods are const and safe to call concurrently; inputs are batched [B, ...].
class Classifier {
 public:
  Classifier(ArchitectureDescriptor descriptor, std::uint64_t seed);

  const ArchitectureDescriptor& descriptor() const { return net_->descriptor(); }
  std::int64_t class_count() const { return descriptor().class_count; }
  std::vector<std::string> stage_names() const { return net_->stage_names(); }
  const std::string& tap_layer() const { return tap_; }
  void set_tap_layer(const std::string& name);

  torch::Tensor logits(const torch::Tensor& x) const;
  torch::Tensor predict(const torch::Tensor& x) const;
  TapResult tap(const torch::Tensor& x) const;
  torch::Tensor phi1(const torch::Tensor& x) const;
  torch::Tensor phi2(const torch::Tensor& activations) const;
  /// Activations of the stage right before the logits (feature space for FID).
  torch::Tensor penultimate(const torch::Tensor& x) const;

  /// [B, U]: one value per unit (channel max for conv maps under max_pool).
  torch::Tensor vectorize(const torch::Tensor& activations) const;
  std::int64_t unit_count() const;
  /// Shape of one unit's slice of the activation (e.g. {H, W} for a channel, {} for a neuron).
  std::vector<std::int64_t> unit_shape() const;

  ClassifierNet& net() { return net_; }
  const ClassifierNet& net() const { return net_; }
  torch::Dtype dtype() const;
  void to(torch::Dtype dtype);
  Classifier clone() const;

  const TrainingReport& report() const { return report_; }
  void set_report(TrainingReport report) { report_ = std::move(report); }

  void save(const std::filesystem::path& directory) const;
  static Classifier load(const std::filesystem::path& directory);

 private:
  Classifier(ClassifierNet net, std::string tap, TrainingReport report);
  torch::Tensor prepare(const torch::Tensor& x) const;
  std::size_t tap_index() const;

  mutable ClassifierNet net_;
  std::string tap_;
  TrainingReport report_;
};

struct TrainingConfig {
  ArchitectureDescriptor architecture;
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;
  double learning_rate = 1e-4;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Cross-entropy training with Adam; seed pins initialisation and data order.
Classifier train_classifier(const data::Dataset& data, const TrainingConfig& config);

/// -sum p log p (natural log) per row of a [B, K] probability tensor.
torch::Tensor predictive_entropy(const torch::Tensor& probabilities);
double predictive_entropy(const std::vector<double>& probabilities);
torch::Tensor predictive_entropy(const Classifier& model, const torch::Tensor& x);

double accuracy(const Classifier& model, const data::Dataset& data);

struct SoftLabeledBatch {
  torch::Tensor images;
  torch::Tensor targets;  // [B, K] probability vectors
  void validate(std::int64_t class_count) const;
};

/// Batches for a given epoch (0-based).
using BatchSource = std::function<std::vector<SoftLabeledBatch>(std::int64_t epoch)>;
using EpochCallback = std::function<void(std::int64_t epoch, const Classifier& current)>;

struct FinetuneConfig {
  std::int64_t epochs = 5;
  double learning_rate = 1e-4;
};

/// -sum t log softmax(z), averaged over the batch.
torch::Tensor soft_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets);

/// Returns a fine-tuned copy; the input model is left untouched.
Classifier finetune(const Classifier& model, const BatchSource& batches, const FinetuneConfig& config,
                    const EpochCallback& on_epoch = {});

/// Phi2 applied to Phi1(x) with the listed units overwritten by `values` [B, |units|, unit_shape...].
torch::Tensor intervene_forward(const Classifier& model, const torch::Tensor& x,
                                const std::vector<std::int64_t>& units, const torch::Tensor& values);
/// Unit values of Phi1(x) for the listed units, shaped for intervene_forward.
torch::Tensor unit_values(const Classifier& model, const torch::Tensor& activations,
                          const std::vector<std::int64_t>& units);

}  // namespace cfaudit::classifier
