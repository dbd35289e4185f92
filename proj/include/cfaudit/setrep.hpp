#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/data.hpp"

namespace cfaudit::setrep {

enum class OutcomeKind { binary, continuous };

inline constexpr const char* kCheckpointFormat = "cfaudit.setrep/1";

struct SetModelConfig {
  std::vector<std::int64_t> patch_shape;
  std::int64_t feature_dim = 128;
  std::vector<std::int64_t> encoder_hidden = {256};
  std::int64_t attention_hidden = 64;
  std::int64_t outcome_dim = 1;
  OutcomeKind outcome_kind = OutcomeKind::binary;

  nlohmann::json to_json() const;
  static SetModelConfig from_json(const nlohmann::json& j);
};

/// Row k -> W (H_k - colmax(H)) + b with colmax over rows.
torch::Tensor equivariant_layer(const torch::Tensor& H, const torch::Tensor& W, const torch::Tensor& b);

class EquivariantLinearImpl : public torch::nn::Module {
 public:
  EquivariantLinearImpl(std::int64_t in, std::int64_t out);
  torch::Tensor forward(const torch::Tensor& H);
  torch::Tensor weight;
  torch::Tensor bias;
};
TORCH_MODULE(EquivariantLinear);

/// Everything computed for one bag, in canonical patch order.
struct BagPass {
  std::vector<std::int64_t> order;  // canonical position i holds original patch order[i]
  torch::Tensor patches;            // [n, ...] canonical order
  torch::Tensor features;           // [n, d]
  torch::Tensor reconstructions;    // [n, ...]
  torch::Tensor alpha;              // [n]
  torch::Tensor representation;     // [d]
  torch::Tensor outcome_logits;     // [outcome_dim]
};

/// Patch encoder/decoder, equivariant attention and outcome head.
class SetModelImpl : public torch::nn::Module {
 public:
  explicit SetModelImpl(SetModelConfig config);

  const SetModelConfig& config() const { return config_; }

  torch::Tensor encode(const torch::Tensor& patches);
  torch::Tensor decode(const torch::Tensor& features);
  /// Softmax over patches of sigmoid-squashed equivariant-layer scores.
  torch::Tensor attention(const torch::Tensor& features);
  BagPass pass(const torch::Tensor& patches);

  /// alpha in the bag's own patch order.
  torch::Tensor attention_weights(const data::PatchBag& bag);
  torch::Tensor aggregate(const data::PatchBag& bag);
  /// Pooling with caller-supplied weights (bag order); uniform weights give mean pooling.
  torch::Tensor aggregate_with_weights(const data::PatchBag& bag, const torch::Tensor& weights);
  /// Probabilities for binary outcomes, raw values for continuous ones.
  torch::Tensor predict_outcome(const data::PatchBag& bag);
  torch::Tensor outcome_from_logits(const torch::Tensor& logits) const;

 private:
  SetModelConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Sequential decoder_{nullptr};
  EquivariantLinear attention1_{nullptr};
  EquivariantLinear attention2_{nullptr};
  torch::nn::Linear predictor_{nullptr};
};
TORCH_MODULE(SetModel);

/// Lexicographic order of flattened patches; ties keep their bag order.
std::vector<std::int64_t> canonical_order(const torch::Tensor& patches);

struct LossWeights {
  double lambda1 = 10.0;  // reconstruction
  double lambda2 = 1.0;   // log-sum attention regulariser
  double epsilon = 1e-8;
};

struct LossTerms {
  torch::Tensor total;
  torch::Tensor discriminative;
  torch::Tensor generative;
  torch::Tensor regularizer;
};

/// sum_j log(alpha_j + eps).
torch::Tensor log_sum_regularizer(const torch::Tensor& alpha, double epsilon);
/// Mean over patches of the l2 norm of x_j - xhat_j.
torch::Tensor reconstruction_distance(const torch::Tensor& patches, const torch::Tensor& reconstructions);

LossTerms subject2vec_loss(SetModel& model, const data::PatchBag& bag, const std::vector<double>& outcome,
                           const LossWeights& weights);

struct SetTrainConfig {
  SetModelConfig model;
  LossWeights weights;
  std::int64_t epochs = 30;
  std::int64_t bags_per_step = 8;
  double learning_rate = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
};

struct SetTrainReport {
  std::vector<double> epoch_losses;
  double effective_rank = 0.0;
  nlohmann::json to_json() const;
};

struct TrainedSetModel {
  SetModel model;
  SetTrainReport report;
};

TrainedSetModel train_setrep(const std::vector<data::PatchBag>& bags, const SetTrainConfig& config);

/// exp(entropy) of the normalised singular values of the column-centred matrix.
double effective_rank(const torch::Tensor& matrix);
/// Effective rank of the patch features of every bag stacked together.
double latent_effective_rank(SetModel& model, const std::vector<data::PatchBag>& bags);

void save_set_model(SetModel& model, const std::filesystem::path& directory);
SetModel load_set_model(const std::filesystem::path& directory);

}  // namespace cfaudit::setrep
