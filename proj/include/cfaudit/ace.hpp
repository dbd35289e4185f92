#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/classifier.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/metrics.hpp"
#include "cfaudit/pce.hpp"

namespace cfaudit::ace {

// ---------------------------------------------------------------- augmentation pool

struct AugmentationEntry {
  torch::Tensor image;             // G(x, c[k])
  std::vector<double> soft_label;  // probability vector over classes
  std::string source_id;
  double sampled_c = 0.0;          // c[k]
};

struct AugmentationPool {
  std::vector<AugmentationEntry> entries;
  std::int64_t class_count = 2;
  std::int64_t target_class = 1;
  data::Modality modality = data::Modality::image;

  std::size_t size() const { return entries.size(); }
  torch::Tensor images() const;
  torch::Tensor soft_labels() const;  // [N, K] float

  /// manifest.json (with the soft_label column) plus pool.json with the pool metadata.
  void save(const std::filesystem::path& directory) const;
  static AugmentationPool load(const std::filesystem::path& directory);
};

/// Class paired with the explainer's target: the source label when it differs, otherwise the
/// classifier's most probable non-target class.
std::int64_t complement_class(const classifier::Classifier& model, const data::LabeledSample& source,
                              std::int64_t target_class);

/// c[k] = c, c[k_c] = 1 - c, zeros elsewhere.
std::vector<double> soft_label(double c, std::int64_t target_class, std::int64_t complement, std::int64_t class_count);

/// per_source draws per source with c[k] ~ U(0,1), c[k_c] = 1 - c[k], zeros elsewhere.
AugmentationPool build_augmentation_pool(const pce::ExplainerModel& explainer, const classifier::Classifier& model,
                                         const data::Dataset& sources, std::int64_t per_source, std::uint64_t seed);

// ---------------------------------------------------------------- fine-tuning

struct AceConfig {
  std::int64_t epochs = 5;
  double learning_rate = 1e-4;
  double mix_ratio = 0.5;  // share of each batch drawn from the pool
  std::int64_t batch_size = 64;
  double accuracy_drop_budget = 0.01;
  std::int64_t ece_bins = 15;
  // "min_ece": lowest validation ECE within the budget; "last": latest epoch within the budget.
  std::string selection = "min_ece";
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static AceConfig from_json(const nlohmann::json& j);
};

struct AceCheckpoint {
  std::int64_t epoch = 0;  // 1-based; 0 is the baseline
  double accuracy = 0.0;
  double ece = 0.0;
  nlohmann::json to_json() const;
};

struct AceResult {
  classifier::Classifier model;
  AceCheckpoint baseline;
  std::vector<AceCheckpoint> checkpoints;
  std::int64_t selected_epoch = 0;
  nlohmann::json to_json() const;
};

/// Batches for one epoch: real one-hot rows and pool soft-label rows mixed at `mix_ratio`.
std::vector<classifier::SoftLabeledBatch> mixed_batches(const data::Dataset& train, const AugmentationPool& pool,
                                                        double mix_ratio, std::int64_t batch_size,
                                                        std::uint64_t seed);

/// Fine-tunes on the mixed stream; among epochs whose validation accuracy stays within the drop budget
/// of the baseline, picks by `selection` (highest accuracy when none qualifies).
AceResult ace_finetune(const classifier::Classifier& model, const data::Dataset& train, const AugmentationPool& pool,
                       const data::Dataset& validation, const AceConfig& config);

// ---------------------------------------------------------------- selective prediction

struct Abstain {};
using GuardedOutcome = std::variant<torch::Tensor, Abstain>;

/// Higher score means more in-distribution; [B] for a batch.
using ScoreFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// The q-quantile (linear interpolation) of in-distribution scores.
double choose_threshold(std::vector<double> id_scores, double quantile = 0.05);

class GuardedClassifier {
 public:
  GuardedClassifier(classifier::Classifier model, ScoreFn score, double threshold);

  const classifier::Classifier& model() const { return model_; }
  double threshold() const { return threshold_; }
  torch::Tensor score(const torch::Tensor& x) const;

  /// One outcome per row; a posterior [K] when score >= h, Abstain otherwise.
  std::vector<GuardedOutcome> predict(const torch::Tensor& x) const;
  std::vector<bool> abstains(const torch::Tensor& x) const;

 private:
  classifier::Classifier model_;
  ScoreFn score_;
  double threshold_;
};

/// Discriminator score of the explainer as the selection function, h from held-out id data.
GuardedClassifier make_guard(classifier::Classifier model, const pce::ExplainerModel& explainer,
                             const torch::Tensor& heldout_id, double quantile = 0.05);

// ---------------------------------------------------------------- evaluation

struct UncertaintySets {
  torch::Tensor id_inputs;
  torch::Tensor id_labels;
  torch::Tensor aid;       // undefined to skip
  torch::Tensor near_ood;  // undefined to skip
  torch::Tensor far_ood;   // undefined to skip
};

struct UncertaintyReport {
  double accuracy = 0.0;
  double threshold = 0.0;
  double id_abstain_rate = 0.0;
  std::optional<metrics::ScoreSeparationReport> aid;       // predictive entropy
  std::optional<metrics::ScoreSeparationReport> near_ood;  // predictive entropy
  std::optional<metrics::ScoreSeparationReport> far_ood;   // negated discriminator score
  std::optional<double> far_ood_abstain_rate;
  nlohmann::json to_json() const;
};

UncertaintyReport evaluate_uncertainty(const GuardedClassifier& guard, const UncertaintySets& sets);

/// Top `fraction` of samples by predictive entropy under a reference model.
std::vector<bool> entropy_quantile_mask(const classifier::Classifier& reference, const torch::Tensor& x,
                                        double fraction);

// ---------------------------------------------------------------- two-moons geometry

/// Points whose distances to the two arcs differ by less than `width`.
std::vector<bool> moon_band_mask(const torch::Tensor& points, double width = 0.15);

/// Regular grid over the data box keeping band points (see moon_band_mask) that lie within
/// `support` of an arc.
torch::Tensor moon_band_grid(const torch::Tensor& points, double spacing = 0.02, double width = 0.2,
                             double support = 0.35);

/// Regular grid over the data box widened by `margin`, keeping points farther than
/// `min_distance` from both arcs.
torch::Tensor moon_far_grid(const torch::Tensor& points, double spacing = 0.1, double margin = 1.5,
                            double min_distance = 1.0);

}  // namespace cfaudit::ace
