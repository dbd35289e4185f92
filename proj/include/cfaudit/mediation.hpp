#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/classifier.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/metrics.hpp"

namespace cfaudit::mediation {

// ---------------------------------------------------------------- sparse logistic probes

struct LassoOptions {
  double tolerance = 1e-6;  // max coefficient change between iterations
  int max_iterations = 5000;
};

struct LassoFit {
  Eigen::VectorXd coefficients;
  double bias = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// FISTA on mean log-loss + lambda * |w|_1 (bias unpenalised). `warm` seeds the iterate.
LassoFit fit_lasso_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda,
                            const LassoOptions& options = {}, const LassoFit* warm = nullptr);

/// Smallest lambda whose solution is all-zero: max_j |X_j^T (y - mean y)| / n.
double lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXd& y);
/// Descending grid lambda_max * logspace(0, log10(ratio), count).
std::vector<double> lambda_grid(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int count = 20,
                                double ratio = 1e-3);

struct ProbeOptions {
  std::vector<double> lambdas;  // empty: automatic grid on the standardised units
  int grid_size = 20;
  double grid_ratio = 1e-3;
  int folds = 10;
  std::uint64_t seed = 0;
  LassoOptions lasso;
};

struct ConceptProbe {
  std::string concept_name;
  std::vector<double> coefficients;  // over raw vectorised units
  double bias = 0.0;
  double lambda = 0.0;
  std::vector<std::int64_t> support;  // nonzero coefficients
  double sparsity = 0.0;              // |support| / unit count
  double auc = 0.5;                   // out-of-fold, outer loop of the nested CV
  double recall = 0.0;                // out-of-fold, threshold 0.5
  std::int64_t sample_count = 0;
  std::vector<double> lambda_path;
  std::vector<std::int64_t> support_path;  // support size at each lambda of the path (full data)

  /// v . u + b for each row of `units` [B, U].
  Eigen::VectorXd logits(const Eigen::MatrixXd& units) const;
  nlohmann::json to_json() const;
  static ConceptProbe from_json(const nlohmann::json& j);
};

/// Probe over arbitrary unit values; labels -1 are dropped. Needs both 0 and 1 among the rest.
ConceptProbe fit_probe(const Eigen::MatrixXd& units, const std::vector<std::int8_t>& labels,
                       const std::string& name, const ProbeOptions& options = {});

/// Probe over the vectorised Phi1 activations of the dataset for concept column k.
ConceptProbe fit_concept_probe(const classifier::Classifier& model, const data::Dataset& data, std::size_t concept_index,
                               const ProbeOptions& options = {});

/// Vectorised Phi1 as a double matrix [B, U].
Eigen::MatrixXd unit_matrix(const classifier::Classifier& model, const torch::Tensor& x);

/// w = [logit h_1(x), ..., logit h_K(x)] for every input row.
Eigen::MatrixXd concept_logits(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                               const torch::Tensor& x);

double logit(double p);

// ---------------------------------------------------------------- effects

inline constexpr double kEffectEpsilon = 1e-6;

/// Per-pair f(x')/f(x) - 1 with f(x) clamped below by eps.
std::vector<double> ate_samples(const classifier::Classifier& model, const torch::Tensor& x, const torch::Tensor& x_prime,
                                std::int64_t target_class, double eps = kEffectEpsilon);
/// Phi2 with V_k held at x and the remaining units taken from x'.
std::vector<double> direct_effect_samples(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                                          const torch::Tensor& x, const torch::Tensor& x_prime,
                                          std::int64_t target_class, double eps = kEffectEpsilon);
/// Phi2 with V_k moved to x' and the remaining units held at x.
std::vector<double> indirect_effect_samples(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                                            const torch::Tensor& x, const torch::Tensor& x_prime,
                                            std::int64_t target_class, double eps = kEffectEpsilon);

double ate(const classifier::Classifier& model, const torch::Tensor& x, const torch::Tensor& x_prime,
           std::int64_t target_class, double eps = kEffectEpsilon);
double direct_effect(const classifier::Classifier& model, const std::vector<std::int64_t>& units, const torch::Tensor& x,
                     const torch::Tensor& x_prime, std::int64_t target_class, double eps = kEffectEpsilon);
double indirect_effect(const classifier::Classifier& model, const std::vector<std::int64_t>& units,
                       const torch::Tensor& x, const torch::Tensor& x_prime, std::int64_t target_class,
                       double eps = kEffectEpsilon);

struct EffectSummary {
  double mean = 0.0;
  double standard_error = 0.0;
  std::int64_t count = 0;
  nlohmann::json to_json() const;
};
EffectSummary summarize(const std::vector<double>& samples);

struct DirectionalEffects {
  EffectSummary ate;
  EffectSummary de;
  EffectSummary ie;
  nlohmann::json to_json() const;
};

struct ConceptEffects {
  std::string concept_name;
  std::vector<std::int64_t> units;
  bool control = false;
  DirectionalEffects pooled;
  DirectionalEffects increase;  // pairs with f(x) < 0.5, pushed up
  DirectionalEffects decrease;  // pairs with f(x) >= 0.5, pushed down
  nlohmann::json to_json() const;
};

struct EffectReport {
  std::int64_t sample_count = 0;
  std::int64_t target_class = 1;
  std::vector<ConceptEffects> concepts;  // probes in input order, control last
  std::vector<std::string> ranking;      // by |pooled IE|, descending
  nlohmann::json to_json() const;
};

struct RankOptions {
  std::int64_t target_class = 1;
  metrics::FlipThresholds thresholds{};  // requested c = low for positives, high for negatives
  bool random_control = true;
  std::uint64_t seed = 0;
  double eps = kEffectEpsilon;
};

inline constexpr const char* kControlConcept = "random-control";

/// Units for the ablation concept: uniform draw outside the union of probe supports, sized like the median support.
std::vector<std::int64_t> random_control_units(const std::vector<ConceptProbe>& probes, std::int64_t unit_count,
                                               std::uint64_t seed);

/// Effects for precomputed counterfactual pairs.
EffectReport rank_concepts(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                           const torch::Tensor& x, const torch::Tensor& x_prime, const RankOptions& options = {});
/// Counterfactuals are generated by `explain` with the flipping condition of each input.
EffectReport rank_concepts(const classifier::Classifier& model, const metrics::ExplainFn& explain,
                           const std::vector<ConceptProbe>& probes, const torch::Tensor& x,
                           const RankOptions& options = {});

/// explain(x, low) for inputs at or above 0.5, explain(x, high) below.
torch::Tensor flipping_counterfactuals(const classifier::Classifier& model, const metrics::ExplainFn& explain,
                                       const torch::Tensor& x, std::int64_t target_class,
                                       const metrics::FlipThresholds& thresholds = {});

// ---------------------------------------------------------------- surrogate tree

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;     // feature <= threshold
  int right = -1;
  std::vector<double> distribution;
  std::int64_t count = 0;
  std::int64_t prediction = 0;
};

class DecisionTree {
 public:
  DecisionTree() = default;
  DecisionTree(std::vector<TreeNode> nodes, std::vector<std::string> feature_names, std::int64_t class_count,
               int max_depth);

  std::int64_t predict(const Eigen::VectorXd& row) const;
  std::vector<std::int64_t> predict(const Eigen::MatrixXd& rows) const;
  int depth() const;
  int max_depth() const { return max_depth_; }
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const std::vector<std::string>& feature_names() const { return feature_names_; }
  std::int64_t class_count() const { return class_count_; }

  /// One line per root-to-leaf path.
  std::vector<std::string> rules() const;
  nlohmann::json to_json() const;
  static DecisionTree from_json(const nlohmann::json& j);

 private:
  std::vector<TreeNode> nodes_;
  std::vector<std::string> feature_names_;
  std::int64_t class_count_ = 0;
  int max_depth_ = 0;
};

/// Greedy CART with entropy splits; ties go to the lowest feature index, then the lowest threshold.
DecisionTree fit_tree(const Eigen::MatrixXd& X, const std::vector<std::int64_t>& y, std::int64_t class_count,
                      int max_depth, std::vector<std::string> feature_names = {}, std::int64_t min_samples_split = 2);

double entropy(const std::vector<double>& distribution);

struct SurrogateTree {
  DecisionTree tree;
  double fidelity = 0.0;  // agreement with argmax f on held-out data
  std::vector<double> recall;  // per class of f, held-out
  double mean_recall = 0.0;
  std::int64_t train_count = 0;
  std::int64_t heldout_count = 0;
  nlohmann::json to_json() const;
};

/// Tree over concept logits mimicking argmax f; fitted on `train`, scored on `heldout`.
SurrogateTree fit_surrogate_tree(const classifier::Classifier& model, const std::vector<ConceptProbe>& probes,
                                 const torch::Tensor& train, const torch::Tensor& heldout, int max_depth);

}  // namespace cfaudit::mediation
