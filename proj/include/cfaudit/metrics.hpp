#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

namespace cfaudit::metrics {

/// Batched images -> [B, K] posteriors.
using ProbFn = std::function<torch::Tensor(const torch::Tensor&)>;
/// Batched images and one requested posterior c -> batched counterfactuals.
using ExplainFn = std::function<torch::Tensor(const torch::Tensor&, double)>;

// ---------------------------------------------------------------- FID

struct ActivationStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  std::int64_t count = 0;
};

/// Mean and unbiased covariance of feature rows [N, D].
ActivationStats activation_stats(const torch::Tensor& features);
ActivationStats activation_stats(const Eigen::MatrixXd& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^1/2), square root through the symmetric form.
double fid(const ActivationStats& a, const ActivationStats& b);

// ---------------------------------------------------------------- counterfactual quality

struct FlipThresholds {
  double low = 0.2;
  double high = 0.8;
};

/// Fraction of pairs whose target-class posterior moves past the threshold opposite to the input's side.
double cv_score(const torch::Tensor& p_inputs, const torch::Tensor& p_counterfactuals, const FlipThresholds& t = {});
double cv_score(const ProbFn& f, const torch::Tensor& x, const torch::Tensor& x_c, std::int64_t target_class,
                const FlipThresholds& t = {});

/// |x_pos - x_neg| summed over channels and scaled by its maximum (zero map stays zero).
torch::Tensor counterfactual_importance_map(const torch::Tensor& x, const torch::Tensor& x_neg,
                                            const torch::Tensor& x_pos);

enum class Filler { mean, blur };
std::string to_string(Filler filler);
Filler filler_from_string(const std::string& name);

struct DeletionResult {
  double auc = 0.0;
  std::vector<double> fractions;
  std::vector<double> probabilities;
  std::string filler;
};

/// Trapezoidal area under (x, y) with x rescaled to [0, 1].
double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y);

/// Removes pixels in decreasing importance, re-scores the target class at each fraction.
DeletionResult deletion_auc(const ProbFn& f, const torch::Tensor& image, const torch::Tensor& importance,
                            std::int64_t target_class, const std::vector<double>& fractions,
                            Filler filler = Filler::mean);

// ---------------------------------------------------------------- rank statistics

struct SpearmanResult {
  double rho = 0.0;
  bool defined = true;  // false when either side has zero variance (rho reported as 0)
};
SpearmanResult spearman(const std::vector<double>& x, const std::vector<double>& y);
std::vector<double> average_ranks(const std::vector<double>& values);

struct ConsistencyBand {
  double low = 0.0;
  double high = 0.0;
  std::int64_t count = 0;
  std::vector<double> requested;  // bin centres
  std::vector<double> realized;   // mean f(x_c) per centre
  SpearmanResult spearman;
};

struct ConsistencyCurve {
  std::vector<ConsistencyBand> bands;  // empty bands omitted
  nlohmann::json to_json() const;
};

/// Groups inputs into 5 equal bands of f(x) and sweeps c over N bin centres.
ConsistencyCurve consistency_curve(const ProbFn& f, const ExplainFn& explain, const torch::Tensor& probe_set,
                                   std::int64_t target_class, std::int64_t bins, std::int64_t band_count = 5);

/// Fraction of pairs whose oracle decision (argmax) changes.
double confounding_metric(const ProbFn& oracle, const torch::Tensor& x, const torch::Tensor& x_c);

// ---------------------------------------------------------------- separation

struct Histogram {
  double low = 0.0;
  double high = 0.0;
  std::vector<std::int64_t> counts;
};

/// Scores are oriented so that larger means "more likely positive" (uncertain / OOD).
struct ScoreSeparationReport {
  double auc_roc = 0.5;
  double tnr_at_tpr95 = 0.0;
  double threshold = 0.0;
  std::int64_t negatives = 0;
  std::int64_t positives = 0;
  Histogram negative_histogram;
  Histogram positive_histogram;
  nlohmann::json to_json() const;
};

double rank_auc(const std::vector<double>& negatives, const std::vector<double>& positives);
ScoreSeparationReport separation_report(const std::vector<double>& scores_in, const std::vector<double>& scores_out,
                                        std::int64_t histogram_bins = 20);

/// Expected calibration error of the max-probability confidence, equal-width bins.
double expected_calibration_error(const torch::Tensor& probabilities, const torch::Tensor& labels,
                                  std::int64_t bins = 15);

// ---------------------------------------------------------------- reporting

struct MetricRecord {
  std::string metric;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json value;
  nlohmann::json group_sizes = nlohmann::json::object();
  std::optional<std::uint64_t> seed;
  nlohmann::json to_json() const;
};

/// One JSON object per line.
void append_to_ledger(const std::filesystem::path& ledger, const MetricRecord& record);
std::vector<MetricRecord> read_ledger(const std::filesystem::path& ledger);

std::vector<double> to_vector(const torch::Tensor& t);

}  // namespace cfaudit::metrics
