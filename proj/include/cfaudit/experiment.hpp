#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cfaudit/ace.hpp"
#include "cfaudit/classifier.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/data.hpp"
#include "cfaudit/mediation.hpp"
#include "cfaudit/pce.hpp"

namespace cfaudit::experiment {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kOutputRootEnv = "CFAUDIT_OUTPUT_ROOT";
inline constexpr const char* kBundleFormat = "cfaudit.bundle/1";

// ---------------------------------------------------------------- configuration

/// Experiment configuration: a JSON document with `schema_version`, addressed by dotted paths.
class Config {
 public:
  explicit Config(nlohmann::json document);
  static Config load(const std::filesystem::path& path);

  /// Applies "a.b.c=value"; the value is parsed as JSON and kept as a string when that fails.
  void set(std::string_view assignment);
  bool has(std::string_view path) const;
  /// Throws ConfigError naming the key when it is absent.
  const nlohmann::json& at(std::string_view path) const;
  /// Section as an object (empty when absent).
  nlohmann::json section(std::string_view path) const;

  template <typename T>
  T get(std::string_view path) const {
    try {
      return at(path).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + std::string(path) + "' has the wrong type: " + e.what());
    }
  }
  template <typename T>
  T get_or(std::string_view path, T fallback) const {
    return has(path) ? get<T>(path) : fallback;
  }

  const nlohmann::json& document() const { return document_; }

 private:
  nlohmann::json document_;
};

/// Output root: the config's `output` key, else $CFAUDIT_OUTPUT_ROOT, else ./runs.
std::filesystem::path output_root(const Config& config);

/// Fresh `<root>/<name>-YYYYmmdd-HHMMSS[-n]` directory with resolved_config.json; never reuses a directory.
std::filesystem::path create_run_dir(const Config& config, std::string_view name);

/// Pretty-printed JSON with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& value);
nlohmann::json read_json(const std::filesystem::path& path);

// ---------------------------------------------------------------- datasets

/// kind: two_moons {n, noise, seed} | glyph_digits {n, seed, size, digits} |
/// loop_morphs {n, seed, size, ambiguous_fraction} | manifest {path}.
data::Dataset build_dataset(const nlohmann::json& spec);

struct Splits {
  data::Dataset train;
  data::Dataset validation;
  data::Dataset test;
};

/// Uses the samples' split tags when every sample has one; otherwise a seeded split with
/// `test` and `val` fractions (defaults 0.2 each).
Splits split_dataset(const data::Dataset& dataset, const nlohmann::json& spec);

// ---------------------------------------------------------------- model configs

classifier::TrainingConfig classifier_config(const Config& config, const data::Dataset& dataset);
pce::ExplainerTrainConfig explainer_config(const Config& config, const data::Dataset& dataset);

// ---------------------------------------------------------------- bundles

/// Everything the explain/mediate/ace/uncertainty steps and the service need, loaded once.
struct Bundle {
  std::filesystem::path root;
  nlohmann::json manifest;                    // bundle.json
  classifier::Classifier classifier;          // model that answers queries
  std::optional<pce::ExplainerModel> explainer;
  data::Dataset samples;                      // sample index (test split)
  double threshold = 0.0;                     // guard threshold on the discriminator score
  std::vector<mediation::ConceptProbe> probes;
  std::optional<nlohmann::json> effects;      // EffectReport JSON

  static Bundle load(const std::filesystem::path& directory);
  ace::GuardedClassifier guard() const;
};

struct BundleParts {
  const classifier::Classifier* classifier = nullptr;
  const classifier::Classifier* explained = nullptr;  // classifier the explainer was trained against
  const pce::ExplainerModel* explainer = nullptr;
  const data::Dataset* samples = nullptr;
  double threshold = 0.0;
  double quantile = 0.05;
  const std::vector<mediation::ConceptProbe>* probes = nullptr;
  const nlohmann::json* effects = nullptr;
};

/// Writes classifier/, explainer/ (+ explained/ when it differs), samples/, guard.json and bundle.json.
void write_bundle(const std::filesystem::path& directory, const BundleParts& parts);

// ---------------------------------------------------------------- counterfactual strips

struct Panel {
  double c = 0.0;
  torch::Tensor image;
  double f_xc = 0.0;  // target-class posterior of the explained classifier
};

/// One counterfactual per bin centre (k + 0.5) / bins, ordered by c.
std::vector<Panel> sweep_panels(const pce::ExplainerModel& explainer, const torch::Tensor& sample, std::int64_t bins);

// ---------------------------------------------------------------- pipelines

/// Each step reads its inputs from the config, writes artifacts into `run_dir` and returns report.json's content.
nlohmann::json run_train_classifier(const Config& config, const std::filesystem::path& run_dir);
nlohmann::json run_train_setrep(const Config& config, const std::filesystem::path& run_dir);
/// Trains (or loads `classifier.checkpoint`) the classifier, then the explainer; the run directory is a bundle.
nlohmann::json run_train_pce(const Config& config, const std::filesystem::path& run_dir);

struct ExplainRequest {
  std::filesystem::path bundle;
  std::optional<std::string> sample_id;
  std::optional<std::filesystem::path> image;
  std::optional<double> c;
  std::int64_t sweep_bins = 0;
};
/// Single counterfactual (explain.png) or sweep strip (strip.png) plus a JSON sidecar with c and f(x_c).
nlohmann::json run_explain(const ExplainRequest& request, const std::filesystem::path& run_dir);

nlohmann::json run_evaluate_metrics(const Config& config, const std::filesystem::path& run_dir);
nlohmann::json run_mediate(const Config& config, const std::filesystem::path& run_dir);
/// Pool, fine-tuning and a new bundle whose classifier is the fine-tuned model.
nlohmann::json run_ace_finetune(const Config& config, const std::filesystem::path& run_dir);
nlohmann::json run_evaluate_uncertainty(const Config& config, const std::filesystem::path& run_dir);

}  // namespace cfaudit::experiment
