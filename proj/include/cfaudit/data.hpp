#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace cfaudit::data {

/// Points (e.g. two-moons coordinates) or [C,H,W] images with values in [0,1].
enum class Modality { vector, image };

std::string to_string(Modality modality);
Modality modality_from_string(std::string_view text);

struct LabeledSample {
  torch::Tensor image;  // [D] for vectors, [C,H,W] for images
  std::int64_t label = 0;
  std::optional<std::vector<std::int8_t>> concepts;  // 1 positive, 0 negative, -1 uncertain/missing
  std::string id;
  std::string split;
};

/// Immutable, non-empty collection of samples sharing one shape.
class Dataset {
 public:
  Dataset(std::vector<LabeledSample> samples, std::int64_t class_count, Modality modality,
          std::vector<std::string> concept_names = {});

  std::size_t size() const noexcept { return samples_.size(); }
  const LabeledSample& operator[](std::size_t i) const { return samples_.at(i); }
  const std::vector<LabeledSample>& samples() const noexcept { return samples_; }
  std::int64_t class_count() const noexcept { return class_count_; }
  Modality modality() const noexcept { return modality_; }
  const std::vector<std::string>& concept_names() const noexcept { return concept_names_; }
  std::vector<std::int64_t> sample_shape() const;

  /// All inputs stacked as [N, ...].
  const torch::Tensor& images() const noexcept { return images_; }
  torch::Tensor images(std::span<const std::size_t> indices) const;
  /// Labels as int64 [N].
  const torch::Tensor& labels() const noexcept { return labels_; }
  std::vector<std::size_t> class_histogram() const;

  Dataset subset(std::span<const std::size_t> indices) const;
  /// Seeded shuffle, then the first `fraction` of samples go to the first part.
  std::pair<Dataset, Dataset> split(double fraction, std::uint64_t seed) const;
  /// Samples carrying the given split tag; throws when none match.
  Dataset with_split(std::string_view tag) const;
  std::optional<std::size_t> find(std::string_view id) const;
  /// Column of concept labels for concept k (-1 where missing).
  std::vector<std::int8_t> concept_column(std::size_t k) const;

 private:
  std::vector<LabeledSample> samples_;
  std::int64_t class_count_;
  Modality modality_;
  std::vector<std::string> concept_names_;
  torch::Tensor images_;
  torch::Tensor labels_;
};

/// Variable-size set of same-shaped patches for one subject.
struct PatchBag {
  std::string subject_id;
  torch::Tensor patches;  // [n, ...patch shape]
  std::vector<double> outcome;
  std::vector<std::string> member_ids;                 // provenance when built from a dataset
  std::vector<std::vector<std::int64_t>> origins;      // corner of each patch when cut from a volume

  std::size_t size() const { return patches.defined() ? static_cast<std::size_t>(patches.size(0)) : 0; }
};

// ---------------------------------------------------------------- generators

/// Two interleaving unit half-circles; the second is offset by (1, 0.5).
Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed);

/// Distance from a point to the centre arc of each moon.
struct MoonDistances {
  double to_upper;  // class 0 arc
  double to_lower;  // class 1 arc
};
MoonDistances moon_distances(double x, double y);

struct GlyphOptions {
  std::int64_t size = 28;
  std::vector<int> digits = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  double thickness_min = 0.06;  // stroke half-width in glyph units
  double thickness_max = 0.14;
  double jitter = 0.08;         // max translation in glyph units
  double max_shear = 0.25;
  double noise = 0.02;
};

/// Procedurally rendered digits with class label = position of the digit in `digits`.
/// Concepts: thick_stroke, has_loop, slanted.
Dataset make_glyph_digits(std::size_t n, std::uint64_t seed, const GlyphOptions& options = {});

struct MorphOptions {
  std::int64_t size = 28;
  double thickness_min = 0.06;
  double thickness_max = 0.14;
  double jitter = 0.06;
  double max_shear = 0.25;
  double noise = 0.02;
  double ambiguous_fraction = 0.3;  // share of samples with closure drawn uniformly in [0,1]
};

/// "3"-to-"8" continuum: the two left arcs of an 8 are drawn to a random extent.
/// Label 1 ("8") when the mean closure exceeds 0.5.
/// Concepts: upper_closed, lower_closed, thick_stroke, slanted.
Dataset make_loop_morphs(std::size_t n, std::uint64_t seed, const MorphOptions& options = {});

// ---------------------------------------------------------------- bags & patches

using SamplePredicate = std::function<bool(const LabeledSample&)>;

struct BagOptions {
  std::size_t bag_count = 100;
  std::size_t min_size = 5;
  std::size_t max_size = 15;
};

/// Bags of samples drawn without replacement within a bag; outcome = {any member satisfies rule}.
std::vector<PatchBag> make_bags(std::span<const LabeledSample> base, const BagOptions& options,
                                const SamplePredicate& positive_rule, std::uint64_t seed);
std::vector<PatchBag> make_bags(const Dataset& base, const BagOptions& options,
                                const SamplePredicate& positive_rule, std::uint64_t seed);

/// Sliding-window patches (isotropic stride, raster order) from a [H,W] or [D,H,W] volume.
/// A final window is aligned to the far edge so the patches cover the whole volume.
/// When more than `max_patches` windows exist, a uniform random subset is kept (in raster order).
PatchBag extract_patches(const torch::Tensor& volume, std::int64_t patch_size, double overlap_fraction,
                         std::size_t max_patches, std::uint64_t seed, std::string subject_id = "subject");

std::int64_t patch_stride(std::int64_t patch_size, double overlap_fraction);

/// Bin of a posterior c under N equal-width bins: floor(c*N) clamped to N-1.
std::int64_t bin_index(double c, std::int64_t bins);
double bin_center(std::int64_t index, std::int64_t bins);

// ---------------------------------------------------------------- manifests

inline constexpr const char* kManifestFormat = "cfaudit.manifest/1";

/// Writes `manifest.json` into `directory`; images go to `images/<id>.png`, vectors inline.
/// `soft_labels` (one probability vector per sample) adds the soft_label column.
void save_manifest(const Dataset& dataset, const std::filesystem::path& directory,
                   const std::vector<std::vector<double>>* soft_labels = nullptr);

struct LoadedManifest {
  Dataset dataset;
  std::vector<std::vector<double>> soft_labels;  // empty unless the manifest has the column
};
LoadedManifest load_manifest(const std::filesystem::path& manifest_path);

void save_bags(const std::vector<PatchBag>& bags, const std::filesystem::path& path);
std::vector<PatchBag> load_bags(const std::filesystem::path& path);

}  // namespace cfaudit::data
