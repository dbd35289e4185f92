#include "cfaudit/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include <json.hpp>

#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"

namespace cfaudit::data {

using nlohmann::json;

std::string to_string(Modality modality) { return modality == Modality::image ? "image" : "vector"; }

Modality modality_from_string(std::string_view text) {
  if (text == "image") return Modality::image;
  if (text == "vector") return Modality::vector;
  throw ArgumentError("unknown modality: " + std::string(text));
}

// ============================================================== Dataset

Dataset::Dataset(std::vector<LabeledSample> samples, std::int64_t class_count, Modality modality,
                 std::vector<std::string> concept_names)
    : samples_(std::move(samples)),
      class_count_(class_count),
      modality_(modality),
      concept_names_(std::move(concept_names)) {
  if (samples_.empty()) throw ArgumentError("dataset must not be empty");
  if (class_count_ < 1) throw ArgumentError("class_count must be positive");
  const auto shape = samples_.front().image.sizes().vec();
  std::vector<torch::Tensor> stack;
  stack.reserve(samples_.size());
  for (const auto& s : samples_) {
    if (!s.image.defined()) throw ArgumentError("sample " + s.id + " has no image");
    if (s.image.sizes().vec() != shape) throw ArgumentError("inconsistent sample shape at " + s.id);
    if (s.label < 0 || s.label >= class_count_)
      throw ArgumentError("label out of range at " + s.id + ": " + std::to_string(s.label));
    if (s.concepts) {
      if (s.concepts->size() != concept_names_.size())
        throw ArgumentError("concept vector length mismatch at " + s.id);
      for (auto c : *s.concepts)
        if (c < -1 || c > 1) throw ArgumentError("concept labels must be -1, 0 or 1 at " + s.id);
    }
    stack.push_back(s.image.to(torch::kFloat32));
  }
  images_ = torch::stack(stack).contiguous();
  if (!torch::isfinite(images_).all().item<bool>()) throw ArgumentError("dataset contains non-finite values");
  if (modality_ == Modality::image) {
    if (images_.min().item<float>() < 0.0f || images_.max().item<float>() > 1.0f)
      throw ArgumentError("image values must lie in [0,1]");
  }
  std::vector<std::int64_t> labels(samples_.size());
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    labels[i] = samples_[i].label;
    samples_[i].image = images_[static_cast<std::int64_t>(i)];
  }
  labels_ = torch::tensor(labels, torch::kInt64);
}

std::vector<std::int64_t> Dataset::sample_shape() const { return samples_.front().image.sizes().vec(); }

torch::Tensor Dataset::images(std::span<const std::size_t> indices) const {
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  for (auto i : idx)
    if (i < 0 || static_cast<std::size_t>(i) >= size()) throw ArgumentError("sample index out of range");
  return images_.index_select(0, torch::tensor(idx, torch::kInt64));
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(class_count_), 0);
  for (const auto& s : samples_) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  std::vector<LabeledSample> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(samples_.at(i));
  return Dataset(std::move(picked), class_count_, modality_, concept_names_);
}

std::pair<Dataset, Dataset> Dataset::split(double fraction, std::uint64_t seed) const {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ArgumentError("split fraction must be in (0,1)");
  std::vector<std::size_t> order(size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(size())));
  cut = std::clamp<std::size_t>(cut, 1, size() - 1);
  std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> second(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  return {subset(first), subset(second)};
}

Dataset Dataset::with_split(std::string_view tag) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i)
    if (samples_[i].split == tag) idx.push_back(i);
  if (idx.empty()) throw ArgumentError("no samples tagged with split '" + std::string(tag) + "'");
  return subset(idx);
}

std::optional<std::size_t> Dataset::find(std::string_view id) const {
  for (std::size_t i = 0; i < size(); ++i)
    if (samples_[i].id == id) return i;
  return std::nullopt;
}

std::vector<std::int8_t> Dataset::concept_column(std::size_t k) const {
  if (k >= concept_names_.size()) throw ArgumentError("concept index out of range");
  std::vector<std::int8_t> column(size(), -1);
  for (std::size_t i = 0; i < size(); ++i)
    if (samples_[i].concepts) column[i] = (*samples_[i].concepts)[k];
  return column;
}

// ============================================================== two moons

Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("two-moons needs n >= 2");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ArgumentError("noise must be a finite value >= 0");
  const std::size_t n_upper = n / 2;
  const std::size_t n_lower = n - n_upper;
  auto angle = [](std::size_t i, std::size_t count) {
    return count == 1 ? 0.0 : std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1);
  };

  std::vector<std::array<double, 2>> points;
  std::vector<std::int64_t> labels;
  points.reserve(n);
  for (std::size_t i = 0; i < n_upper; ++i) {
    const double t = angle(i, n_upper);
    points.push_back({std::cos(t), std::sin(t)});
    labels.push_back(0);
  }
  for (std::size_t i = 0; i < n_lower; ++i) {
    const double t = angle(i, n_lower);
    points.push_back({1.0 - std::cos(t), 0.5 - std::sin(t)});
    labels.push_back(1);
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<LabeledSample> samples;
  samples.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& p = points[order[k]];
    double x = p[0];
    double y = p[1];
    if (noise > 0.0) {
      x += noise * gauss(rng);
      y += noise * gauss(rng);
    }
    LabeledSample s;
    s.image = torch::tensor({static_cast<float>(x), static_cast<float>(y)}, torch::kFloat32);
    s.label = labels[order[k]];
    s.id = "moon-" + std::to_string(k);
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(samples), 2, Modality::vector);
}

MoonDistances moon_distances(double x, double y) {
  auto arc_distance = [](double qx, double qy, bool upper) {
    const bool on_arc_side = upper ? qy >= 0.0 : qy <= 0.0;
    if (on_arc_side) return std::abs(std::hypot(qx, qy) - 1.0);
    return std::min(std::hypot(qx - 1.0, qy), std::hypot(qx + 1.0, qy));
  };
  return {arc_distance(x, y, true), arc_distance(x - 1.0, y - 0.5, false)};
}

// ============================================================== glyph rendering

namespace {

struct Point {
  double x;
  double y;
};
using Polyline = std::vector<Point>;

Polyline line(Point a, Point b) { return {a, b}; }

Polyline arc(double cx, double cy, double rx, double ry, double from, double to, int steps = 14) {
  Polyline out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    const double t = from + (to - from) * static_cast<double>(i) / steps;
    out.push_back({cx + rx * std::cos(t), cy + ry * std::sin(t)});
  }
  return out;
}

constexpr double kPi = std::numbers::pi;

// Glyph box is the unit square, y pointing down; angles follow (cos t, sin t) in that frame.
std::vector<Polyline> digit_strokes(int digit) {
  switch (digit) {
    case 0:
      return {arc(0.5, 0.5, 0.19, 0.31, 0.0, 2.0 * kPi, 28)};
    case 1:
      return {line({0.52, 0.18}, {0.52, 0.82}), line({0.40, 0.30}, {0.52, 0.18})};
    case 2:
      return {arc(0.5, 0.35, 0.18, 0.16, kPi, 2.0 * kPi), line({0.68, 0.35}, {0.30, 0.82}),
              line({0.30, 0.82}, {0.72, 0.82})};
    case 3:
      return {arc(0.5, 0.33, 0.17, 0.15, -0.85 * kPi, 0.5 * kPi),
              arc(0.5, 0.65, 0.19, 0.17, -0.5 * kPi, 0.85 * kPi)};
    case 4:
      return {line({0.62, 0.82}, {0.62, 0.18}), line({0.62, 0.18}, {0.28, 0.62}),
              line({0.28, 0.62}, {0.74, 0.62})};
    case 5:
      return {line({0.70, 0.18}, {0.35, 0.18}), line({0.35, 0.18}, {0.33, 0.48}),
              arc(0.5, 0.64, 0.19, 0.18, -0.72 * kPi, 0.8 * kPi)};
    case 6:
      return {arc(0.55, 0.52, 0.23, 0.33, -kPi, -0.35 * kPi), line({0.32, 0.52}, {0.32, 0.65}),
              arc(0.5, 0.65, 0.18, 0.17, 0.0, 2.0 * kPi, 24)};
    case 7:
      return {line({0.28, 0.18}, {0.72, 0.18}), line({0.72, 0.18}, {0.42, 0.82})};
    case 8:
      return {arc(0.5, 0.33, 0.17, 0.15, 0.0, 2.0 * kPi, 24), arc(0.5, 0.65, 0.19, 0.17, 0.0, 2.0 * kPi, 24)};
    case 9:
      return {arc(0.5, 0.35, 0.18, 0.17, 0.0, 2.0 * kPi, 24), line({0.68, 0.35}, {0.60, 0.82})};
    default:
      throw ArgumentError("digit must be in 0..9");
  }
}

bool digit_has_loop(int digit) { return digit == 0 || digit == 6 || digit == 8 || digit == 9; }

// A "3" whose left arcs (closing it into an "8") are drawn to fractions `upper` and `lower`.
std::vector<Polyline> morph_strokes(double upper, double lower) {
  std::vector<Polyline> strokes = digit_strokes(3);
  const double span = 0.65 * kPi;
  if (upper > 1e-3) strokes.push_back(arc(0.5, 0.33, 0.17, 0.15, 1.15 * kPi, 1.15 * kPi - upper * span));
  if (lower > 1e-3) strokes.push_back(arc(0.5, 0.65, 0.19, 0.17, 0.85 * kPi, 0.85 * kPi + lower * span));
  return strokes;
}

double segment_distance(Point p, Point a, Point b) {
  const double vx = b.x - a.x;
  const double vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

struct GlyphPose {
  double thickness;
  double shear;
  double dx;
  double dy;
  double scale;
};

torch::Tensor render(const std::vector<Polyline>& strokes, const GlyphPose& pose, std::int64_t size,
                     double noise, std::mt19937_64& rng) {
  auto image = torch::zeros({1, size, size}, torch::kFloat32);
  auto acc = image.accessor<float, 3>();
  const double pixel = 1.0 / static_cast<double>(size);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (std::int64_t row = 0; row < size; ++row) {
    for (std::int64_t col = 0; col < size; ++col) {
      // pixel centre -> glyph frame (undo translation, scale and slant)
      const double u = (static_cast<double>(col) + 0.5) * pixel;
      const double v = (static_cast<double>(row) + 0.5) * pixel;
      const double gy = 0.5 + (v - pose.dy - 0.5) / pose.scale;
      const double gx = 0.5 + (u - pose.dx - 0.5) / pose.scale - pose.shear * (0.5 - gy);
      double d = 1e9;
      for (const auto& stroke : strokes)
        for (std::size_t k = 0; k + 1 < stroke.size(); ++k)
          d = std::min(d, segment_distance({gx, gy}, stroke[k], stroke[k + 1]));
      double value = std::clamp(1.0 - (d - pose.thickness) / pixel, 0.0, 1.0);
      if (noise > 0.0) value = std::clamp(value + noise * gauss(rng), 0.0, 1.0);
      acc[0][row][col] = static_cast<float>(value);
    }
  }
  return io::quantize8(image);
}

GlyphPose sample_pose(std::mt19937_64& rng, double tmin, double tmax, double jitter, double max_shear) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  GlyphPose pose{};
  pose.thickness = tmin + (tmax - tmin) * u01(rng);
  pose.shear = max_shear * (2.0 * u01(rng) - 1.0);
  pose.dx = jitter * (2.0 * u01(rng) - 1.0);
  pose.dy = jitter * (2.0 * u01(rng) - 1.0);
  pose.scale = 0.9 + 0.2 * u01(rng);
  return pose;
}

std::int8_t graded(double value, double low, double high) {
  if (value >= high) return 1;
  if (value <= low) return 0;
  return -1;
}

}  // namespace

Dataset make_glyph_digits(std::size_t n, std::uint64_t seed, const GlyphOptions& options) {
  if (n == 0) throw ArgumentError("n must be positive");
  if (options.digits.empty()) throw ArgumentError("at least one digit required");
  if (options.size < 8) throw ArgumentError("glyph size must be >= 8");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, options.digits.size() - 1);
  const double tmid = 0.5 * (options.thickness_min + options.thickness_max);
  const double tband = 0.1 * (options.thickness_max - options.thickness_min);

  std::vector<LabeledSample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = pick(rng);
    const int digit = options.digits[cls];
    const auto pose = sample_pose(rng, options.thickness_min, options.thickness_max, options.jitter,
                                  options.max_shear);
    LabeledSample s;
    s.image = render(digit_strokes(digit), pose, options.size, options.noise, rng);
    s.label = static_cast<std::int64_t>(cls);
    s.concepts = std::vector<std::int8_t>{graded(pose.thickness, tmid - tband, tmid + tband),
                                          static_cast<std::int8_t>(digit_has_loop(digit) ? 1 : 0),
                                          graded(std::abs(pose.shear), 0.3 * options.max_shear,
                                                 0.5 * options.max_shear)};
    s.id = "digit-" + std::to_string(i);
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(samples), static_cast<std::int64_t>(options.digits.size()), Modality::image,
                 {"thick_stroke", "has_loop", "slanted"});
}

Dataset make_loop_morphs(std::size_t n, std::uint64_t seed, const MorphOptions& options) {
  if (n == 0) throw ArgumentError("n must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double tmid = 0.5 * (options.thickness_min + options.thickness_max);
  const double tband = 0.1 * (options.thickness_max - options.thickness_min);

  std::vector<LabeledSample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double upper = 0.0;
    double lower = 0.0;
    if (u01(rng) < options.ambiguous_fraction) {
      upper = u01(rng);
      lower = u01(rng);
    } else if (u01(rng) < 0.5) {
      upper = 0.15 * u01(rng);
      lower = 0.15 * u01(rng);
    } else {
      upper = 0.85 + 0.15 * u01(rng);
      lower = 0.85 + 0.15 * u01(rng);
    }
    const auto pose = sample_pose(rng, options.thickness_min, options.thickness_max, options.jitter,
                                  options.max_shear);
    LabeledSample s;
    s.image = render(morph_strokes(upper, lower), pose, options.size, options.noise, rng);
    s.label = 0.5 * (upper + lower) > 0.5 ? 1 : 0;
    s.concepts = std::vector<std::int8_t>{graded(upper, 0.4, 0.6), graded(lower, 0.4, 0.6),
                                          graded(pose.thickness, tmid - tband, tmid + tband),
                                          graded(std::abs(pose.shear), 0.3 * options.max_shear,
                                                 0.5 * options.max_shear)};
    s.id = "morph-" + std::to_string(i);
    samples.push_back(std::move(s));
  }
  return Dataset(std::move(samples), 2, Modality::image,
                 {"upper_closed", "lower_closed", "thick_stroke", "slanted"});
}

// ============================================================== bags & patches

std::vector<PatchBag> make_bags(std::span<const LabeledSample> base, const BagOptions& options,
                                const SamplePredicate& positive_rule, std::uint64_t seed) {
  if (base.empty()) throw ArgumentError("make_bags: base dataset is empty");
  if (options.min_size < 1 || options.max_size < options.min_size)
    throw ArgumentError("make_bags: need max_size >= min_size >= 1");
  if (!positive_rule) throw ArgumentError("make_bags: positive rule required");
  std::mt19937_64 rng(seed);
  const std::size_t cap = std::min(options.max_size, base.size());
  const std::size_t floor_size = std::min(options.min_size, cap);
  std::uniform_int_distribution<std::size_t> size_dist(floor_size, cap);

  std::vector<PatchBag> bags;
  bags.reserve(options.bag_count);
  std::vector<std::size_t> pool(base.size());
  std::iota(pool.begin(), pool.end(), 0);
  for (std::size_t b = 0; b < options.bag_count; ++b) {
    const std::size_t count = size_dist(rng);
    // partial Fisher-Yates: first `count` entries become the bag
    for (std::size_t k = 0; k < count; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
    }
    PatchBag bag;
    bag.subject_id = "bag-" + std::to_string(b);
    std::vector<torch::Tensor> patches;
    bool positive = false;
    for (std::size_t k = 0; k < count; ++k) {
      const auto& s = base[pool[k]];
      patches.push_back(s.image);
      bag.member_ids.push_back(s.id);
      positive = positive || positive_rule(s);
    }
    bag.patches = torch::stack(patches);
    bag.outcome = {positive ? 1.0 : 0.0};
    bags.push_back(std::move(bag));
  }
  return bags;
}

std::vector<PatchBag> make_bags(const Dataset& base, const BagOptions& options,
                                const SamplePredicate& positive_rule, std::uint64_t seed) {
  return make_bags(std::span<const LabeledSample>(base.samples()), options, positive_rule, seed);
}

std::int64_t patch_stride(std::int64_t patch_size, double overlap_fraction) {
  if (patch_size < 1) throw ArgumentError("patch size must be positive");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
    throw ArgumentError("overlap fraction must lie in [0,1)");
  const auto stride = static_cast<std::int64_t>(std::floor(static_cast<double>(patch_size) * (1.0 - overlap_fraction)));
  return std::max<std::int64_t>(stride, 1);
}

namespace {

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t patch, std::int64_t stride) {
  std::vector<std::int64_t> starts;
  for (std::int64_t s = 0; s + patch <= extent; s += stride) starts.push_back(s);
  if (starts.back() + patch < extent) starts.push_back(extent - patch);
  return starts;
}

}  // namespace

PatchBag extract_patches(const torch::Tensor& volume, std::int64_t patch_size, double overlap_fraction,
                         std::size_t max_patches, std::uint64_t seed, std::string subject_id) {
  if (volume.dim() != 2 && volume.dim() != 3) throw ArgumentError("volume must be 2-D or 3-D");
  if (max_patches == 0) throw ArgumentError("max_patches must be positive");
  const auto stride = patch_stride(patch_size, overlap_fraction);
  for (auto extent : volume.sizes())
    if (patch_size > extent) throw ArgumentError("patch larger than volume");

  std::vector<std::vector<std::int64_t>> axes;
  for (auto extent : volume.sizes()) axes.push_back(window_starts(extent, patch_size, stride));

  std::vector<std::vector<std::int64_t>> origins;
  if (volume.dim() == 2) {
    for (auto r : axes[0])
      for (auto c : axes[1]) origins.push_back({r, c});
  } else {
    for (auto d : axes[0])
      for (auto r : axes[1])
        for (auto c : axes[2]) origins.push_back({d, r, c});
  }

  if (origins.size() > max_patches) {
    std::vector<std::size_t> order(origins.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(max_patches);
    std::sort(order.begin(), order.end());
    std::vector<std::vector<std::int64_t>> kept;
    kept.reserve(max_patches);
    for (auto i : order) kept.push_back(origins[i]);
    origins = std::move(kept);
  }

  std::vector<torch::Tensor> patches;
  patches.reserve(origins.size());
  for (const auto& o : origins) {
    torch::Tensor p = volume;
    for (std::int64_t axis = 0; axis < volume.dim(); ++axis)
      p = p.narrow(axis, o[static_cast<std::size_t>(axis)], patch_size);
    patches.push_back(p.contiguous());
  }
  PatchBag bag;
  bag.subject_id = std::move(subject_id);
  bag.patches = torch::stack(patches);
  bag.origins = std::move(origins);
  return bag;
}

std::int64_t bin_index(double c, std::int64_t bins) {
  if (bins < 2) throw ArgumentError("need at least two bins");
  if (!(c >= 0.0 && c <= 1.0)) throw ArgumentError("c must lie in [0,1]");
  const auto index = static_cast<std::int64_t>(std::floor(c * static_cast<double>(bins)));
  return std::min(index, bins - 1);
}

double bin_center(std::int64_t index, std::int64_t bins) {
  if (bins < 2 || index < 0 || index >= bins) throw ArgumentError("bin index out of range");
  return (static_cast<double>(index) + 0.5) / static_cast<double>(bins);
}

// ============================================================== manifests

namespace {

std::vector<double> tensor_values(const torch::Tensor& t) {
  auto flat = t.detach().to(torch::kFloat64).contiguous().view(-1);
  return {flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel()};
}

torch::Tensor values_tensor(const std::vector<double>& values, const std::vector<std::int64_t>& shape) {
  return torch::tensor(values, torch::kFloat64).to(torch::kFloat32).view(shape).clone();
}

std::string safe_file_stem(const std::string& id) {
  std::string out = id;
  for (auto& ch : out)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.')) ch = '_';
  return out;
}

}  // namespace

void save_manifest(const Dataset& dataset, const std::filesystem::path& directory,
                   const std::vector<std::vector<double>>* soft_labels) {
  namespace fs = std::filesystem;
  if (soft_labels && soft_labels->size() != dataset.size())
    throw ArgumentError("soft_labels must have one entry per sample");
  fs::create_directories(directory);
  const bool images = dataset.modality() == Modality::image;
  if (images) fs::create_directories(directory / "images");

  json manifest;
  manifest["format"] = kManifestFormat;
  manifest["modality"] = to_string(dataset.modality());
  manifest["class_count"] = dataset.class_count();
  manifest["shape"] = dataset.sample_shape();
  manifest["concept_names"] = dataset.concept_names();
  json rows = json::array();
  std::set<std::string> used;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    json row;
    row["id"] = s.id;
    row["label"] = s.label;
    if (!s.split.empty()) row["split"] = s.split;
    if (s.concepts) row["concepts"] = *s.concepts;
    if (images) {
      std::string stem = safe_file_stem(s.id);
      while (!used.insert(stem).second) stem += "_";
      const std::string rel = "images/" + stem + ".png";
      io::write_png(directory / rel, s.image);
      row["image"] = rel;
    } else {
      row["values"] = tensor_values(s.image);
    }
    if (soft_labels) row["soft_label"] = (*soft_labels)[i];
    rows.push_back(std::move(row));
  }
  manifest["samples"] = std::move(rows);
  io::write_text(directory / "manifest.json", manifest.dump(1));
}

LoadedManifest load_manifest(const std::filesystem::path& manifest_path) {
  json manifest;
  try {
    manifest = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw ArgumentError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kManifestFormat)
    throw ArgumentError("unsupported manifest format in " + manifest_path.string());
  const auto base = manifest_path.parent_path();
  const auto modality = modality_from_string(manifest.at("modality").get<std::string>());
  const auto shape = manifest.at("shape").get<std::vector<std::int64_t>>();
  const auto names = manifest.value("concept_names", std::vector<std::string>{});

  std::vector<std::vector<double>> soft_labels;
  std::vector<LabeledSample> samples;
  bool any_soft = false;
  for (const auto& row : manifest.at("samples")) {
    LabeledSample s;
    s.id = row.at("id").get<std::string>();
    s.label = row.at("label").get<std::int64_t>();
    s.split = row.value("split", "");
    if (row.contains("concepts")) s.concepts = row.at("concepts").get<std::vector<std::int8_t>>();
    if (row.contains("image")) {
      s.image = io::read_png(base / row.at("image").get<std::string>());
      if (s.image.sizes().vec() != shape) s.image = s.image.view(shape);
    } else {
      s.image = values_tensor(row.at("values").get<std::vector<double>>(), shape);
    }
    if (row.contains("soft_label")) {
      any_soft = true;
      soft_labels.push_back(row.at("soft_label").get<std::vector<double>>());
    }
    samples.push_back(std::move(s));
  }
  if (any_soft && soft_labels.size() != samples.size())
    throw ArgumentError("soft_label column must be present on every row");
  return {Dataset(std::move(samples), manifest.at("class_count").get<std::int64_t>(), modality, names),
          std::move(soft_labels)};
}

void save_bags(const std::vector<PatchBag>& bags, const std::filesystem::path& path) {
  json doc;
  doc["format"] = "cfaudit.bags/1";
  json rows = json::array();
  for (const auto& bag : bags) {
    json row;
    row["subject_id"] = bag.subject_id;
    row["outcome"] = bag.outcome;
    row["patch_shape"] = std::vector<std::int64_t>(bag.patches.sizes().begin() + 1, bag.patches.sizes().end());
    row["member_ids"] = bag.member_ids;
    json patches = json::array();
    for (std::int64_t j = 0; j < bag.patches.size(0); ++j) patches.push_back(tensor_values(bag.patches[j]));
    row["patches"] = std::move(patches);
    if (!bag.origins.empty()) row["origins"] = bag.origins;
    rows.push_back(std::move(row));
  }
  doc["bags"] = std::move(rows);
  io::write_text(path, doc.dump());
}

std::vector<PatchBag> load_bags(const std::filesystem::path& path) {
  const auto doc = json::parse(io::read_text(path));
  if (doc.value("format", "") != "cfaudit.bags/1") throw ArgumentError("unsupported bag file " + path.string());
  std::vector<PatchBag> bags;
  for (const auto& row : doc.at("bags")) {
    PatchBag bag;
    bag.subject_id = row.at("subject_id").get<std::string>();
    bag.outcome = row.at("outcome").get<std::vector<double>>();
    bag.member_ids = row.value("member_ids", std::vector<std::string>{});
    bag.origins = row.value("origins", std::vector<std::vector<std::int64_t>>{});
    const auto shape = row.at("patch_shape").get<std::vector<std::int64_t>>();
    std::vector<torch::Tensor> patches;
    for (const auto& p : row.at("patches")) patches.push_back(values_tensor(p.get<std::vector<double>>(), shape));
    if (patches.empty()) throw ArgumentError("bag " + bag.subject_id + " has no patches");
    bag.patches = torch::stack(patches);
    bags.push_back(std::move(bag));
  }
  return bags;
}

}  // namespace cfaudit::data
