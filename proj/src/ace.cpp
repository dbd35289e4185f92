#include "cfaudit/ace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "cfaudit/common.hpp"

namespace cfaudit::ace {

using nlohmann::json;

namespace {

constexpr const char* kPoolFormat = "cfaudit.ace-pool/1";

std::vector<double> column(const torch::Tensor& t) { return metrics::to_vector(t.detach().reshape({-1})); }

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot read " + path.string());
  return json::parse(in);
}

}  // namespace

// ============================================================== pool

torch::Tensor AugmentationPool::images() const {
  if (entries.empty()) throw StateError("augmentation pool is empty");
  std::vector<torch::Tensor> rows;
  for (const auto& e : entries) rows.push_back(e.image);
  return torch::stack(rows);
}

torch::Tensor AugmentationPool::soft_labels() const {
  auto out = torch::zeros({static_cast<std::int64_t>(entries.size()), class_count});
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (std::int64_t k = 0; k < class_count; ++k)
      out[static_cast<std::int64_t>(i)][k] = entries[i].soft_label[static_cast<std::size_t>(k)];
  return out;
}

void AugmentationPool::save(const std::filesystem::path& directory) const {
  std::vector<data::LabeledSample> samples;
  std::vector<std::vector<double>> labels;
  json provenance = json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    data::LabeledSample s;
    s.image = e.image;
    s.label = std::max_element(e.soft_label.begin(), e.soft_label.end()) - e.soft_label.begin();
    s.id = e.source_id + "~aug" + std::to_string(i);
    s.split = "augmented";
    samples.push_back(std::move(s));
    labels.push_back(e.soft_label);
    provenance.push_back({{"id", samples.back().id}, {"source_id", e.source_id}, {"sampled_c", e.sampled_c}});
  }
  const data::Dataset ds(std::move(samples), class_count, modality);
  data::save_manifest(ds, directory, &labels);
  std::ofstream out(directory / "pool.json");
  out << json{{"format", kPoolFormat},
              {"class_count", class_count},
              {"target_class", target_class},
              {"entries", provenance}}
             .dump(1);
}

AugmentationPool AugmentationPool::load(const std::filesystem::path& directory) {
  const auto meta = read_json(directory / "pool.json");
  if (meta.value("format", "") != kPoolFormat) throw ArgumentError("not an augmentation pool: " + directory.string());
  auto loaded = data::load_manifest(directory / "manifest.json");
  if (loaded.soft_labels.size() != loaded.dataset.size()) throw ArgumentError("pool manifest lacks soft labels");
  const auto& prov = meta.at("entries");
  if (prov.size() != loaded.dataset.size()) throw ArgumentError("pool provenance does not match the manifest");
  AugmentationPool pool;
  pool.class_count = meta.at("class_count").get<std::int64_t>();
  pool.target_class = meta.at("target_class").get<std::int64_t>();
  pool.modality = loaded.dataset.modality();
  for (std::size_t i = 0; i < loaded.dataset.size(); ++i) {
    AugmentationEntry e;
    e.image = loaded.dataset[i].image;
    e.soft_label = loaded.soft_labels[i];
    e.source_id = prov[i].at("source_id").get<std::string>();
    e.sampled_c = prov[i].at("sampled_c").get<double>();
    pool.entries.push_back(std::move(e));
  }
  return pool;
}

std::int64_t complement_class(const classifier::Classifier& model, const data::LabeledSample& source,
                              std::int64_t target_class) {
  if (source.label != target_class) return source.label;
  torch::NoGradGuard no_grad;
  auto p = model.predict(source.image.unsqueeze(0))[0].clone();
  p[target_class] = -1.0;
  return p.argmax().item<std::int64_t>();
}

std::vector<double> soft_label(double c, std::int64_t target_class, std::int64_t complement, std::int64_t class_count) {
  if (!(c >= 0 && c <= 1)) throw ArgumentError("condition must lie in [0, 1]");
  if (target_class < 0 || target_class >= class_count || complement < 0 || complement >= class_count ||
      complement == target_class)
    throw ArgumentError("soft label needs two distinct classes in range");
  std::vector<double> out(static_cast<std::size_t>(class_count), 0.0);
  out[static_cast<std::size_t>(target_class)] = c;
  out[static_cast<std::size_t>(complement)] = 1.0 - c;
  return out;
}

AugmentationPool build_augmentation_pool(const pce::ExplainerModel& explainer, const classifier::Classifier& model,
                                         const data::Dataset& sources, std::int64_t per_source, std::uint64_t seed) {
  if (per_source < 1) throw ArgumentError("per_source must be at least 1");
  if (!explainer.trained()) throw StateError("explainer is not trained");
  if (model.class_count() < 2) throw ArgumentError("augmentation needs at least two classes");
  const auto k = explainer.config().target_class;

  AugmentationPool pool;
  pool.class_count = model.class_count();
  pool.target_class = k;
  pool.modality = sources.modality();

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<std::int64_t> rows;
  std::vector<double> cs;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto kc = complement_class(model, sources[i], k);
    for (std::int64_t j = 0; j < per_source; ++j) {
      AugmentationEntry e;
      e.sampled_c = uniform(rng);
      e.soft_label = soft_label(e.sampled_c, k, kc, pool.class_count);
      e.source_id = sources[i].id;
      pool.entries.push_back(std::move(e));
      rows.push_back(static_cast<std::int64_t>(i));
      cs.push_back(pool.entries.back().sampled_c);
    }
  }

  torch::NoGradGuard no_grad;
  const auto& all = sources.images();
  constexpr std::int64_t chunk = 256;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const auto end = std::min(rows.size(), start + chunk);
    const auto idx = torch::tensor(std::vector<std::int64_t>(rows.begin() + static_cast<long>(start),
                                                             rows.begin() + static_cast<long>(end)));
    const auto c = torch::tensor(std::vector<double>(cs.begin() + static_cast<long>(start),
                                                     cs.begin() + static_cast<long>(end)),
                                 torch::kFloat32);
    const auto generated = explainer.explain(all.index_select(0, idx), c).to(all.scalar_type());
    for (std::size_t i = start; i < end; ++i)
      pool.entries[i].image = generated[static_cast<std::int64_t>(i - start)].clone();
  }
  return pool;
}

// ============================================================== fine-tuning

void AceConfig::validate() const {
  if (epochs < 1) throw ConfigError("ace epochs must be positive");
  if (learning_rate < 0) throw ConfigError("ace learning rate must be non-negative");
  if (!(mix_ratio >= 0 && mix_ratio <= 1)) throw ConfigError("mix_ratio must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (accuracy_drop_budget < 0) throw ConfigError("accuracy_drop_budget must be non-negative");
  if (ece_bins < 1) throw ConfigError("ece_bins must be positive");
  if (selection != "min_ece" && selection != "last") throw ConfigError("selection must be 'min_ece' or 'last'");
}

json AceConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate},
          {"mix_ratio", mix_ratio},
          {"batch_size", batch_size},
          {"accuracy_drop_budget", accuracy_drop_budget},
          {"ece_bins", ece_bins},
          {"selection", selection},
          {"seed", seed}};
}

AceConfig AceConfig::from_json(const json& j) {
  AceConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.mix_ratio = j.value("mix_ratio", c.mix_ratio);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.accuracy_drop_budget = j.value("accuracy_drop_budget", c.accuracy_drop_budget);
  c.ece_bins = j.value("ece_bins", c.ece_bins);
  c.selection = j.value("selection", c.selection);
  c.seed = j.value("seed", c.seed);
  return c;
}

json AceCheckpoint::to_json() const { return {{"epoch", epoch}, {"accuracy", accuracy}, {"ece", ece}}; }

json AceResult::to_json() const {
  json list = json::array();
  for (const auto& c : checkpoints) list.push_back(c.to_json());
  return {{"baseline", baseline.to_json()}, {"checkpoints", list}, {"selected_epoch", selected_epoch}};
}

std::vector<classifier::SoftLabeledBatch> mixed_batches(const data::Dataset& train, const AugmentationPool& pool,
                                                        double mix_ratio, std::int64_t batch_size,
                                                        std::uint64_t seed) {
  if (batch_size < 1) throw ArgumentError("batch_size must be positive");
  if (!(mix_ratio >= 0 && mix_ratio <= 1)) throw ArgumentError("mix_ratio must lie in [0, 1]");
  if (mix_ratio > 0 && pool.size() == 0) throw ArgumentError("augmentation pool is empty");
  auto synthetic = static_cast<std::int64_t>(std::llround(mix_ratio * static_cast<double>(batch_size)));
  if (mix_ratio > 0) synthetic = std::max<std::int64_t>(1, synthetic);
  const std::int64_t real = batch_size - synthetic;

  std::mt19937_64 rng(seed);
  std::vector<std::int64_t> real_order(train.size()), pool_order(pool.size());
  std::iota(real_order.begin(), real_order.end(), 0);
  std::iota(pool_order.begin(), pool_order.end(), 0);
  std::shuffle(real_order.begin(), real_order.end(), rng);
  std::shuffle(pool_order.begin(), pool_order.end(), rng);

  const auto n_batches = real > 0 ? (static_cast<std::int64_t>(train.size()) + real - 1) / real
                                  : (static_cast<std::int64_t>(pool.size()) + synthetic - 1) / synthetic;
  const auto one_hot = torch::one_hot(train.labels(), train.class_count()).to(torch::kFloat32);
  const auto pool_images = synthetic > 0 ? pool.images().to(train.images().scalar_type()) : torch::Tensor();
  const auto pool_labels = synthetic > 0 ? pool.soft_labels() : torch::Tensor();

  std::vector<classifier::SoftLabeledBatch> batches;
  std::size_t real_cursor = 0, pool_cursor = 0;
  for (std::int64_t b = 0; b < n_batches; ++b) {
    std::vector<std::int64_t> r, s;
    for (std::int64_t i = 0; i < real && real_cursor < real_order.size(); ++i) r.push_back(real_order[real_cursor++]);
    for (std::int64_t i = 0; i < synthetic; ++i) {
      if (pool_cursor == pool_order.size()) {
        pool_cursor = 0;
        std::shuffle(pool_order.begin(), pool_order.end(), rng);
      }
      s.push_back(pool_order[pool_cursor++]);
    }
    std::vector<torch::Tensor> images, targets;
    if (!r.empty()) {
      const auto idx = torch::tensor(r);
      images.push_back(train.images().index_select(0, idx));
      targets.push_back(one_hot.index_select(0, idx));
    }
    if (!s.empty()) {
      const auto idx = torch::tensor(s);
      images.push_back(pool_images.index_select(0, idx));
      targets.push_back(pool_labels.index_select(0, idx));
    }
    batches.push_back({torch::cat(images), torch::cat(targets)});
  }
  return batches;
}

AceResult ace_finetune(const classifier::Classifier& model, const data::Dataset& train, const AugmentationPool& pool,
                       const data::Dataset& validation, const AceConfig& config) {
  config.validate();
  if (pool.size() == 0) throw ArgumentError("augmentation pool is empty");
  if (pool.class_count != model.class_count()) throw ArgumentError("pool and classifier disagree on class count");

  auto measure = [&](const classifier::Classifier& m, std::int64_t epoch) {
    torch::NoGradGuard no_grad;
    const auto p = m.predict(validation.images());
    AceCheckpoint c;
    c.epoch = epoch;
    c.accuracy = p.argmax(1).eq(validation.labels()).to(torch::kFloat64).mean().item<double>();
    c.ece = metrics::expected_calibration_error(p, validation.labels(), config.ece_bins);
    return c;
  };

  AceResult result{model.clone(), measure(model, 0), {}, 0};
  std::vector<classifier::Classifier> snapshots;
  classifier::FinetuneConfig fc;
  fc.epochs = config.epochs;
  fc.learning_rate = config.learning_rate;
  const auto source = [&](std::int64_t epoch) {
    return mixed_batches(train, pool, config.mix_ratio, config.batch_size,
                         config.seed * 1000003ULL + static_cast<std::uint64_t>(epoch));
  };
  {
    std::lock_guard<std::mutex> lock(torch_seed_mutex());
    torch::manual_seed(config.seed);
  }
  classifier::finetune(model, source, fc, [&](std::int64_t epoch, const classifier::Classifier& current) {
    result.checkpoints.push_back(measure(current, epoch + 1));
    snapshots.push_back(current.clone());
    log::info("ace epoch " + std::to_string(epoch + 1) + " acc=" + std::to_string(result.checkpoints.back().accuracy) +
              " ece=" + std::to_string(result.checkpoints.back().ece));
  });

  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < result.checkpoints.size(); ++i) {
    const auto& c = result.checkpoints[i];
    if (c.accuracy < result.baseline.accuracy - config.accuracy_drop_budget - 1e-12) continue;
    if (!best || config.selection == "last" || c.ece < result.checkpoints[*best].ece) best = i;
  }
  if (!best) {
    log::warn("no ace checkpoint within the accuracy budget; keeping the most accurate one");
    best = 0;
    for (std::size_t i = 1; i < result.checkpoints.size(); ++i)
      if (result.checkpoints[i].accuracy > result.checkpoints[*best].accuracy) best = i;
  }
  result.selected_epoch = result.checkpoints[*best].epoch;
  result.model = std::move(snapshots[*best]);
  return result;
}

// ============================================================== selective prediction

double choose_threshold(std::vector<double> id_scores, double quantile) {
  if (id_scores.empty()) throw ArgumentError("threshold needs in-distribution scores");
  if (!(quantile >= 0 && quantile <= 1)) throw ArgumentError("quantile must lie in [0, 1]");
  std::sort(id_scores.begin(), id_scores.end());
  const double pos = quantile * static_cast<double>(id_scores.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, id_scores.size() - 1);
  return id_scores[lo] + (pos - static_cast<double>(lo)) * (id_scores[hi] - id_scores[lo]);
}

GuardedClassifier::GuardedClassifier(classifier::Classifier model, ScoreFn score, double threshold)
    : model_(std::move(model)), score_(std::move(score)), threshold_(threshold) {
  if (!score_) throw ArgumentError("guard needs a score function");
  if (!std::isfinite(threshold_)) throw ArgumentError("guard threshold must be finite");
}

torch::Tensor GuardedClassifier::score(const torch::Tensor& x) const {
  torch::NoGradGuard no_grad;
  return score_(x).detach().reshape({-1}).to(torch::kFloat64);
}

std::vector<bool> GuardedClassifier::abstains(const torch::Tensor& x) const {
  std::vector<bool> out;
  for (double s : column(score(x))) out.push_back(!(s >= threshold_));
  return out;
}

std::vector<GuardedOutcome> GuardedClassifier::predict(const torch::Tensor& x) const {
  torch::NoGradGuard no_grad;
  const auto reject = abstains(x);
  const auto p = model_.predict(x);
  std::vector<GuardedOutcome> out;
  for (std::size_t i = 0; i < reject.size(); ++i) {
    if (reject[i]) out.emplace_back(Abstain{});
    else out.emplace_back(p[static_cast<std::int64_t>(i)].clone());
  }
  return out;
}

GuardedClassifier make_guard(classifier::Classifier model, const pce::ExplainerModel& explainer,
                             const torch::Tensor& heldout_id, double quantile) {
  ScoreFn score = [explainer](const torch::Tensor& x) { return explainer.discriminator_score(x); };
  torch::NoGradGuard no_grad;
  const double h = choose_threshold(column(score(heldout_id)), quantile);
  return GuardedClassifier(std::move(model), std::move(score), h);
}

// ============================================================== evaluation

json UncertaintyReport::to_json() const {
  json j = {{"accuracy", accuracy}, {"threshold", threshold}, {"id_abstain_rate", id_abstain_rate}};
  j["aid"] = aid ? aid->to_json() : json(nullptr);
  j["near_ood"] = near_ood ? near_ood->to_json() : json(nullptr);
  j["far_ood"] = far_ood ? far_ood->to_json() : json(nullptr);
  j["far_ood_abstain_rate"] = far_ood_abstain_rate ? json(*far_ood_abstain_rate) : json(nullptr);
  return j;
}

UncertaintyReport evaluate_uncertainty(const GuardedClassifier& guard, const UncertaintySets& sets) {
  if (!sets.id_inputs.defined() || sets.id_inputs.size(0) == 0) throw ArgumentError("id test set is empty");
  if (!sets.id_labels.defined() || sets.id_labels.numel() != sets.id_inputs.size(0))
    throw ArgumentError("id labels must match the id inputs");
  for (const auto* t : {&sets.aid, &sets.near_ood, &sets.far_ood})
    if (t->defined() && t->size(0) == 0) throw ArgumentError("uncertainty sets must be non-empty when given");

  torch::NoGradGuard no_grad;
  const auto& model = guard.model();
  UncertaintyReport r;
  r.threshold = guard.threshold();
  const auto p_id = model.predict(sets.id_inputs);
  r.accuracy = p_id.argmax(1).eq(sets.id_labels.reshape({-1})).to(torch::kFloat64).mean().item<double>();
  const auto pe_id = column(classifier::predictive_entropy(p_id));
  const auto id_reject = guard.abstains(sets.id_inputs);
  r.id_abstain_rate = static_cast<double>(std::count(id_reject.begin(), id_reject.end(), true)) /
                      static_cast<double>(id_reject.size());

  if (sets.aid.defined())
    r.aid = metrics::separation_report(pe_id, column(classifier::predictive_entropy(model, sets.aid)));
  if (sets.near_ood.defined())
    r.near_ood = metrics::separation_report(pe_id, column(classifier::predictive_entropy(model, sets.near_ood)));
  if (sets.far_ood.defined()) {
    auto oriented = [&](const torch::Tensor& x) {
      auto s = column(guard.score(x));
      for (auto& v : s) v = -v;
      return s;
    };
    r.far_ood = metrics::separation_report(oriented(sets.id_inputs), oriented(sets.far_ood));
    const auto far_reject = guard.abstains(sets.far_ood);
    r.far_ood_abstain_rate = static_cast<double>(std::count(far_reject.begin(), far_reject.end(), true)) /
                             static_cast<double>(far_reject.size());
  }
  return r;
}

std::vector<bool> entropy_quantile_mask(const classifier::Classifier& reference, const torch::Tensor& x,
                                        double fraction) {
  if (!(fraction > 0 && fraction <= 1)) throw ArgumentError("fraction must lie in (0, 1]");
  const auto pe = column(classifier::predictive_entropy(reference, x));
  std::vector<std::size_t> order(pe.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pe[a] > pe[b]; });
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(pe.size())));
  std::vector<bool> mask(pe.size(), false);
  for (std::size_t i = 0; i < keep && i < order.size(); ++i) mask[order[i]] = true;
  return mask;
}

// ============================================================== two-moons geometry

std::vector<bool> moon_band_mask(const torch::Tensor& points, double width) {
  if (points.dim() != 2 || points.size(1) != 2) throw ArgumentError("moon geometry needs [N, 2] points");
  const auto p = points.to(torch::kFloat64).contiguous();
  const auto a = p.accessor<double, 2>();
  std::vector<bool> mask;
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    const auto d = data::moon_distances(a[i][0], a[i][1]);
    mask.push_back(std::abs(d.to_upper - d.to_lower) < width);
  }
  return mask;
}

namespace {

template <typename Keep>
torch::Tensor moon_grid(const torch::Tensor& points, double spacing, double margin, Keep keep) {
  if (points.dim() != 2 || points.size(1) != 2 || points.size(0) == 0)
    throw ArgumentError("moon geometry needs [N, 2] points");
  if (spacing <= 0) throw ArgumentError("grid spacing must be positive");
  const auto lo = std::get<0>(points.min(0)).to(torch::kFloat64);
  const auto hi = std::get<0>(points.max(0)).to(torch::kFloat64);
  const double x0 = lo[0].item<double>() - margin, x1 = hi[0].item<double>() + margin;
  const double y0 = lo[1].item<double>() - margin, y1 = hi[1].item<double>() + margin;
  std::vector<float> coords;
  const auto nx = static_cast<std::int64_t>(std::floor((x1 - x0) / spacing + 1e-9));
  const auto ny = static_cast<std::int64_t>(std::floor((y1 - y0) / spacing + 1e-9));
  for (std::int64_t i = 0; i <= nx; ++i)
    for (std::int64_t j = 0; j <= ny; ++j) {
      const double x = x0 + static_cast<double>(i) * spacing, y = y0 + static_cast<double>(j) * spacing;
      if (keep(data::moon_distances(x, y))) {
        coords.push_back(static_cast<float>(x));
        coords.push_back(static_cast<float>(y));
      }
    }
  return torch::tensor(coords).reshape({-1, 2});
}

}  // namespace

torch::Tensor moon_band_grid(const torch::Tensor& points, double spacing, double width, double support) {
  return moon_grid(points, spacing, 0.0, [&](const data::MoonDistances& d) {
    return std::abs(d.to_upper - d.to_lower) < width && std::min(d.to_upper, d.to_lower) < support;
  });
}

torch::Tensor moon_far_grid(const torch::Tensor& points, double spacing, double margin, double min_distance) {
  return moon_grid(points, spacing, margin, [&](const data::MoonDistances& d) {
    return d.to_upper > min_distance && d.to_lower > min_distance;
  });
}

}  // namespace cfaudit::ace
