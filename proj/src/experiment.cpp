#include "cfaudit/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "cfaudit/common.hpp"
#include "cfaudit/figures.hpp"
#include "cfaudit/image_io.hpp"
#include "cfaudit/metrics.hpp"
#include "cfaudit/setrep.hpp"

namespace cfaudit::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    parts.emplace_back(path.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  for (const auto& p : parts)
    if (p.empty()) throw ConfigError("malformed config key '" + std::string(path) + "'");
  return parts;
}

const json* find(const json& root, std::string_view path) {
  const json* node = &root;
  for (const auto& part : split_path(path)) {
    if (!node->is_object()) return nullptr;
    const auto it = node->find(part);
    if (it == node->end()) return nullptr;
    node = &*it;
  }
  return node;
}

void check_schema(const json& document) {
  if (!document.is_object()) throw ConfigError("config must be a JSON object");
  const auto it = document.find("schema_version");
  if (it == document.end()) throw ConfigError("missing config key 'schema_version'");
  if (!it->is_number_integer() || it->get<int>() != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + it->dump() + " (expected " + std::to_string(kSchemaVersion) + ")");
}

// Runs a section parser, turning JSON type/key errors and validation failures into ConfigError.
template <typename F>
auto parse_section(std::string_view section, F&& parse) {
  try {
    return parse();
  } catch (const json::exception& e) {
    throw ConfigError("invalid config section '" + std::string(section) + "': " + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError("invalid config section '" + std::string(section) + "': " + e.what());
  }
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  char buffer[32];
  std::strftime(buffer, sizeof buffer, "%Y%m%d-%H%M%S", &utc);
  return buffer;
}

std::string fixed(double value, int digits = 2) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << value;
  return out.str();
}

torch::Tensor target_probability(const classifier::Classifier& model, const torch::Tensor& x, std::int64_t target) {
  torch::NoGradGuard no_grad;
  return model.predict(x).select(1, target).to(torch::kFloat64);
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

torch::Tensor select_rows(const torch::Tensor& x, const std::vector<bool>& mask, bool keep) {
  std::vector<std::int64_t> rows;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == keep) rows.push_back(static_cast<std::int64_t>(i));
  return x.index_select(0, torch::tensor(rows, torch::kLong));
}

const pce::ExplainerModel& require_explainer(const Bundle& bundle) {
  if (!bundle.explainer) throw StateError("bundle " + bundle.root.string() + " has no explainer");
  return *bundle.explainer;
}

Bundle load_bundle_from(const Config& config) { return Bundle::load(config.get<std::string>("bundle")); }

classifier::Classifier obtain_classifier(const Config& config, const Splits& splits, const data::Dataset& all) {
  if (config.has("classifier.checkpoint"))
    return classifier::Classifier::load(config.get<std::string>("classifier.checkpoint"));
  return classifier::train_classifier(splits.train, classifier_config(config, all));
}

}  // namespace

// ============================================================== configuration

Config::Config(json document) : document_(std::move(document)) { check_schema(document_); }

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return Config(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

void Config::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: '" + std::string(assignment) + "'");
  const auto parts = split_path(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &document_;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    auto& next = (*node)[parts[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object())
      throw ConfigError("cannot override '" + std::string(assignment.substr(0, eq)) + "': '" + parts[i] +
                        "' is not an object");
    node = &next;
  }
  (*node)[parts.back()] = std::move(value);
  check_schema(document_);
}

bool Config::has(std::string_view path) const { return find(document_, path) != nullptr; }

const json& Config::at(std::string_view path) const {
  const auto* node = find(document_, path);
  if (!node) throw ConfigError("missing config key '" + std::string(path) + "'");
  return *node;
}

json Config::section(std::string_view path) const {
  const auto* node = find(document_, path);
  if (!node) return json::object();
  if (!node->is_object()) throw ConfigError("config key '" + std::string(path) + "' must be an object");
  return *node;
}

fs::path output_root(const Config& config) {
  if (config.has("output")) return config.get<std::string>("output");
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
  return "runs";
}

fs::path create_run_dir(const Config& config, std::string_view name) {
  const auto root = output_root(config);
  fs::create_directories(root);
  const auto stamp = std::string(name) + "-" + timestamp();
  for (int attempt = 0;; ++attempt) {
    auto candidate = root / (attempt == 0 ? stamp : stamp + "-" + std::to_string(attempt));
    if (fs::create_directory(candidate)) {
      write_json(candidate / "resolved_config.json", config.document());
      return candidate;
    }
  }
}

void write_json(const fs::path& path, const json& value) { io::write_text(path, value.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + " is not valid JSON: " + e.what());
  }
}

// ============================================================== datasets

data::Dataset build_dataset(const json& spec) {
  return parse_section("dataset", [&] {
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "two_moons")
      return data::make_two_moons(spec.value("n", std::size_t{2000}), spec.value("noise", 0.1),
                                  spec.value("seed", std::uint64_t{42}));
    if (kind == "glyph_digits") {
      data::GlyphOptions options;
      options.size = spec.value("size", options.size);
      options.digits = spec.value("digits", options.digits);
      options.noise = spec.value("noise", options.noise);
      return data::make_glyph_digits(spec.value("n", std::size_t{2000}), spec.value("seed", std::uint64_t{0}), options);
    }
    if (kind == "loop_morphs") {
      data::MorphOptions options;
      options.size = spec.value("size", options.size);
      options.ambiguous_fraction = spec.value("ambiguous_fraction", options.ambiguous_fraction);
      options.noise = spec.value("noise", options.noise);
      return data::make_loop_morphs(spec.value("n", std::size_t{2000}), spec.value("seed", std::uint64_t{0}), options);
    }
    if (kind == "manifest") return data::load_manifest(spec.at("path").get<std::string>()).dataset;
    throw ConfigError("unknown dataset kind '" + kind + "'");
  });
}

Splits split_dataset(const data::Dataset& dataset, const json& spec) {
  const bool tagged = std::all_of(dataset.samples().begin(), dataset.samples().end(),
                                  [](const data::LabeledSample& s) { return !s.split.empty(); });
  const auto seed = spec.value("seed", std::uint64_t{1});
  const auto val_fraction = spec.value("val", 0.2);
  if (tagged) {
    auto test = dataset.with_split("test");
    auto train = dataset.with_split("train");
    const bool has_val = std::any_of(dataset.samples().begin(), dataset.samples().end(),
                                     [](const data::LabeledSample& s) { return s.split == "val"; });
    if (has_val) return {train, dataset.with_split("val"), test};
    auto [fit, val] = train.split(1.0 - val_fraction, seed + 1);
    return {fit, val, test};
  }
  const auto test_fraction = spec.value("test", 0.2);
  if (!(test_fraction > 0 && test_fraction < 1) || !(val_fraction > 0 && val_fraction < 1))
    throw ConfigError("split fractions 'split.test' and 'split.val' must lie in (0, 1)");
  auto [train, test] = dataset.split(1.0 - test_fraction, seed);
  auto [fit, val] = train.split(1.0 - val_fraction, seed + 1);
  return {fit, val, test};
}

// ============================================================== model configs

classifier::TrainingConfig classifier_config(const Config& config, const data::Dataset& dataset) {
  const auto section = config.section("classifier");
  return parse_section("classifier", [&] {
    auto arch = section.value("architecture", json::object());
    arch["input_shape"] = dataset.sample_shape();
    arch["class_count"] = dataset.class_count();
    classifier::TrainingConfig c;
    c.architecture = classifier::ArchitectureDescriptor::from_json(arch);
    c.epochs = section.value("epochs", c.epochs);
    c.batch_size = section.value("batch_size", c.batch_size);
    c.learning_rate = section.value("learning_rate", c.learning_rate);
    c.val_fraction = section.value("val_fraction", c.val_fraction);
    c.seed = section.value("seed", c.seed);
    return c;
  });
}

pce::ExplainerTrainConfig explainer_config(const Config& config, const data::Dataset& dataset) {
  auto section = config.section("explainer");
  return parse_section("explainer", [&] {
    const auto variant = pce::variant_from_string(section.value("model", json::object()).value("variant", "v1-ordinal"));
    auto merged = pce::ExplainerTrainConfig::defaults(variant).to_json();
    merged["model"]["input_shape"] = dataset.sample_shape();
    merged.merge_patch(section);
    merged["model"]["input_shape"] = dataset.sample_shape();
    return pce::ExplainerTrainConfig::from_json(merged);
  });
}

// ============================================================== bundles

Bundle Bundle::load(const fs::path& directory) {
  const auto manifest_path = directory / "bundle.json";
  if (!fs::exists(manifest_path)) throw ConfigError("not a bundle directory (no bundle.json): " + directory.string());
  auto manifest = read_json(manifest_path);
  if (manifest.value("format", std::string()) != kBundleFormat)
    throw ConfigError("unsupported bundle format in " + manifest_path.string());
  auto model = classifier::Classifier::load(directory / manifest.at("classifier").get<std::string>());
  std::optional<pce::ExplainerModel> explainer;
  if (manifest.contains("explainer")) {
    auto explained = classifier::Classifier::load(directory / manifest.at("explained").get<std::string>());
    explainer.emplace(pce::ExplainerModel::load(directory / manifest.at("explainer").get<std::string>(),
                                                std::move(explained)));
  }
  auto samples = data::load_manifest(directory / manifest.at("samples").get<std::string>()).dataset;
  Bundle bundle{directory, manifest, std::move(model), std::move(explainer), std::move(samples),
                manifest.at("guard").at("threshold").get<double>(), {}, std::nullopt};
  if (manifest.contains("probes"))
    for (const auto& p : read_json(directory / manifest.at("probes").get<std::string>()))
      bundle.probes.push_back(mediation::ConceptProbe::from_json(p));
  if (manifest.contains("effects")) bundle.effects = read_json(directory / manifest.at("effects").get<std::string>());
  return bundle;
}

ace::GuardedClassifier Bundle::guard() const {
  const auto& ex = require_explainer(*this);
  return ace::GuardedClassifier(classifier.clone(), [&ex](const torch::Tensor& x) { return ex.discriminator_score(x); },
                                threshold);
}

void write_bundle(const fs::path& directory, const BundleParts& parts) {
  if (!parts.classifier || !parts.samples) throw ArgumentError("a bundle needs a classifier and a sample index");
  fs::create_directories(directory);
  json manifest{{"format", kBundleFormat},
                {"classifier", "classifier"},
                {"samples", "samples/manifest.json"},
                {"guard", {{"threshold", parts.threshold}, {"quantile", parts.quantile}}},
                {"modality", data::to_string(parts.samples->modality())},
                {"class_count", parts.classifier->class_count()},
                {"sample_count", parts.samples->size()}};
  parts.classifier->save(directory / "classifier");
  if (parts.explainer) {
    const auto* explained = parts.explained ? parts.explained : &parts.explainer->classifier();
    if (explained == parts.classifier) {
      manifest["explained"] = "classifier";
    } else {
      explained->save(directory / "explained");
      manifest["explained"] = "explained";
    }
    parts.explainer->save(directory / "explainer");
    manifest["explainer"] = "explainer";
    manifest["target_class"] = parts.explainer->config().target_class;
    manifest["bins"] = parts.explainer->config().bins;
  }
  data::save_manifest(*parts.samples, directory / "samples");
  if (parts.probes && !parts.probes->empty()) {
    json probes = json::array();
    for (const auto& p : *parts.probes) probes.push_back(p.to_json());
    write_json(directory / "probes.json", probes);
    manifest["probes"] = "probes.json";
  }
  if (parts.effects) {
    write_json(directory / "effect_report.json", *parts.effects);
    manifest["effects"] = "effect_report.json";
  }
  write_json(directory / "bundle.json", manifest);
}

// ============================================================== strips

std::vector<Panel> sweep_panels(const pce::ExplainerModel& explainer, const torch::Tensor& sample, std::int64_t bins) {
  if (bins < 1) throw ArgumentError("sweep needs at least one bin");
  std::vector<float> c;
  for (std::int64_t k = 0; k < bins; ++k) c.push_back(static_cast<float>(data::bin_center(k, bins)));
  const auto ct = torch::tensor(c);
  std::vector<std::int64_t> repeat(static_cast<std::size_t>(sample.dim()) + 1, 1);
  repeat[0] = bins;
  const auto x = sample.unsqueeze(0).repeat(repeat);
  torch::Tensor images, f;
  {
    torch::NoGradGuard no_grad;
    images = explainer.explain(x, ct);
    f = explainer.target_probability(images).to(torch::kFloat64);
  }
  std::vector<Panel> out;
  for (std::int64_t k = 0; k < bins; ++k) out.push_back({c[static_cast<std::size_t>(k)], images[k], f[k].item<double>()});
  return out;
}

// ============================================================== pipelines

json run_train_classifier(const Config& config, const fs::path& run_dir) {
  const auto all = build_dataset(config.at("dataset"));
  const auto splits = split_dataset(all, config.section("split"));
  const auto model = classifier::train_classifier(splits.train, classifier_config(config, all));
  model.save(run_dir / "classifier");
  data::save_manifest(splits.test, run_dir / "samples");

  std::vector<double> epochs(model.report().epoch_losses.size());
  std::iota(epochs.begin(), epochs.end(), 1.0);
  figures::line_chart({{"train loss", epochs, model.report().epoch_losses}}, "training loss", false)
      .save(run_dir / "loss.png");

  torch::Tensor probs;
  {
    torch::NoGradGuard no_grad;
    probs = model.predict(splits.test.images());
  }
  json report{{"command", "train-classifier"},
              {"split_sizes", {{"train", splits.train.size()}, {"val", splits.validation.size()}, {"test", splits.test.size()}}},
              {"training", model.report().to_json()},
              {"validation_accuracy", classifier::accuracy(model, splits.validation)},
              {"test_accuracy", classifier::accuracy(model, splits.test)},
              {"test_ece", metrics::expected_calibration_error(probs, splits.test.labels())}};
  write_json(run_dir / "report.json", report);
  return report;
}

json run_train_setrep(const Config& config, const fs::path& run_dir) {
  const auto base = build_dataset(config.at("dataset"));
  const auto bags_spec = config.section("bags");
  const auto positive = bags_spec.value("positive_label", std::int64_t{3});
  const auto rule = [positive](const data::LabeledSample& s) { return s.label == positive; };
  data::BagOptions options;
  options.bag_count = bags_spec.value("count", options.bag_count);
  options.min_size = bags_spec.value("min_size", options.min_size);
  options.max_size = bags_spec.value("max_size", options.max_size);
  const auto [train_base, test_base] = base.split(1.0 - bags_spec.value("test", 0.25), bags_spec.value("seed", std::uint64_t{1}));
  auto test_options = options;
  test_options.bag_count = bags_spec.value("test_count", std::max<std::size_t>(options.bag_count / 4, 20));
  const auto train_bags = data::make_bags(train_base, options, rule, bags_spec.value("seed", std::uint64_t{1}));
  const auto test_bags = data::make_bags(test_base, test_options, rule, bags_spec.value("seed", std::uint64_t{1}) + 1);

  const auto section = config.section("setrep");
  const auto train_config = parse_section("setrep", [&] {
    setrep::SetTrainConfig c;
    c.model.patch_shape = base.sample_shape();
    c.model.feature_dim = section.value("feature_dim", c.model.feature_dim);
    c.model.encoder_hidden = section.value("encoder_hidden", c.model.encoder_hidden);
    c.model.attention_hidden = section.value("attention_hidden", c.model.attention_hidden);
    c.weights.lambda1 = section.value("lambda1", c.weights.lambda1);
    c.weights.lambda2 = section.value("lambda2", c.weights.lambda2);
    c.weights.epsilon = section.value("epsilon", c.weights.epsilon);
    c.epochs = section.value("epochs", c.epochs);
    c.bags_per_step = section.value("bags_per_step", c.bags_per_step);
    c.learning_rate = section.value("learning_rate", c.learning_rate);
    c.seed = section.value("seed", c.seed);
    return c;
  });
  const auto test_auc = [&](setrep::SetModel& model) {
    std::vector<double> negatives, positives;
    torch::NoGradGuard no_grad;
    model->eval();
    for (const auto& bag : test_bags) {
      const double p = model->predict_outcome(bag)[0].item<double>();
      (bag.outcome.at(0) > 0.5 ? positives : negatives).push_back(p);
    }
    return metrics::separation_report(negatives, positives);
  };

  auto trained = setrep::train_setrep(train_bags, train_config);
  setrep::save_set_model(trained.model, run_dir / "setrep");
  const auto separation = test_auc(trained.model);

  {
    std::ofstream table(run_dir / "attention.csv");
    table << "bag_id,outcome,patch_index,member_id,attention\n" << std::setprecision(9);
    torch::NoGradGuard no_grad;
    for (const auto& bag : test_bags) {
      const auto alpha = metrics::to_vector(trained.model->attention_weights(bag).reshape({-1}));
      for (std::size_t i = 0; i < alpha.size(); ++i)
        table << bag.subject_id << ',' << bag.outcome.at(0) << ',' << i << ','
              << (i < bag.member_ids.size() ? bag.member_ids[i] : "") << ',' << alpha[i] << '\n';
    }
  }

  json sweep = json::array();
  for (const double lambda1 : section.value("lambda1_sweep", std::vector<double>{})) {
    auto variant = train_config;
    variant.weights.lambda1 = lambda1;
    auto model = setrep::train_setrep(train_bags, variant).model;
    sweep.push_back({{"lambda1", lambda1},
                     {"test_auc", test_auc(model).auc_roc},
                     {"test_effective_rank", setrep::latent_effective_rank(model, test_bags)}});
  }

  std::vector<double> epochs(trained.report.epoch_losses.size());
  std::iota(epochs.begin(), epochs.end(), 1.0);
  figures::line_chart({{"loss", epochs, trained.report.epoch_losses}}, "setrep training loss", false)
      .save(run_dir / "loss.png");
  json report{{"command", "train-setrep"},
              {"train_bags", train_bags.size()},
              {"test_bags", test_bags.size()},
              {"positive_label", positive},
              {"training", trained.report.to_json()},
              {"test_auc", separation.auc_roc},
              {"test_effective_rank", setrep::latent_effective_rank(trained.model, test_bags)},
              {"test_separation", separation.to_json()}};
  if (!sweep.empty()) report["lambda1_sweep"] = sweep;
  write_json(run_dir / "report.json", report);
  return report;
}

json run_train_pce(const Config& config, const fs::path& run_dir) {
  const auto all = build_dataset(config.at("dataset"));
  const auto splits = split_dataset(all, config.section("split"));
  const auto model = obtain_classifier(config, splits, all);
  const auto train_config = explainer_config(config, all);
  const auto explainer = pce::train_pce(model, splits.train, train_config);

  const auto quantile = config.get_or("guard.quantile", 0.05);
  const auto val_scores = metrics::to_vector(explainer.discriminator_score(splits.validation.images()));
  const double threshold = ace::choose_threshold(val_scores, quantile);
  write_bundle(run_dir, {&model, &model, &explainer, &splits.test, threshold, quantile, nullptr, nullptr});

  const auto target = explainer.config().target_class;
  const auto probe_size = std::min<std::int64_t>(config.get_or<std::int64_t>("metrics.probe_size", 400),
                                                 static_cast<std::int64_t>(splits.test.size()));
  const auto probe = splits.test.images().slice(0, 0, probe_size);
  const metrics::ProbFn f = [&](const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    return model.predict(x);
  };
  const metrics::ExplainFn explain = [&](const torch::Tensor& x, double c) { return explainer.explain(x, c); };
  const auto curve = metrics::consistency_curve(f, explain, probe, target, explainer.config().bins);

  std::vector<figures::Series> series;
  for (const auto& band : curve.bands)
    series.push_back({"f(x) " + fixed(band.low, 1) + "-" + fixed(band.high, 1), band.requested, band.realized});
  figures::line_chart(series, "classifier consistency").save(run_dir / "consistency.png");

  json report{{"command", "train-pce"},
              {"split_sizes", {{"train", splits.train.size()}, {"val", splits.validation.size()}, {"test", splits.test.size()}}},
              {"classifier_test_accuracy", classifier::accuracy(model, splits.test)},
              {"explainer", train_config.to_json()},
              {"training", explainer.log().to_json()},
              {"consistency", curve.to_json()},
              {"guard", {{"threshold", threshold}, {"quantile", quantile}}}};
  write_json(run_dir / "report.json", report);
  return report;
}

json run_explain(const ExplainRequest& request, const fs::path& run_dir) {
  const auto bundle = Bundle::load(request.bundle);
  const auto& explainer = require_explainer(bundle);
  if (request.sample_id.has_value() == request.image.has_value())
    throw ConfigError("explain needs exactly one of --sample or --image");

  torch::Tensor x;
  std::string source;
  if (request.sample_id) {
    const auto index = bundle.samples.find(*request.sample_id);
    if (!index) throw ConfigError("unknown sample id '" + *request.sample_id + "'");
    x = bundle.samples[*index].image;
    source = *request.sample_id;
  } else {
    x = io::read_png(*request.image);
    const auto shape = explainer.config().input_shape;
    if (shape.size() == 3 && shape[0] == 1 && x.size(0) == 3) x = x.mean(0, true);
    if (x.sizes() != torch::IntArrayRef(shape))
      throw ConfigError("image shape does not match the explainer input shape");
    source = request.image->string();
  }
  const auto target = explainer.config().target_class;
  const double fx = target_probability(explainer.classifier(), x.unsqueeze(0), target)[0].item<double>();

  std::vector<Panel> panels;
  if (request.sweep_bins > 0) {
    panels = sweep_panels(explainer, x, request.sweep_bins);
  } else {
    const double c = request.c.value_or(fx >= 0.5 ? 0.0 : 1.0);
    if (!(c >= 0 && c <= 1)) throw ConfigError("condition c must lie in [0, 1]");
    torch::NoGradGuard no_grad;
    const auto xc = explainer.explain(x.unsqueeze(0), c);
    panels.push_back({c, xc[0], explainer.target_probability(xc)[0].item<double>()});
  }

  const auto figure = run_dir / (request.sweep_bins > 0 ? "strip.png" : "explain.png");
  if (bundle.samples.modality() == data::Modality::image) {
    std::vector<torch::Tensor> images{x};
    std::vector<std::string> captions{"x " + fixed(fx)};
    for (const auto& p : panels) {
      images.push_back(p.image);
      captions.push_back(fixed(p.f_xc));
    }
    // sweeps compare the two extreme counterfactuals, single explanations compare against x
    const auto& from = panels.size() > 1 ? panels.front().image : x;
    images.push_back(
        metrics::counterfactual_importance_map(x, from, panels.back().image).to(x.scalar_type()).expand(x.sizes()).contiguous());
    captions.push_back("diff");
    figures::image_strip(images, captions).save(figure);
  } else {
    std::vector<torch::Tensor> path{x.flatten()};
    for (const auto& p : panels) path.push_back(p.image.flatten());
    std::vector<std::int64_t> groups;
    for (const auto& s : bundle.samples.samples()) groups.push_back(s.label);
    figures::scatter_chart(bundle.samples.images().flatten(1), groups, torch::stack(path), "counterfactual path")
        .save(figure);
  }

  json entries = json::array();
  for (const auto& p : panels) {
    json e{{"c", p.c}, {"f_xc", p.f_xc}};
    if (bundle.samples.modality() == data::Modality::vector) e["point"] = metrics::to_vector(p.image.flatten());
    entries.push_back(e);
  }
  json sidecar{{"command", "explain"}, {"source", source},         {"f_x", fx},
               {"target_class", target}, {"figure", figure.filename().string()}, {"entries", entries}};
  write_json(run_dir / (request.sweep_bins > 0 ? "strip.json" : "explain.json"), sidecar);
  return sidecar;
}

json run_evaluate_metrics(const Config& config, const fs::path& run_dir) {
  const auto bundle = load_bundle_from(config);
  const auto& explainer = require_explainer(bundle);
  const auto& model = explainer.classifier();
  const auto target = explainer.config().target_class;
  const auto bins = explainer.config().bins;
  const metrics::FlipThresholds thresholds{config.get_or("metrics.flip_low", 0.2), config.get_or("metrics.flip_high", 0.8)};
  const auto probe_size = std::min<std::int64_t>(config.get_or<std::int64_t>("metrics.probe_size", 400),
                                                 static_cast<std::int64_t>(bundle.samples.size()));
  const auto x = bundle.samples.images().slice(0, 0, probe_size);

  const metrics::ProbFn f = [&](const torch::Tensor& in) {
    torch::NoGradGuard no_grad;
    return model.predict(in);
  };
  const metrics::ExplainFn explain = [&](const torch::Tensor& in, double c) { return explainer.explain(in, c); };

  torch::NoGradGuard no_grad;
  const auto p = target_probability(model, x, target);
  const auto flip = torch::where(p >= 0.5, torch::full_like(p, data::bin_center(0, bins)),
                                 torch::full_like(p, data::bin_center(bins - 1, bins)));
  const auto x_flip = explainer.explain(x, flip.to(torch::kFloat32));
  const auto x_self = explainer.explain(x, p.to(torch::kFloat32));
  const double cv = metrics::cv_score(p, target_probability(model, x_flip, target), thresholds);
  const double self_gap = (target_probability(model, x_self, target) - p).abs().mean().item<double>();

  const auto real_stats = metrics::activation_stats(model.penultimate(x).to(torch::kFloat64));
  const double fid_flip = metrics::fid(real_stats, metrics::activation_stats(model.penultimate(x_flip).to(torch::kFloat64)));
  const double fid_self = metrics::fid(real_stats, metrics::activation_stats(model.penultimate(x_self).to(torch::kFloat64)));
  const auto curve = metrics::consistency_curve(f, explain, x, target, bins);

  json report{{"command", "evaluate-metrics"},
              {"sample_count", probe_size},
              {"cv_score", cv},
              {"flip_thresholds", {thresholds.low, thresholds.high}},
              {"self_consistency_gap", self_gap},
              {"fid_flipped", fid_flip},
              {"fid_self", fid_self},
              {"consistency", curve.to_json()}};

  if (bundle.samples.modality() == data::Modality::image) {
    std::vector<double> fractions;
    for (int i = 0; i <= 10; ++i) fractions.push_back(i / 10.0);
    const auto filler = metrics::filler_from_string(config.get_or<std::string>("metrics.deletion_filler", "mean"));
    std::vector<double> aucs;
    const auto limit = std::min<std::int64_t>(config.get_or<std::int64_t>("metrics.deletion_samples", 32), probe_size);
    for (std::int64_t i = 0; i < x.size(0) && static_cast<std::int64_t>(aucs.size()) < limit; ++i) {
      if (p[i].item<double>() < 0.5) continue;
      const auto xi = x.slice(0, i, i + 1);
      const auto neg = explainer.explain(xi, data::bin_center(0, bins))[0];
      const auto pos = explainer.explain(xi, data::bin_center(bins - 1, bins))[0];
      const auto importance = metrics::counterfactual_importance_map(xi[0], neg, pos);
      aucs.push_back(metrics::deletion_auc(f, xi[0], importance, target, fractions, filler).auc);
    }
    report["deletion_auc_mean"] = mean_of(aucs);
    report["deletion_samples"] = aucs.size();
  }

  std::vector<figures::Series> series;
  for (const auto& band : curve.bands)
    series.push_back({"f(x) " + fixed(band.low, 1) + "-" + fixed(band.high, 1), band.requested, band.realized});
  figures::line_chart(series, "classifier consistency").save(run_dir / "consistency.png");

  const auto ledger = run_dir / "metrics.jsonl";
  for (const auto* key : {"cv_score", "self_consistency_gap", "fid_flipped", "fid_self"}) {
    metrics::MetricRecord record;
    record.metric = key;
    record.value = report[key];
    record.group_sizes = {{"samples", probe_size}};
    record.config = {{"bundle", bundle.root.string()}};
    metrics::append_to_ledger(ledger, record);
  }
  write_json(run_dir / "report.json", report);
  return report;
}

json run_mediate(const Config& config, const fs::path& run_dir) {
  const auto bundle = load_bundle_from(config);
  const auto& explainer = require_explainer(bundle);
  auto model = explainer.classifier().clone();
  if (config.has("mediation.tap_layer")) model.set_tap_layer(config.get<std::string>("mediation.tap_layer"));
  if (bundle.samples.concept_names().empty()) throw ConfigError("mediate needs samples with concept labels");

  const auto seed = config.get_or<std::uint64_t>("mediation.seed", 0);
  auto [probe_set, effect_set] = bundle.samples.split(config.get_or("mediation.probe_fraction", 0.5), seed);

  mediation::ProbeOptions probe_options;
  probe_options.folds = config.get_or("mediation.folds", probe_options.folds);
  probe_options.grid_size = config.get_or("mediation.grid_size", probe_options.grid_size);
  probe_options.seed = seed;
  std::vector<mediation::ConceptProbe> probes;
  json skipped = json::array();
  for (std::size_t k = 0; k < probe_set.concept_names().size(); ++k) {
    try {
      probes.push_back(mediation::fit_concept_probe(model, probe_set, k, probe_options));
    } catch (const ArgumentError& e) {
      skipped.push_back({{"concept", probe_set.concept_names()[k]}, {"reason", e.what()}});
    }
  }
  if (probes.empty()) throw ConfigError("no concept had enough labelled examples for a probe");

  const auto count = std::min<std::int64_t>(config.get_or<std::int64_t>("mediation.sample_count", 256),
                                            static_cast<std::int64_t>(effect_set.size()));
  const auto x = effect_set.images().slice(0, 0, count);
  mediation::RankOptions rank;
  rank.target_class = explainer.config().target_class;
  rank.seed = seed;
  const metrics::ExplainFn explain = [&](const torch::Tensor& in, double c) { return explainer.explain(in, c); };
  const auto effects = mediation::rank_concepts(model, explain, probes, x, rank);

  const auto max_depth = config.get_or("mediation.max_depth", 3);
  const auto half = x.size(0) / 2;
  const auto tree = mediation::fit_surrogate_tree(model, probes, x.slice(0, 0, half), x.slice(0, half), max_depth);

  json probes_json = json::array();
  for (const auto& p : probes) probes_json.push_back(p.to_json());
  write_json(run_dir / "probes.json", probes_json);
  const auto effects_json = effects.to_json();
  write_json(run_dir / "effect_report.json", effects_json);
  write_json(run_dir / "tree.json", tree.to_json());
  std::string rules;
  for (const auto& line : tree.tree.rules()) rules += line + "\n";
  io::write_text(run_dir / "rules.txt", rules);

  std::vector<std::string> labels;
  std::vector<double> values, errors;
  for (const auto& c : effects.concepts) {
    labels.push_back(c.concept_name);
    values.push_back(c.pooled.ie.mean);
    errors.push_back(c.pooled.ie.standard_error);
  }
  figures::bar_chart(labels, values, errors, "indirect effect").save(run_dir / "ie_ranking.png");

  write_bundle(run_dir / "bundle", {&bundle.classifier, &explainer.classifier(), &explainer, &bundle.samples,
                                    bundle.threshold, bundle.manifest.at("guard").value("quantile", 0.05), &probes,
                                    &effects_json});

  json probe_summary = json::array();
  for (const auto& p : probes)
    probe_summary.push_back({{"concept", p.concept_name}, {"auc", p.auc}, {"support_size", p.support.size()},
                             {"sparsity", p.sparsity}});
  json report{{"command", "mediate"},  {"probes", probe_summary},      {"skipped", skipped},
              {"ranking", effects.ranking}, {"tree_fidelity", tree.fidelity}, {"tree_depth", tree.tree.depth()},
              {"effect_samples", count}};
  write_json(run_dir / "report.json", report);
  return report;
}

json run_ace_finetune(const Config& config, const fs::path& run_dir) {
  const auto bundle = load_bundle_from(config);
  const auto& explainer = require_explainer(bundle);
  const auto all = build_dataset(config.at("dataset"));
  const auto splits = split_dataset(all, config.section("split"));

  const auto section = config.section("ace");
  const auto ace_config = parse_section("ace", [&] {
    auto c = ace::AceConfig::from_json(section);
    c.validate();
    return c;
  });
  const auto pool = ace::build_augmentation_pool(explainer, bundle.classifier, splits.train,
                                                 section.value("per_source", std::int64_t{4}),
                                                 section.value("pool_seed", std::uint64_t{7}));
  pool.save(run_dir / "pool");
  const auto result = ace::ace_finetune(bundle.classifier, splits.train, pool, splits.validation, ace_config);
  write_bundle(run_dir / "bundle", {&result.model, &explainer.classifier(), &explainer, &bundle.samples, bundle.threshold,
                                    bundle.manifest.at("guard").value("quantile", 0.05), &bundle.probes,
                                    bundle.effects ? &*bundle.effects : nullptr});

  torch::NoGradGuard no_grad;
  const auto labels = splits.test.labels();
  json report{{"command", "ace-finetune"},
              {"pool_size", pool.size()},
              {"ace", ace_config.to_json()},
              {"result", result.to_json()},
              {"test_accuracy_before", classifier::accuracy(bundle.classifier, splits.test)},
              {"test_accuracy_after", classifier::accuracy(result.model, splits.test)},
              {"test_ece_before", metrics::expected_calibration_error(bundle.classifier.predict(splits.test.images()), labels)},
              {"test_ece_after", metrics::expected_calibration_error(result.model.predict(splits.test.images()), labels)}};
  write_json(run_dir / "report.json", report);
  return report;
}

namespace {

torch::Tensor uniform_noise(const std::vector<std::int64_t>& shape, std::int64_t count, std::uint64_t seed) {
  auto generator = at::make_generator<at::CPUGeneratorImpl>(seed);
  std::vector<std::int64_t> full{count};
  full.insert(full.end(), shape.begin(), shape.end());
  return torch::rand(full, generator);
}

torch::Tensor build_set(const json& spec, const data::Dataset& reference, const std::string& name) {
  return parse_section("uncertainty." + name, [&]() -> torch::Tensor {
    const auto kind = spec.at("kind").get<std::string>();
    if (kind == "moon_grid")
      return ace::moon_far_grid(reference.images(), spec.value("spacing", 0.1), spec.value("margin", 1.5),
                                spec.value("min_distance", 1.0));
    if (kind == "moon_band")
      return ace::moon_band_grid(reference.images(), spec.value("spacing", 0.02), spec.value("width", 0.2),
                                 spec.value("support", 0.35));
    if (kind == "uniform_noise")
      return uniform_noise(reference.sample_shape(), spec.value("count", std::int64_t{500}),
                           spec.value("seed", std::uint64_t{0}));
    if (kind == "dataset") return build_dataset(spec.at("dataset")).images();
    throw ConfigError("unknown uncertainty set kind '" + kind + "'");
  });
}

// PE landscape over the data box for 2-D inputs; abstained cells stay white.
void landscape(const ace::GuardedClassifier& guard, const data::Dataset& reference, const fs::path& path) {
  const auto pts = reference.images().to(torch::kFloat64);
  const auto lo = std::get<0>(pts.min(0)) - 1.0;
  const auto hi = std::get<0>(pts.max(0)) + 1.0;
  const std::int64_t size = 160;
  const auto xs = torch::linspace(lo[0].item<double>(), hi[0].item<double>(), size);
  const auto ys = torch::linspace(hi[1].item<double>(), lo[1].item<double>(), size);
  const auto mesh = torch::meshgrid({ys, xs}, "ij");
  const auto grid = torch::stack({mesh[1].flatten(), mesh[0].flatten()}, 1).to(torch::kFloat32);
  torch::Tensor pe;
  {
    torch::NoGradGuard no_grad;
    pe = classifier::predictive_entropy(guard.model().predict(grid)) / std::log(2.0);
  }
  const auto abstain = guard.abstains(grid);
  figures::Canvas canvas(size, size);
  for (std::int64_t i = 0; i < size * size; ++i) {
    if (abstain[static_cast<std::size_t>(i)]) continue;
    const float u = std::clamp(pe[i].item<float>(), 0.0f, 1.0f);
    canvas.set(i % size, i / size, {1.0f - 0.8f * u, 0.85f - 0.5f * u, 0.2f + 0.7f * u});
  }
  canvas.save(path);
}

}  // namespace

json run_evaluate_uncertainty(const Config& config, const fs::path& run_dir) {
  const auto bundle = load_bundle_from(config);
  const auto& explainer = require_explainer(bundle);
  const auto guard = bundle.guard();
  const auto reference = config.has("dataset") ? build_dataset(config.at("dataset")) : bundle.samples;
  const auto section = config.section("uncertainty");

  auto id_x = bundle.samples.images();
  auto id_y = bundle.samples.labels();
  torch::Tensor aid;
  json aid_info = nullptr;
  if (section.contains("aid")) {
    const auto spec = section.at("aid");
    const auto kind = parse_section("uncertainty.aid", [&] { return spec.at("kind").get<std::string>(); });
    std::vector<bool> mask;
    if (kind == "entropy_quantile") {
      mask = ace::entropy_quantile_mask(explainer.classifier(), id_x, spec.value("fraction", 0.1));
      aid = select_rows(id_x, mask, true);
    } else {
      aid = build_set(spec, reference, "aid");
      if (kind == "moon_band") mask = ace::moon_band_mask(id_x, spec.value("width", 0.2));
    }
    if (!mask.empty()) {
      id_y = id_y.index_select(0, torch::nonzero(torch::tensor(std::vector<std::uint8_t>(mask.begin(), mask.end())) == 0).flatten());
      id_x = select_rows(id_x, mask, false);
    }
    aid_info = {{"kind", kind}, {"count", aid.size(0)}};
  }
  const auto near = section.contains("near_ood") ? build_set(section.at("near_ood"), reference, "near_ood") : torch::Tensor();
  const auto far = section.contains("far_ood") ? build_set(section.at("far_ood"), reference, "far_ood") : torch::Tensor();

  const auto report = ace::evaluate_uncertainty(guard, {id_x, id_y, aid, near, far});
  json out{{"command", "evaluate-uncertainty"}, {"id_count", id_x.size(0)}, {"aid_set", aid_info},
           {"report", report.to_json()}};

  // Same PE separations under the explained (pre-fine-tuning) classifier for comparison.
  const auto pe = [](const classifier::Classifier& m, const torch::Tensor& x) {
    torch::NoGradGuard no_grad;
    return metrics::to_vector(classifier::predictive_entropy(m, x));
  };
  json baseline = json::object();
  for (const auto& [name, set] : {std::pair<std::string, torch::Tensor>{"aid", aid}, {"near_ood", near}}) {
    if (!set.defined() || set.size(0) == 0) continue;
    const auto before_in = pe(explainer.classifier(), id_x), before_out = pe(explainer.classifier(), set);
    const auto after_in = pe(guard.model(), id_x), after_out = pe(guard.model(), set);
    baseline[name] = {{"auc_before", metrics::separation_report(before_in, before_out).auc_roc},
                      {"auc_after", metrics::separation_report(after_in, after_out).auc_roc},
                      {"mean_pe_before", mean_of(before_out)},
                      {"mean_pe_after", mean_of(after_out)},
                      {"id_mean_pe_before", mean_of(before_in)},
                      {"id_mean_pe_after", mean_of(after_in)}};
  }
  out["comparison"] = baseline;
  out["baseline_accuracy"] = [&] {
    torch::NoGradGuard no_grad;
    return explainer.classifier().predict(id_x).argmax(1).eq(id_y).to(torch::kFloat64).mean().item<double>();
  }();

  if (bundle.samples.modality() == data::Modality::vector && bundle.samples.sample_shape() == std::vector<std::int64_t>{2})
    landscape(guard, reference, run_dir / "landscape.png");
  write_json(run_dir / "report.json", out);
  return out;
}

}  // namespace cfaudit::experiment
