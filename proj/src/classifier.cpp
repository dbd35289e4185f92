#include "cfaudit/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>

#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"

namespace cfaudit::classifier {

using nlohmann::json;

namespace {

std::string architecture_name(Architecture a) { return a == Architecture::cnn ? "cnn" : "mlp"; }

Architecture architecture_from(const std::string& s) {
  if (s == "mlp") return Architecture::mlp;
  if (s == "cnn") return Architecture::cnn;
  throw ArgumentError("unknown architecture: " + s);
}

std::string vectorization_name(Vectorization v) { return v == Vectorization::flatten ? "flatten" : "max_pool"; }

Vectorization vectorization_from(const std::string& s) {
  if (s == "flatten") return Vectorization::flatten;
  if (s == "max_pool") return Vectorization::max_pool;
  throw ArgumentError("unknown vectorization: " + s);
}

std::string shape_string(at::IntArrayRef shape) {
  std::ostringstream out;
  out << shape;
  return out.str();
}

}  // namespace

json ArchitectureDescriptor::to_json() const {
  return {{"kind", architecture_name(kind)},     {"input_shape", input_shape},
          {"class_count", class_count},          {"hidden", hidden},
          {"dense_width", dense_width},          {"tap_layer", tap_layer},
          {"vectorization", vectorization_name(vectorization)}};
}

ArchitectureDescriptor ArchitectureDescriptor::from_json(const json& j) {
  ArchitectureDescriptor d;
  d.kind = architecture_from(j.value("kind", std::string("mlp")));
  d.input_shape = j.at("input_shape").get<std::vector<std::int64_t>>();
  d.class_count = j.at("class_count").get<std::int64_t>();
  d.hidden = j.value("hidden", d.hidden);
  d.dense_width = j.value("dense_width", d.dense_width);
  d.tap_layer = j.value("tap_layer", std::string());
  d.vectorization = vectorization_from(j.value("vectorization", std::string("max_pool")));
  return d;
}

// ============================================================== network

ClassifierNetImpl::ClassifierNetImpl(ArchitectureDescriptor descriptor) : descriptor_(std::move(descriptor)) {
  if (descriptor_.class_count < 2) throw ArgumentError("classifier needs at least two classes");
  if (descriptor_.input_shape.empty()) throw ArgumentError("input shape must not be empty");
  if (descriptor_.kind == Architecture::cnn && descriptor_.input_shape.size() != 3)
    throw ArgumentError("cnn input shape must be [C,H,W]");
  reset();
}

void ClassifierNetImpl::reset() {
  names_.clear();
  stages_.clear();
  auto add = [this](std::string name, torch::nn::Sequential stage) {
    stages_.push_back(register_module(name, stage));
    names_.push_back(std::move(name));
  };
  const auto& d = descriptor_;
  if (d.kind == Architecture::mlp) {
    std::int64_t width = std::accumulate(d.input_shape.begin(), d.input_shape.end(), std::int64_t{1},
                                         std::multiplies<>());
    for (std::size_t i = 0; i < d.hidden.size(); ++i) {
      torch::nn::Sequential stage;
      if (i == 0) stage->push_back(torch::nn::Flatten());
      stage->push_back(torch::nn::Linear(width, d.hidden[i]));
      stage->push_back(torch::nn::ReLU());
      add("fc" + std::to_string(i + 1), stage);
      width = d.hidden[i];
    }
    torch::nn::Sequential head;
    if (d.hidden.empty()) head->push_back(torch::nn::Flatten());
    head->push_back(torch::nn::Linear(width, d.class_count));
    add("logits", head);
  } else {
    std::int64_t channels = d.input_shape[0];
    std::int64_t h = d.input_shape[1];
    std::int64_t w = d.input_shape[2];
    for (std::size_t i = 0; i < d.hidden.size(); ++i) {
      torch::nn::Sequential stage(
          torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, d.hidden[i], 3).padding(1)), torch::nn::ReLU(),
          torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2)));
      add("conv" + std::to_string(i + 1), stage);
      channels = d.hidden[i];
      h /= 2;
      w /= 2;
      if (h < 1 || w < 1) throw ArgumentError("too many conv stages for the input size");
    }
    add("dense", torch::nn::Sequential(torch::nn::Flatten(), torch::nn::Linear(channels * h * w, d.dense_width),
                                       torch::nn::ReLU()));
    add("logits", torch::nn::Sequential(torch::nn::Linear(d.dense_width, d.class_count)));
  }
}

torch::Tensor ClassifierNetImpl::run(torch::Tensor x, std::size_t first, std::size_t last) {
  for (std::size_t i = first; i <= last && i < stages_.size(); ++i) x = stages_[i]->forward(x);
  return x;
}

torch::Tensor ClassifierNetImpl::forward(torch::Tensor x) { return run(std::move(x), 0, stages_.size() - 1); }

std::size_t ClassifierNetImpl::stage_index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ArgumentError("unknown layer: " + name);
  return static_cast<std::size_t>(it - names_.begin());
}

// ============================================================== report

json TrainingReport::to_json() const {
  return {{"final_train_loss", final_train_loss},
          {"train_accuracy", train_accuracy},
          {"val_accuracy", val_accuracy},
          {"epoch_losses", epoch_losses}};
}

TrainingReport TrainingReport::from_json(const json& j) {
  TrainingReport r;
  r.final_train_loss = j.value("final_train_loss", 0.0);
  r.train_accuracy = j.value("train_accuracy", 0.0);
  r.val_accuracy = j.value("val_accuracy", 0.0);
  r.epoch_losses = j.value("epoch_losses", std::vector<double>{});
  return r;
}

// ============================================================== classifier

Classifier::Classifier(ArchitectureDescriptor descriptor, std::uint64_t seed) : net_(nullptr) {
  {
    std::lock_guard lock(torch_seed_mutex());
    torch::manual_seed(seed);
    net_ = ClassifierNet(descriptor);
  }
  const auto& names = net_->stage_names();
  if (names.size() < 2) throw ArgumentError("classifier needs at least one hidden stage");
  set_tap_layer(descriptor.tap_layer.empty() ? names[names.size() - 2] : descriptor.tap_layer);
}

Classifier::Classifier(ClassifierNet net, std::string tap, TrainingReport report)
    : net_(std::move(net)), report_(std::move(report)) {
  set_tap_layer(tap);
}

void Classifier::set_tap_layer(const std::string& name) {
  const auto index = net_->stage_index(name);
  if (index + 1 >= net_->stage_names().size()) throw ArgumentError("tap layer must precede the logits");
  tap_ = name;
}

std::size_t Classifier::tap_index() const { return net_->stage_index(tap_); }

torch::Tensor Classifier::prepare(const torch::Tensor& x) const {
  const auto& shape = descriptor().input_shape;
  bool ok = x.dim() == static_cast<std::int64_t>(shape.size()) + 1;
  for (std::size_t i = 0; ok && i < shape.size(); ++i) ok = x.size(static_cast<std::int64_t>(i) + 1) == shape[i];
  if (!ok)
    throw ArgumentError("input shape " + shape_string(x.sizes()) + " does not match model input [B]" +
                        shape_string(shape));
  return x.scalar_type() == dtype() ? x : x.to(dtype());
}

torch::Tensor Classifier::logits(const torch::Tensor& x) const { return net_->forward(prepare(x)); }

torch::Tensor Classifier::predict(const torch::Tensor& x) const { return phi2(phi1(x)); }

TapResult Classifier::tap(const torch::Tensor& x) const {
  auto activations = phi1(x);
  auto probabilities = phi2(activations);
  return {std::move(activations), std::move(probabilities)};
}

torch::Tensor Classifier::phi1(const torch::Tensor& x) const { return net_->run(prepare(x), 0, tap_index()); }

torch::Tensor Classifier::phi2(const torch::Tensor& activations) const {
  const auto last = net_->stage_names().size() - 1;
  return torch::softmax(net_->run(activations, tap_index() + 1, last), 1);
}

torch::Tensor Classifier::penultimate(const torch::Tensor& x) const {
  const auto last = net_->stage_names().size() - 1;
  return net_->run(prepare(x), 0, last - 1).flatten(1);
}

torch::Tensor Classifier::vectorize(const torch::Tensor& activations) const {
  if (activations.dim() > 2 && descriptor().vectorization == Vectorization::max_pool) {
    std::vector<std::int64_t> dims;
    for (std::int64_t d = 2; d < activations.dim(); ++d) dims.push_back(d);
    return activations.amax(dims);
  }
  return activations.flatten(1);
}

std::vector<std::int64_t> Classifier::unit_shape() const {
  torch::NoGradGuard no_grad;
  std::vector<std::int64_t> shape = {1};
  for (auto s : descriptor().input_shape) shape.push_back(s);
  const auto a = phi1(torch::zeros(shape, dtype()));
  if (a.dim() > 2 && descriptor().vectorization == Vectorization::max_pool)
    return std::vector<std::int64_t>(a.sizes().begin() + 2, a.sizes().end());
  return {};
}

std::int64_t Classifier::unit_count() const {
  torch::NoGradGuard no_grad;
  std::vector<std::int64_t> shape = {1};
  for (auto s : descriptor().input_shape) shape.push_back(s);
  return vectorize(phi1(torch::zeros(shape, dtype()))).size(1);
}

torch::Dtype Classifier::dtype() const { return net_->parameters().front().scalar_type(); }

void Classifier::to(torch::Dtype dtype) { net_->to(dtype); }

Classifier Classifier::clone() const {
  auto copy = std::dynamic_pointer_cast<ClassifierNetImpl>(net_->clone());
  return Classifier(ClassifierNet(copy), tap_, report_);
}

void Classifier::save(const std::filesystem::path& directory) const {
  std::filesystem::create_directories(directory);
  json descriptor_json = descriptor().to_json();
  descriptor_json["tap_layer"] = tap_;
  json doc = {{"format", kCheckpointFormat},
              {"descriptor", descriptor_json},
              {"dtype", dtype() == torch::kFloat64 ? "float64" : "float32"}};
  io::write_text(directory / "descriptor.json", doc.dump(2));
  torch::save(net_, (directory / "parameters.pt").string());
  io::write_text(directory / "report.json", report_.to_json().dump(2));
}

Classifier Classifier::load(const std::filesystem::path& directory) {
  json doc;
  try {
    doc = json::parse(io::read_text(directory / "descriptor.json"));
  } catch (const json::exception& e) {
    throw ArgumentError("malformed classifier descriptor: " + std::string(e.what()));
  }
  if (doc.value("format", "") != kCheckpointFormat)
    throw ArgumentError("not a classifier checkpoint: " + directory.string());
  auto descriptor = ArchitectureDescriptor::from_json(doc.at("descriptor"));
  ClassifierNet net(descriptor);
  if (doc.value("dtype", "float32") == "float64") net->to(torch::kFloat64);
  torch::load(net, (directory / "parameters.pt").string());
  TrainingReport report;
  if (std::filesystem::exists(directory / "report.json"))
    report = TrainingReport::from_json(json::parse(io::read_text(directory / "report.json")));
  return Classifier(net, descriptor.tap_layer, report);
}

// ============================================================== training

double accuracy(const Classifier& model, const data::Dataset& data) {
  torch::NoGradGuard no_grad;
  const auto probs = model.predict(data.images());
  return probs.argmax(1).eq(data.labels()).to(torch::kFloat64).mean().item<double>();
}

Classifier train_classifier(const data::Dataset& data, const TrainingConfig& config) {
  const auto hist = data.class_histogram();
  const auto present = std::count_if(hist.begin(), hist.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw ArgumentError("training data must contain at least two classes");
  if (config.epochs < 1 || config.batch_size < 1) throw ArgumentError("epochs and batch_size must be positive");
  if (!(config.val_fraction >= 0.0 && config.val_fraction < 1.0))
    throw ArgumentError("val_fraction must lie in [0,1)");

  auto architecture = config.architecture;
  architecture.class_count = data.class_count();
  architecture.input_shape = data.sample_shape();
  Classifier model(architecture, config.seed);

  std::optional<data::Dataset> train_part;
  std::optional<data::Dataset> val_part;
  if (config.val_fraction > 0.0 && data.size() >= 2) {
    auto [tr, va] = data.split(1.0 - config.val_fraction, config.seed);
    train_part.emplace(std::move(tr));
    val_part.emplace(std::move(va));
  } else {
    train_part.emplace(data);
  }
  const auto& train = *train_part;
  const auto images = train.images();
  const auto labels = train.labels();

  torch::optim::Adam optimizer(model.net()->parameters(), torch::optim::AdamOptions(config.learning_rate));
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::int64_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainingReport report;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::int64_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                               order.begin() + static_cast<std::ptrdiff_t>(stop)));
      const auto x = images.index_select(0, idx);
      const auto y = labels.index_select(0, idx);
      optimizer.zero_grad();
      auto loss = torch::cross_entropy_loss(model.logits(x), y);
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingError("classifier loss diverged",
                            "epoch=" + std::to_string(epoch) + " batch_start=" + std::to_string(start) +
                                " loss=" + std::to_string(value) + " lr=" + std::to_string(config.learning_rate));
      loss.backward();
      optimizer.step();
      total += value * static_cast<double>(stop - start);
      seen += static_cast<std::int64_t>(stop - start);
    }
    report.epoch_losses.push_back(total / static_cast<double>(seen));
    log::info("classifier epoch " + std::to_string(epoch) + " loss " + std::to_string(report.epoch_losses.back()));
  }
  report.final_train_loss = report.epoch_losses.back();
  report.train_accuracy = accuracy(model, train);
  report.val_accuracy = val_part ? accuracy(model, *val_part) : report.train_accuracy;
  model.set_report(report);
  return model;
}

// ============================================================== entropy

torch::Tensor predictive_entropy(const torch::Tensor& probabilities) {
  if (probabilities.dim() != 2) throw ArgumentError("predictive_entropy expects [B, K] probabilities");
  return -torch::special::xlogy(probabilities, probabilities).sum(1);
}

double predictive_entropy(const std::vector<double>& probabilities) {
  double h = 0.0;
  for (double p : probabilities) {
    if (p < 0.0 || !std::isfinite(p)) throw ArgumentError("probabilities must be finite and nonnegative");
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

torch::Tensor predictive_entropy(const Classifier& model, const torch::Tensor& x) {
  return predictive_entropy(model.predict(x));
}

// ============================================================== fine-tuning

void SoftLabeledBatch::validate(std::int64_t class_count) const {
  if (!images.defined() || !targets.defined()) throw ArgumentError("soft-labeled batch is incomplete");
  if (targets.dim() != 2 || targets.size(1) != class_count || targets.size(0) != images.size(0))
    throw ArgumentError("soft targets must be [B, K] matching the batch");
  if ((targets < 0).any().item<bool>()) throw ArgumentError("soft targets must be nonnegative");
  const auto sums = targets.to(torch::kFloat64).sum(1);
  if ((sums - 1.0).abs().max().item<double>() > 1e-6) throw ArgumentError("soft targets must sum to 1");
}

torch::Tensor soft_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets) {
  return -(targets.to(logits.scalar_type()) * torch::log_softmax(logits, 1)).sum(1).mean();
}

Classifier finetune(const Classifier& model, const BatchSource& batches, const FinetuneConfig& config,
                    const EpochCallback& on_epoch) {
  if (!batches) throw ArgumentError("finetune needs a batch source");
  if (config.epochs < 1) throw ArgumentError("finetune epochs must be positive");
  if (config.learning_rate < 0.0) throw ArgumentError("learning rate must be nonnegative");
  Classifier tuned = model.clone();
  torch::optim::Adam optimizer(tuned.net()->parameters(), torch::optim::AdamOptions(config.learning_rate));
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& batch : batches(epoch)) {
      batch.validate(tuned.class_count());
      optimizer.zero_grad();
      auto loss = soft_cross_entropy(tuned.logits(batch.images), batch.targets);
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingError("fine-tuning loss diverged", "epoch=" + std::to_string(epoch) +
                                                             " loss=" + std::to_string(value));
      if (config.learning_rate == 0.0) continue;
      loss.backward();
      optimizer.step();
    }
    if (on_epoch) on_epoch(epoch, tuned);
  }
  return tuned;
}

// ============================================================== interventions

namespace {

bool channel_units(const Classifier& model, const torch::Tensor& activations) {
  return activations.dim() > 2 && model.descriptor().vectorization == Vectorization::max_pool;
}

torch::Tensor unit_index(const std::vector<std::int64_t>& units, std::int64_t count) {
  for (auto u : units)
    if (u < 0 || u >= count)
      throw ArgumentError("unit index " + std::to_string(u) + " out of range [0," + std::to_string(count) + ")");
  return torch::tensor(units, torch::kInt64);
}

}  // namespace

torch::Tensor unit_values(const Classifier& model, const torch::Tensor& activations,
                          const std::vector<std::int64_t>& units) {
  if (channel_units(model, activations)) {
    return activations.index_select(1, unit_index(units, activations.size(1)));
  }
  const auto flat = activations.flatten(1);
  return flat.index_select(1, unit_index(units, flat.size(1)));
}

torch::Tensor intervene_forward(const Classifier& model, const torch::Tensor& x,
                                const std::vector<std::int64_t>& units, const torch::Tensor& values) {
  auto activations = model.phi1(x);
  if (units.empty()) return model.phi2(activations);
  const bool channels = channel_units(model, activations);
  auto target = channels ? activations.clone() : activations.flatten(1).clone();
  const auto index = unit_index(units, target.size(1));
  auto expected = target.index_select(1, index).sizes().vec();
  if (values.sizes().vec() != expected)
    throw ArgumentError("intervention values have shape " + shape_string(values.sizes()) + ", expected " +
                        shape_string(expected));
  target.index_copy_(1, index, values.to(target.scalar_type()));
  return model.phi2(channels ? target : target.view(activations.sizes()));
}

}  // namespace cfaudit::classifier
