#include "cfaudit/service.hpp"

#include <algorithm>
#include <cmath>

#include <httplib.h>

#include "cfaudit/classifier.hpp"
#include "cfaudit/common.hpp"
#include "cfaudit/image_io.hpp"
#include "cfaudit/metrics.hpp"

namespace cfaudit::service {

using json = nlohmann::json;

namespace {

struct HttpError {
  int status;
  std::string message;
};

Response error(int status, const std::string& message) { return {status, {{"error", message}}}; }

json parse_body(std::string_view body) {
  try {
    auto j = json::parse(body);
    if (!j.is_object()) throw HttpError{400, "request body must be a JSON object"};
    return j;
  } catch (const json::parse_error&) {
    throw HttpError{400, "request body is not valid JSON"};
  }
}

template <typename T>
T field(const json& body, const char* key) {
  const auto it = body.find(key);
  if (it == body.end()) throw HttpError{400, std::string("missing field '") + key + "'"};
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw HttpError{400, std::string("field '") + key + "' has the wrong type"};
  }
}

std::int64_t parse_count(const std::string& text, const char* name) {
  std::size_t used = 0;
  long long value = 0;
  try {
    value = std::stoll(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || value < 0) throw HttpError{400, std::string(name) + " must be a non-negative integer"};
  return value;
}

std::size_t sample_index(const SessionBundle& bundle, const std::string& id) {
  const auto index = bundle.samples.find(id);
  if (!index) throw HttpError{404, "unknown sample id '" + id + "'"};
  return *index;
}

std::string split_of(const data::LabeledSample& s) { return s.split.empty() ? "test" : s.split; }

const pce::ExplainerModel& explainer_of(const SessionBundle& bundle) {
  if (!bundle.explainer) throw HttpError{503, "bundle has no explainer"};
  return *bundle.explainer;
}

bool is_vector(const SessionBundle& bundle) { return bundle.samples.modality() == data::Modality::vector; }

// Image payload for the wire: base64 PNG for images, the coordinates for vectors.
void put_image(json& out, const SessionBundle& bundle, const torch::Tensor& image) {
  if (is_vector(bundle)) {
    out["point"] = metrics::to_vector(image.flatten());
  } else {
    out["image_b64"] = io::png_base64(image);
  }
}

torch::Tensor input_from(const SessionBundle& bundle, const json& body) {
  const bool by_id = body.contains("sample_id"), by_image = body.contains("image_b64"), by_point = body.contains("point");
  if (by_id + by_image + by_point != 1) throw HttpError{400, "give exactly one of sample_id, image_b64 or point"};
  if (by_id) return bundle.samples[sample_index(bundle, field<std::string>(body, "sample_id"))].image;
  const auto shape = bundle.samples.sample_shape();
  torch::Tensor x;
  if (by_point) {
    const auto values = field<std::vector<double>>(body, "point");
    x = torch::tensor(values, torch::kFloat32);
  } else {
    try {
      x = io::png_from_base64(field<std::string>(body, "image_b64"));
    } catch (const std::exception&) {
      throw HttpError{400, "image_b64 is not a base64 PNG"};
    }
    if (shape.size() == 3 && shape[0] == 1 && x.dim() == 3 && x.size(0) == 3) x = x.mean(0, true);
  }
  if (x.numel() != std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>()) ||
      (!by_point && x.sizes() != torch::IntArrayRef(shape)))
    throw HttpError{400, "input shape does not match the bundle"};
  return x.reshape(shape);
}

double condition(const json& body) {
  const auto c = field<double>(body, "c");
  if (!(c >= 0.0 && c <= 1.0)) throw HttpError{400, "c must lie in [0, 1]"};
  return c;
}

template <typename F>
Response guarded(F&& body) {
  try {
    return body();
  } catch (const HttpError& e) {
    return error(e.status, e.message);
  } catch (const ArgumentError& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

}  // namespace

Service::Service(ServiceOptions options) : options_(options) {
  if (options_.workers < 1) throw ArgumentError("service needs at least one worker");
}

std::shared_ptr<const Service::State> Service::state() const {
  std::lock_guard lock(mutex_);
  return state_;
}

void Service::install(std::shared_ptr<const SessionBundle> bundle) {
  if (!bundle) throw ArgumentError("null bundle");
  auto next = std::make_shared<State>();
  next->bundle = bundle;
  if (bundle->explainer) next->guard = std::make_shared<const ace::GuardedClassifier>(bundle->guard());
  std::lock_guard lock(mutex_);
  if (state_) throw StateError("service bundle is already installed");
  state_ = std::move(next);
}

#define CFAUDIT_REQUIRE_STATE                                                   \
  const auto st = state();                                                      \
  if (!st) return error(503, "bundle not loaded");                              \
  const auto& bundle = *st->bundle

Response Service::healthz() const {
  const auto st = state();
  if (!st) return {503, {{"status", "loading"}}};
  const auto& b = *st->bundle;
  json body{{"status", "ok"},
            {"format", b.manifest.value("format", std::string())},
            {"modality", data::to_string(b.samples.modality())},
            {"class_count", b.classifier.class_count()},
            {"sample_count", b.samples.size()},
            {"sample_shape", b.samples.sample_shape()},
            {"has_explainer", b.explainer.has_value()},
            {"probe_count", b.probes.size()},
            {"threshold", b.threshold},
            {"workers", options_.workers}};
  if (b.explainer) {
    body["target_class"] = b.explainer->config().target_class;
    body["bins"] = b.explainer->config().bins;
  }
  return {200, body};
}

Response Service::samples(const Query& query) const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    const auto split_it = query.find("split");
    const auto limit_it = query.find("limit");
    const auto limit = limit_it == query.end() ? options_.default_limit : parse_count(limit_it->second, "limit");
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < bundle.samples.size() && static_cast<std::int64_t>(picked.size()) < limit; ++i)
      if (split_it == query.end() || split_of(bundle.samples[i]) == split_it->second) picked.push_back(i);
    json list = json::array();
    if (!picked.empty()) {
      const auto x = bundle.samples.images(picked);
      torch::Tensor probs, f;
      const auto target = bundle.explainer ? bundle.explainer->config().target_class : std::int64_t{1};
      {
        torch::NoGradGuard no_grad;
        probs = bundle.classifier.predict(x).to(torch::kFloat64);
        f = bundle.explainer ? bundle.explainer->target_probability(x).to(torch::kFloat64) : probs.select(1, target);
      }
      for (std::size_t r = 0; r < picked.size(); ++r) {
        const auto& s = bundle.samples[picked[r]];
        json entry{{"id", s.id},
                   {"label", s.label},
                   {"split", split_of(s)},
                   {"f_x", f[static_cast<std::int64_t>(r)].item<double>()},
                   {"posterior", metrics::to_vector(probs[static_cast<std::int64_t>(r)])}};
        if (is_vector(bundle)) {
          entry["point"] = metrics::to_vector(s.image.flatten());
        } else {
          entry["thumbnail"] = io::png_base64(s.image);
        }
        list.push_back(entry);
      }
    }
    return Response{200, {{"count", list.size()}, {"samples", list}}};
  });
}

Response Service::explain(std::string_view body_text) const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    const auto body = parse_body(body_text);
    const auto& ex = explainer_of(bundle);
    const auto x = input_from(bundle, body).unsqueeze(0);
    const double c = condition(body);
    torch::NoGradGuard no_grad;
    const auto xc = ex.explain(x, c);
    json out{{"c", c},
             {"f_x", ex.target_probability(x)[0].item<double>()},
             {"f_xc", ex.target_probability(xc)[0].item<double>()},
             {"discriminator_score", ex.discriminator_score(xc)[0].item<double>()}};
    put_image(out, bundle, xc[0]);
    return Response{200, out};
  });
}

Response Service::sweep(std::string_view body_text) const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    const auto body = parse_body(body_text);
    const auto& ex = explainer_of(bundle);
    const auto id = field<std::string>(body, "sample_id");
    const auto x = bundle.samples[sample_index(bundle, id)].image;
    const auto bins = body.contains("bins") ? field<std::int64_t>(body, "bins") : ex.config().bins;
    if (bins < 1 || bins > options_.max_sweep_bins)
      throw HttpError{400, "bins must lie in [1, " + std::to_string(options_.max_sweep_bins) + "]"};
    json entries = json::array();
    for (const auto& panel : experiment::sweep_panels(ex, x, bins)) {
      json e{{"c", panel.c}, {"f_xc", panel.f_xc}};
      put_image(e, bundle, panel.image);
      entries.push_back(e);
    }
    torch::NoGradGuard no_grad;
    return Response{200, {{"sample_id", id},
                          {"f_x", ex.target_probability(x.unsqueeze(0))[0].item<double>()},
                          {"bins", bins},
                          {"entries", entries}}};
  });
}

Response Service::concepts() const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    json probes = json::array();
    for (const auto& p : bundle.probes)
      probes.push_back({{"concept", p.concept_name},
                        {"auc", p.auc},
                        {"recall", p.recall},
                        {"lambda", p.lambda},
                        {"support_size", p.support.size()},
                        {"sparsity", p.sparsity}});
    json effects = json::array();
    json ranking = json::array();
    if (bundle.effects) {
      ranking = bundle.effects->value("ranking", json::array());
      for (const auto& c : bundle.effects->value("concepts", json::array()))
        effects.push_back({{"concept", c.at("concept")},
                           {"control", c.value("control", false)},
                           {"unit_count", c.value("units", json::array()).size()},
                           {"ie", c.at("pooled").at("ie")},
                           {"de", c.at("pooled").at("de")},
                           {"ate", c.at("pooled").at("ate")}});
    }
    return Response{200, {{"probes", probes}, {"ranking", ranking}, {"effects", effects}}};
  });
}

Response Service::intervene(std::string_view body_text) const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    const auto body = parse_body(body_text);
    const auto name = field<std::string>(body, "concept");
    const auto x = bundle.samples[sample_index(bundle, field<std::string>(body, "sample_id"))].image.unsqueeze(0);
    const auto source =
        bundle.samples[sample_index(bundle, field<std::string>(body, "source_sample_id"))].image.unsqueeze(0);
    const auto probe = std::find_if(bundle.probes.begin(), bundle.probes.end(),
                                    [&](const mediation::ConceptProbe& p) { return p.concept_name == name; });
    if (probe == bundle.probes.end()) throw HttpError{404, "unknown concept '" + name + "'"};
    const auto& model = bundle.explainer ? bundle.explainer->classifier() : bundle.classifier;
    torch::NoGradGuard no_grad;
    const auto before = model.predict(x);
    const auto values = classifier::unit_values(model, model.phi1(source), probe->support);
    const auto after = classifier::intervene_forward(model, x, probe->support, values);
    return Response{200, {{"concept", name},
                          {"units", probe->support},
                          {"posterior_before", metrics::to_vector(before[0])},
                          {"posterior_after", metrics::to_vector(after[0])}}};
  });
}

Response Service::uncertainty(const Query& query) const {
  CFAUDIT_REQUIRE_STATE;
  return guarded([&] {
    const auto it = query.find("sample_id");
    if (it == query.end()) throw HttpError{400, "missing query parameter 'sample_id'"};
    if (!st->guard) throw HttpError{503, "bundle has no explainer"};
    const auto x = bundle.samples[sample_index(bundle, it->second)].image.unsqueeze(0);
    const auto& guard = *st->guard;
    torch::NoGradGuard no_grad;
    const auto outcome = guard.predict(x).at(0);
    const bool abstain = std::holds_alternative<ace::Abstain>(outcome);
    json out{{"sample_id", it->second},
             {"pe", classifier::predictive_entropy(guard.model(), x)[0].item<double>()},
             {"discriminator_score", guard.score(x)[0].item<double>()},
             {"threshold", guard.threshold()},
             {"abstain", abstain}};
    out["posterior"] = abstain ? json(nullptr) : json(metrics::to_vector(std::get<torch::Tensor>(outcome)));
    return Response{200, out};
  });
}

#undef CFAUDIT_REQUIRE_STATE

Response Service::handle(std::string_view method, std::string_view path, const Query& query,
                         std::string_view body) const {
  if (method == "GET") {
    if (path == "/healthz") return healthz();
    if (path == "/samples") return samples(query);
    if (path == "/concepts") return concepts();
    if (path == "/uncertainty") return uncertainty(query);
  } else if (method == "POST") {
    if (path == "/explain") return explain(body);
    if (path == "/explain/sweep") return sweep(body);
    if (path == "/intervene") return intervene(body);
  }
  return error(404, "no route for " + std::string(method) + " " + std::string(path));
}

// ============================================================== HTTP transport

struct Server::Impl {
  explicit Impl(const Service& s) : service(s) {}
  const Service& service;
  httplib::Server http;
};

Server::Server(const Service& service, std::optional<std::string> static_dir)
    : impl_(std::make_unique<Impl>(service)) {
  auto& http = impl_->http;
  const auto workers = service.options().workers;
  http.new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
  const auto forward = [this](const httplib::Request& req, httplib::Response& res) {
    Query query;
    for (const auto& [key, value] : req.params) query.emplace(key, value);
    const auto out = impl_->service.handle(req.method, req.path, query, req.body);
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  for (const char* path : {"/healthz", "/samples", "/concepts", "/uncertainty"}) http.Get(path, forward);
  for (const char* path : {"/explain", "/explain/sweep", "/intervene"}) http.Post(path, forward);
  if (static_dir && !http.set_mount_point("/", *static_dir))
    throw ArgumentError("static directory does not exist: " + *static_dir);
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->http.bind_to_any_port(host) : (impl_->http.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw StateError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void Server::listen() { impl_->http.listen_after_bind(); }

void Server::stop() { impl_->http.stop(); }

}  // namespace cfaudit::service
