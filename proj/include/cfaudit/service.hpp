#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cfaudit/ace.hpp"
#include "cfaudit/experiment.hpp"

namespace cfaudit::service {

/// Frozen artifacts served read-only; loaded once before the service accepts requests.
using SessionBundle = experiment::Bundle;

struct Response {
  int status = 200;
  nlohmann::json body;
};

struct ServiceOptions {
  std::size_t workers = 4;          // concurrent request bound
  std::int64_t max_sweep_bins = 64;
  std::int64_t default_limit = 20;  // /samples without limit
};

using Query = std::map<std::string, std::string>;

/// Endpoint logic, independent of the transport. All handlers are const and safe to call concurrently.
class Service {
 public:
  explicit Service(ServiceOptions options = {});

  /// Installs the bundle; a second call is a StateError.
  void install(std::shared_ptr<const SessionBundle> bundle);
  bool ready() const { return state() != nullptr; }
  const ServiceOptions& options() const { return options_; }

  Response samples(const Query& query) const;
  Response explain(std::string_view body) const;
  Response sweep(std::string_view body) const;
  Response concepts() const;
  Response intervene(std::string_view body) const;
  Response uncertainty(const Query& query) const;
  Response healthz() const;

  /// Dispatch on method and path; unknown routes answer 404.
  Response handle(std::string_view method, std::string_view path, const Query& query, std::string_view body) const;

 private:
  struct State {
    std::shared_ptr<const SessionBundle> bundle;
    std::shared_ptr<const ace::GuardedClassifier> guard;  // null without an explainer
  };

  std::shared_ptr<const State> state() const;

  ServiceOptions options_;
  mutable std::mutex mutex_;  // guards the pointer swap only
  std::shared_ptr<const State> state_;
};

/// HTTP transport over a Service (JSON bodies, images as base64 PNG).
class Server {
 public:
  explicit Server(const Service& service, std::optional<std::string> static_dir = std::nullopt);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds without serving; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cfaudit::service
