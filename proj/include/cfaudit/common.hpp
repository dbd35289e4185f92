#pragma once

#include <cstdint>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfaudit {

/// Invalid argument or precondition violation.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation called on an object that is not in a usable state (e.g. untrained).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Optimisation diverged (NaN/Inf loss) or otherwise failed to train.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::string diagnostics)
      : std::runtime_error(what + " [" + diagnostics + "]"), diagnostics_(std::move(diagnostics)) {}
  explicit TrainingError(const std::string& what) : std::runtime_error(what) {}

  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

/// Malformed or incomplete experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Held while seeding torch's global generator and building seeded modules.
std::mutex& torch_seed_mutex();

namespace log {

using Sink = std::function<void(const std::string&)>;

// Warnings go to stderr unless a sink is installed (tests capture them).
void set_warning_sink(Sink sink);
void warn(const std::string& message);
void info(const std::string& message);
void set_verbose(bool verbose);

/// Collects warnings emitted while alive; restores the previous sink on exit.
class ScopedWarningCapture {
 public:
  ScopedWarningCapture();
  ~ScopedWarningCapture();
  ScopedWarningCapture(const ScopedWarningCapture&) = delete;
  ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

  std::vector<std::string> messages() const;
  bool contains(const std::string& fragment) const;

 private:
  mutable std::mutex mutex_;
  std::vector<std::string> messages_;
  Sink previous_;
};

}  // namespace log

}  // namespace cfaudit
