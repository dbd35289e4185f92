#include "cfaudit/common.hpp"

#include <atomic>
#include <iostream>

namespace cfaudit {

std::mutex& torch_seed_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace cfaudit

namespace cfaudit::log {

namespace {

std::mutex g_sink_mutex;
Sink g_sink;
std::atomic<bool> g_verbose{false};

}  // namespace

void set_warning_sink(Sink sink) {
  std::lock_guard lock(g_sink_mutex);
  g_sink = std::move(sink);
}

void warn(const std::string& message) {
  Sink sink;
  {
    std::lock_guard lock(g_sink_mutex);
    sink = g_sink;
  }
  if (sink) {
    sink(message);
  } else {
    std::cerr << "[warn] " << message << '\n';
  }
}

void info(const std::string& message) {
  if (g_verbose.load()) std::cerr << "[info] " << message << '\n';
}

void set_verbose(bool verbose) { g_verbose.store(verbose); }

ScopedWarningCapture::ScopedWarningCapture() {
  std::lock_guard lock(g_sink_mutex);
  previous_ = g_sink;
  g_sink = [this](const std::string& m) {
    std::lock_guard inner(mutex_);
    messages_.push_back(m);
  };
}

ScopedWarningCapture::~ScopedWarningCapture() {
  std::lock_guard lock(g_sink_mutex);
  g_sink = previous_;
}

std::vector<std::string> ScopedWarningCapture::messages() const {
  std::lock_guard lock(mutex_);
  return messages_;
}

bool ScopedWarningCapture::contains(const std::string& fragment) const {
  std::lock_guard lock(mutex_);
  for (const auto& m : messages_)
    if (m.find(fragment) != std::string::npos) return true;
  return false;
}

}  // namespace cfaudit::log
