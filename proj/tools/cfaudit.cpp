// Command-line harness: one subcommand per pipeline step, each writing a fresh run directory.

#include <csignal>
#include <iostream>
#include <memory>

#include <CLI11.hpp>

#include "cfaudit/common.hpp"
#include "cfaudit/experiment.hpp"
#include "cfaudit/service.hpp"

namespace {

using namespace cfaudit;
namespace fs = std::filesystem;

constexpr int kConfigError = 2;
constexpr int kTrainingError = 3;

struct ConfigArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string output;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.config, "experiment config (JSON with schema_version)")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", args.overrides, "override a config value, e.g. --set explainer.epochs=5")
      ->type_name("KEY=VALUE");
  cmd->add_option("-o,--output", args.output,
                  std::string("output root (default: config 'output', then $") + experiment::kOutputRootEnv + ", then ./runs)");
}

experiment::Config resolve(const ConfigArgs& args) {
  auto config = experiment::Config::load(args.config);
  for (const auto& o : args.overrides) config.set(o);
  if (!args.output.empty()) config.set("output=" + nlohmann::json(args.output).dump());
  return config;
}

using Step = nlohmann::json (*)(const experiment::Config&, const fs::path&);

int run_step(const ConfigArgs& args, const char* name, Step step) {
  const auto config = resolve(args);
  const auto dir = experiment::create_run_dir(config, name);
  step(config, dir);
  std::cout << dir.string() << "\n";
  return 0;
}

service::Server* active_server = nullptr;

void handle_signal(int) {
  if (active_server) active_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfaudit: counterfactual explanation, concept mediation and uncertainty repair for image classifiers"};
  app.require_subcommand(1);
  bool verbose = false;
  int threads = 0;
  app.add_flag("-v,--verbose", verbose, "log training progress");
  app.add_option("--threads", threads, "torch intra-op threads (0 keeps the default)");

  struct Simple {
    const char* name;
    const char* help;
    Step step;
    ConfigArgs args;
  };
  std::vector<Simple> simple{
      {"train-classifier", "train the black-box classifier", &experiment::run_train_classifier, {}},
      {"train-setrep", "train the attention set model on generated bags", &experiment::run_train_setrep, {}},
      {"train-pce", "train classifier (or load classifier.checkpoint) and the explainer; the run dir is a bundle",
       &experiment::run_train_pce, {}},
      {"evaluate-metrics", "CV, consistency, FID and deletion metrics for a bundle", &experiment::run_evaluate_metrics, {}},
      {"mediate", "concept probes, mediation effects and surrogate rules for a bundle", &experiment::run_mediate, {}},
      {"ace-finetune", "augmentation pool and counterfactual fine-tuning; writes a new bundle",
       &experiment::run_ace_finetune, {}},
      {"evaluate-uncertainty", "AiD / near-OOD / far-OOD separation of a guarded bundle",
       &experiment::run_evaluate_uncertainty, {}},
  };
  std::vector<CLI::App*> simple_cmds;
  for (auto& s : simple) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_config_options(cmd, s.args);
    simple_cmds.push_back(cmd);
  }

  experiment::ExplainRequest explain;
  std::string explain_bundle, explain_sample, explain_image, explain_output;
  double explain_c = -1.0;
  auto* explain_cmd = app.add_subcommand("explain", "counterfactual image or sweep strip for one input");
  explain_cmd->add_option("-b,--bundle", explain_bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  auto* sample_opt = explain_cmd->add_option("--sample", explain_sample, "sample id from the bundle's sample index");
  auto* image_opt = explain_cmd->add_option("--image", explain_image, "PNG input")->check(CLI::ExistingFile);
  sample_opt->excludes(image_opt);
  explain_cmd->add_option("--c", explain_c, "requested target-class posterior in [0, 1]");
  explain_cmd->add_option("--sweep-bins", explain.sweep_bins, "strip with one panel per bin centre")
      ->check(CLI::PositiveNumber);
  explain_cmd->add_option("-o,--output", explain_output, "output root");

  std::string serve_bundle, serve_host = "127.0.0.1", serve_static;
  int serve_port = 8080;
  std::size_t serve_workers = 4;
  auto* serve_cmd = app.add_subcommand("serve", "read-only JSON service over a bundle");
  serve_cmd->add_option("-b,--bundle", serve_bundle, "bundle directory")->required()->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--host", serve_host, "bind address");
  serve_cmd->add_option("-p,--port", serve_port, "port (0 picks a free one)");
  serve_cmd->add_option("--workers", serve_workers, "concurrent request bound")->check(CLI::PositiveNumber);
  serve_cmd->add_option("--static", serve_static, "directory served at / (explorer build)")
      ->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }
  log::set_verbose(verbose);
  if (threads > 0) torch::set_num_threads(threads);

  try {
    for (std::size_t i = 0; i < simple.size(); ++i)
      if (simple_cmds[i]->parsed()) return run_step(simple[i].args, simple[i].name, simple[i].step);

    if (explain_cmd->parsed()) {
      if (explain_sample.empty() == explain_image.empty()) throw ConfigError("explain needs --sample or --image");
      explain.bundle = explain_bundle;
      if (!explain_sample.empty()) explain.sample_id = explain_sample;
      if (!explain_image.empty()) explain.image = explain_image;
      if (explain_c >= 0) explain.c = explain_c;
      nlohmann::json doc{{"schema_version", experiment::kSchemaVersion},
                         {"command", "explain"},
                         {"bundle", explain_bundle},
                         {"sample", explain_sample},
                         {"image", explain_image},
                         {"sweep_bins", explain.sweep_bins}};
      if (explain.c) doc["c"] = *explain.c;
      if (!explain_output.empty()) doc["output"] = explain_output;
      const experiment::Config config(doc);
      const auto dir = experiment::create_run_dir(config, "explain");
      experiment::run_explain(explain, dir);
      std::cout << dir.string() << "\n";
      return 0;
    }

    if (serve_cmd->parsed()) {
      service::Service svc(service::ServiceOptions{serve_workers});
      service::Server server(svc, serve_static.empty() ? std::nullopt : std::optional<std::string>(serve_static));
      const int port = server.bind(serve_host, serve_port);
      active_server = &server;
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      std::thread loader([&] {
        try {
          svc.install(std::make_shared<const experiment::Bundle>(experiment::Bundle::load(serve_bundle)));
          std::cerr << "bundle loaded from " << serve_bundle << "\n";
        } catch (const std::exception& e) {
          std::cerr << "failed to load bundle: " << e.what() << "\n";
          server.stop();
        }
      });
      std::cout << "serving on http://" << serve_host << ":" << port << std::endl;
      server.listen();
      loader.join();
      active_server = nullptr;
      return svc.ready() ? 0 : kConfigError;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kTrainingError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
