// flowcast command-line front end. Talks to the core exclusively through the
// C API so the binary exercises the same surface as any other embedder.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "flowcast/flowcast.h"

namespace {

int fail(fc_status status) {
  std::fprintf(stderr, "error: %s\n", fc_last_error());
  switch (status) {
    case FC_ERROR_INVALID_ARGUMENT:
      return 2;
    case FC_ERROR_IO:
      return 3;
    default:
      return 1;
  }
}

struct ConfigHandle {
  fc_config* cfg = nullptr;
  ~ConfigHandle() { fc_config_free(cfg); }
};

int load_config(const std::string& path, ConfigHandle& handle) {
  const fc_status status = fc_config_load(path.c_str(), &handle.cfg);
  if (status != FC_OK) return fail(status);
  return 0;
}

std::string out_dir_of(const ConfigHandle& handle) {
  char buf[4096];
  if (fc_config_out_dir(handle.cfg, buf, sizeof(buf)) != FC_OK) return "";
  return buf;
}

void print_provenance(const ConfigHandle& handle) {
  uint64_t hash = 0;
  if (fc_config_hash(handle.cfg, &hash) == FC_OK) {
    std::printf("config %016llx\n", static_cast<unsigned long long>(hash));
    std::fflush(stdout);  // keep ordering sane when stderr follows
  }
}

int print_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::fprintf(stderr, "error: cannot open %s\n", path.c_str());
    return 3;
  }
  std::cout << in.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowcast: probabilistic forecasting and sensor placement on meshes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fc_version()));

  int threads = 0;
  if (fc_init_threads(&threads) != FC_OK) return fail(FC_ERROR_RUNTIME);

  std::string config_path;
  std::string strategy;
  std::string init_path = "flowcast.json";
  bool force = false;

  auto add_config_option = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "run configuration file (JSON)")
        ->required();
  };

  CLI::App* init = app.add_subcommand("init", "write a template config with every key");
  init->add_option("-o,--output", init_path, "where to write the template");
  init->add_flag("--force", force, "overwrite an existing file");

  CLI::App* generate = app.add_subcommand("generate-data", "synthesize the dataset");
  add_config_option(generate);
  CLI::App* train = app.add_subcommand("train", "train the denoiser (resumes if possible)");
  add_config_option(train);
  CLI::App* train_err =
      app.add_subcommand("train-error-net", "fit the error predictor to a frozen denoiser");
  add_config_option(train_err);
  CLI::App* forecast = app.add_subcommand("forecast", "autoregressive ensemble rollout");
  add_config_option(forecast);
  CLI::App* assimilate =
      app.add_subcommand("assimilate", "guided rollout with per-step sensor readings");
  add_config_option(assimilate);
  assimilate->add_option("-s,--strategy", strategy,
                         "none|random|predictive|uncertainty (default: config)");
  CLI::App* place = app.add_subcommand("place-sensors", "one-shot sensor placement");
  add_config_option(place);
  place->add_option("-s,--strategy", strategy,
                    "random|predictive|uncertainty (default: config)");
  CLI::App* verify = app.add_subcommand("verify", "run the theory checks, report margins");
  add_config_option(verify);
  CLI::App* bench =
      app.add_subcommand("benchmark-placement", "time greedy placement against budget");
  add_config_option(bench);

  CLI11_PARSE(app, argc, argv);

  if (threads > 1) std::printf("threads %d\n", threads);

  if (init->parsed()) {
    if (!force && std::ifstream(init_path)) {
      std::fprintf(stderr, "error: %s exists (use --force to overwrite)\n",
                   init_path.c_str());
      return 3;
    }
    char* text = nullptr;
    const fc_status status = fc_default_config(&text);
    if (status != FC_OK) return fail(status);
    std::ofstream out(init_path);
    out << text;
    fc_string_free(text);
    if (!out) {
      std::fprintf(stderr, "error: cannot write %s\n", init_path.c_str());
      return 3;
    }
    std::printf("wrote %s\n", init_path.c_str());
    return 0;
  }

  ConfigHandle handle;
  if (const int rc = load_config(config_path, handle); rc != 0) return rc;
  print_provenance(handle);
  const std::string out_dir = out_dir_of(handle);

  if (generate->parsed()) {
    const fc_status status = fc_cmd_generate_data(handle.cfg);
    if (status != FC_OK) return fail(status);
    std::printf("wrote dataset under %s\n", out_dir.c_str());
    return 0;
  }
  if (train->parsed()) {
    const fc_status status = fc_cmd_train(handle.cfg);
    if (status != FC_OK) return fail(status);
    std::printf("wrote %s/denoiser.ckpt and %s/train_metrics.csv\n", out_dir.c_str(),
                out_dir.c_str());
    return 0;
  }
  if (train_err->parsed()) {
    const fc_status status = fc_cmd_train_error_net(handle.cfg);
    if (status != FC_OK) return fail(status);
    std::printf("wrote %s/errornet.ckpt and %s/errornet_metrics.csv\n", out_dir.c_str(),
                out_dir.c_str());
    return 0;
  }
  if (forecast->parsed()) {
    const fc_status status = fc_cmd_forecast(handle.cfg);
    if (status != FC_OK) return fail(status);
    return print_file(out_dir + "/forecast.csv");
  }
  if (assimilate->parsed()) {
    const fc_status status =
        fc_cmd_assimilate(handle.cfg, strategy.empty() ? nullptr : strategy.c_str());
    if (status != FC_OK) return fail(status);
    std::printf("wrote assimilation outputs under %s\n", out_dir.c_str());
    return 0;
  }
  if (place->parsed()) {
    const fc_status status =
        fc_cmd_place_sensors(handle.cfg, strategy.empty() ? nullptr : strategy.c_str());
    if (status != FC_OK) return fail(status);
    std::printf("wrote sensor log under %s\n", out_dir.c_str());
    return 0;
  }
  if (verify->parsed()) {
    int passed = 0;
    const fc_status status = fc_cmd_verify(handle.cfg, &passed);
    if (status != FC_OK) return fail(status);
    print_file(out_dir + "/verify_report.txt");
    return passed ? 0 : 1;
  }
  if (bench->parsed()) {
    double slope = 0.0;
    const fc_status status = fc_cmd_benchmark_placement(handle.cfg, &slope);
    if (status != FC_OK) return fail(status);
    std::printf("loglog_slope %.4f\n", slope);
    return print_file(out_dir + "/benchmark_placement.csv");
  }
  return 2;
}
