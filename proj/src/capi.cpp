#include "flowcast/flowcast.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <new>
#include <stdexcept>
#include <string>

#include "config.hpp"
#include "runner.hpp"
#include "runtime.hpp"

struct fc_config {
  flowcast::RunConfig cfg;
};

namespace {

thread_local std::string g_last_error;

bool io_flavored(const std::string& msg) {
  return msg.find("cannot open") != std::string::npos ||
         msg.find("not found") != std::string::npos ||
         msg.find("write failed") != std::string::npos ||
         msg.find("locked") != std::string::npos;
}

template <typename F>
fc_status guarded(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return FC_OK;
  } catch (const std::invalid_argument& e) {
    g_last_error = e.what();
    return FC_ERROR_INVALID_ARGUMENT;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return FC_ERROR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return io_flavored(g_last_error) ? FC_ERROR_IO : FC_ERROR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return FC_ERROR_RUNTIME;
  }
}

fc_status bad_argument(const char* msg) {
  g_last_error = msg;
  return FC_ERROR_INVALID_ARGUMENT;
}

std::string strategy_or_config(const fc_config* cfg, const char* strategy) {
  if (strategy && *strategy) return strategy;
  return cfg->cfg.sensing.strategy;
}

}  // namespace

extern "C" {

const char* fc_version(void) { return "0.1.0"; }

const char* fc_last_error(void) { return g_last_error.c_str(); }

fc_status fc_init_threads(int* applied) {
  return guarded([&] {
    const int n = flowcast::env_thread_count();
    flowcast::set_max_threads(n);
    if (applied) *applied = flowcast::max_threads();
  });
}

fc_status fc_config_load(const char* path, fc_config** out) {
  if (!path || !out) return bad_argument("fc_config_load: null argument");
  *out = nullptr;
  return guarded([&] {
    auto handle = new fc_config{flowcast::load_run_config(path)};
    *out = handle;
  });
}

fc_status fc_config_parse(const char* json_text, fc_config** out) {
  if (!json_text || !out) return bad_argument("fc_config_parse: null argument");
  *out = nullptr;
  return guarded([&] {
    auto handle = new fc_config{flowcast::parse_run_config(json_text)};
    *out = handle;
  });
}

void fc_config_free(fc_config* cfg) { delete cfg; }

fc_status fc_config_hash(const fc_config* cfg, uint64_t* out) {
  if (!cfg || !out) return bad_argument("fc_config_hash: null argument");
  return guarded([&] { *out = flowcast::run_config_hash(cfg->cfg); });
}

fc_status fc_config_out_dir(const fc_config* cfg, char* buf, size_t cap) {
  if (!cfg || !buf || cap == 0) return bad_argument("fc_config_out_dir: null argument");
  return guarded([&] {
    const std::string& dir = cfg->cfg.out_dir;
    if (dir.size() + 1 > cap) throw std::invalid_argument("fc_config_out_dir: buffer too small");
    std::memcpy(buf, dir.c_str(), dir.size() + 1);
  });
}

fc_status fc_default_config(char** out) {
  if (!out) return bad_argument("fc_default_config: null argument");
  *out = nullptr;
  return guarded([&] {
    const std::string text = flowcast::default_config_json();
    char* copy = static_cast<char*>(std::malloc(text.size() + 1));
    if (!copy) throw std::bad_alloc();
    std::memcpy(copy, text.c_str(), text.size() + 1);
    *out = copy;
  });
}

void fc_string_free(char* s) { std::free(s); }

fc_status fc_cmd_generate_data(const fc_config* cfg) {
  if (!cfg) return bad_argument("fc_cmd_generate_data: null config");
  return guarded([&] { flowcast::run_generate_data(cfg->cfg); });
}

fc_status fc_cmd_train(const fc_config* cfg) {
  if (!cfg) return bad_argument("fc_cmd_train: null config");
  return guarded([&] { flowcast::run_train(cfg->cfg); });
}

fc_status fc_cmd_train_error_net(const fc_config* cfg) {
  if (!cfg) return bad_argument("fc_cmd_train_error_net: null config");
  return guarded([&] { flowcast::run_train_error_net(cfg->cfg); });
}

fc_status fc_cmd_forecast(const fc_config* cfg) {
  if (!cfg) return bad_argument("fc_cmd_forecast: null config");
  return guarded([&] { flowcast::run_forecast(cfg->cfg); });
}

fc_status fc_cmd_assimilate(const fc_config* cfg, const char* strategy) {
  if (!cfg) return bad_argument("fc_cmd_assimilate: null config");
  return guarded([&] { flowcast::run_assimilate(cfg->cfg, strategy_or_config(cfg, strategy)); });
}

fc_status fc_cmd_place_sensors(const fc_config* cfg, const char* strategy) {
  if (!cfg) return bad_argument("fc_cmd_place_sensors: null config");
  return guarded(
      [&] { flowcast::run_place_sensors(cfg->cfg, strategy_or_config(cfg, strategy)); });
}

fc_status fc_cmd_verify(const fc_config* cfg, int* passed) {
  if (!cfg || !passed) return bad_argument("fc_cmd_verify: null argument");
  return guarded([&] {
    const flowcast::VerifyReport report = flowcast::run_verify(cfg->cfg);
    *passed = report.passed ? 1 : 0;
  });
}

fc_status fc_cmd_benchmark_placement(const fc_config* cfg, double* loglog_slope) {
  if (!cfg) return bad_argument("fc_cmd_benchmark_placement: null config");
  return guarded([&] {
    const flowcast::PlacementBenchmark bench = flowcast::run_benchmark_placement(cfg->cfg);
    if (loglog_slope) *loglog_slope = bench.loglog_slope;
  });
}

}  // extern "C"
