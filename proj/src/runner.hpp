#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "config.hpp"
#include "datagen.hpp"
#include "sensing.hpp"
#include "tensor.hpp"

namespace flowcast {

// Artifact locations inside the run directory.
struct RunPaths {
  std::string out_dir;
  std::string dataset_dir;
  std::string checkpoint;
  std::string error_net;
  std::string train_metrics;
  std::string error_net_metrics;
  std::string forecast_csv;
  std::string verify_report;
  std::string benchmark_csv;

  std::string assimilate_csv(const std::string& strategy) const;
  std::string sensors_csv(const std::string& strategy) const;
};

RunPaths run_paths(const RunConfig& cfg);

// Exclusive advisory lock on <out_dir>/.lock, held for the command's
// lifetime; a second writer gets an immediate error instead of racing.
class RunLock {
 public:
  explicit RunLock(const std::string& out_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

// FLOWCAST_THREADS (>= 1) or 1 when unset/garbage.
int env_thread_count();

double mean_abs_error(const Tensor& a, const Tensor& b);

struct ForecastRow {
  int step = 0;           // horizon offset, 1-based
  double member_mean = 0.0;  // ensemble+node mean of the forecast state
  double member_std = 0.0;   // node mean of the ensemble std
  double mae = 0.0;          // vs ground truth, normalized units
};

void run_generate_data(const RunConfig& cfg);
void run_train(const RunConfig& cfg);
void run_train_error_net(const RunConfig& cfg);
std::vector<ForecastRow> run_forecast(const RunConfig& cfg);
std::vector<ForecastRow> run_assimilate(const RunConfig& cfg, const std::string& strategy);
SensorSet run_place_sensors(const RunConfig& cfg, const std::string& strategy);

// Re-reads a sensor log and re-checks the pairwise gap on every step group;
// throws on any violation. Returns selections grouped by step.
std::vector<SensorSet> load_sensor_log(const std::string& path, const MeshGraph& graph,
                                       GapMetric metric, const std::vector<int>& grid_dims,
                                       double min_gap);

struct VerifyCheck {
  std::string name;
  bool passed = false;
  double margin = 0.0;  // distance to the failure boundary, sign = pass
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool passed = false;
};

VerifyReport run_verify(const RunConfig& cfg);

struct PlacementBenchmark {
  std::vector<int> budgets;
  std::vector<double> seconds;
  double loglog_slope = 0.0;
};

PlacementBenchmark benchmark_placement(int nodes, const std::vector<int>& budgets,
                                       std::uint64_t seed, const std::string& csv_path = "",
                                       std::uint64_t config_hash_value = 0);
PlacementBenchmark run_benchmark_placement(const RunConfig& cfg);

}  // namespace flowcast
