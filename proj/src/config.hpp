#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "schedule.hpp"

namespace flowcast {

struct DatasetConfig {
  std::string kind = "chaotic1d";  // chaotic1d | mesh2d
  int grid_points = 64;            // chaotic1d lattice size
  int mesh_nodes = 256;            // mesh2d node count
  double dt_snapshot = 1.5;
  int steps = 200;
  int trajectories = 8;
  std::string path;  // dataset directory; empty means <out_dir>/dataset
};

struct ModelConfig {
  int hidden = 32;
  int heads = 2;
  int fourier_features = 8;
  int noise_embed_dim = 32;
  int encoder_levels = 1;
  int blocks_per_level = 1;
  int bottleneck_blocks = 2;
  int ffn_mult = 4;
  bool predict_increment = true;
  std::vector<double> voxel_sizes = {12.0};  // one entry per encoder level
  int knn_k = 3;
};

struct TrainConfig {
  int k = 1;  // rollout depth
  double curriculum_kimg = 0.0;
  double lr = 5e-4;
  double weight_decay = 0.0;
  double ramp_kimg = 0.0;
  double budget_kimg = 1.0;
  int batch_size = 8;
  int log_every = 10;
  double checkpoint_interval_kimg = 0.0;
};

struct SensingConfig {
  std::string strategy = "none";  // none | random | predictive | uncertainty
  int sensors = 8;
  // gap in median-edge-length multiples (euclidean) or grid points (grid)
  double gap = 2.0;
  std::string metric = "euclidean";  // euclidean | grid
  double gamma_hat = 0.1;
  double noise_var = 0.01;
  int ensemble = 8;
  double error_net_budget_kimg = 2.0;
  double error_net_lr = 1e-3;
};

struct ForecastConfig {
  int horizon = 10;
  int ensemble = 8;
  int start_step = 0;
  int trajectory = 0;
};

// Whole-run configuration; every field is checked against the owning module's
// invariants before any compute happens, and the hash of the canonical text
// is stamped into all artifacts.
struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  NoiseSchedule schedule;
  SamplerConfig sampler;
  TrainConfig training;
  SensingConfig sensing;
  ForecastConfig forecast;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  void validate() const;
};

// Strict JSON: unknown keys anywhere are errors.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Fixed-order key=value rendering; basis of the run hash.
std::string canonical_config_text(const RunConfig& cfg);
std::uint64_t run_config_hash(const RunConfig& cfg);

// Template config with all keys present, for bootstrapping run directories.
std::string default_config_json();

}  // namespace flowcast
