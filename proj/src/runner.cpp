#include "runner.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "denoiser.hpp"
#include "sampler.hpp"
#include "theory.hpp"
#include "training.hpp"

namespace flowcast {
namespace {

namespace fs = std::filesystem;

// Per-command rng stream salts; assimilate shares the forecast salt so the
// none strategy reproduces forecast output bit-exactly.
constexpr std::uint64_t kSaltTrain = 0xD2;
constexpr std::uint64_t kSaltErrNet = 0xD3;
constexpr std::uint64_t kSaltForecast = 0xD4;
constexpr std::uint64_t kSaltPlace = 0xD5;
constexpr std::uint64_t kSaltVerify = 0xD6;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

std::string hex16(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string meta_comment(std::uint64_t hash, std::uint64_t seed) {
  return "# config " + hex16(hash) + " seed " + std::to_string(seed) + "\n";
}

std::FILE* open_or_throw(const std::string& path, const char* mode) {
  std::FILE* f = std::fopen(path.c_str(), mode);
  if (!f) throw std::runtime_error("cannot open " + path);
  return f;
}

void close_or_throw(std::FILE* f, const std::string& path) {
  if (std::fclose(f) != 0) throw std::runtime_error("write failed: " + path);
}

// Trailing provenance record after the checkpoint "end" marker; loaders stop
// at "end", so the line is invisible to them.
void append_artifact_meta(const std::string& path, std::uint64_t hash, std::uint64_t seed) {
  std::FILE* f = open_or_throw(path, "a");
  std::fprintf(f, "meta %s %llu\n", hex16(hash).c_str(),
               static_cast<unsigned long long>(seed));
  close_or_throw(f, path);
}

// Returns true and fills hash when the file carries a trailing meta record.
bool read_artifact_meta(const std::string& path, std::uint64_t& hash) {
  std::FILE* f = std::fopen(path.c_str(), "r");
  if (!f) return false;
  char tok[64];
  bool found = false;
  while (std::fscanf(f, "%63s", tok) == 1) {
    if (std::strcmp(tok, "meta") != 0) continue;
    unsigned long long h = 0, s = 0;
    if (std::fscanf(f, "%llx %llu", &h, &s) == 2) {
      hash = h;
      found = true;  // keep scanning; the last record wins
    }
  }
  std::fclose(f);
  return found;
}

Rng command_rng(const RunConfig& cfg, std::uint64_t salt) {
  Rng root(cfg.seed);
  return root.fork(salt);
}

TrajectoryDataset load_data(const RunPaths& paths) {
  require(fs::exists(paths.dataset_dir),
          "dataset not found at " + paths.dataset_dir + " (run generate-data first)");
  TrajectoryDataset ds = read_dataset(paths.dataset_dir);
  ds.validate();
  return ds;
}

DenoiserConfig derive_denoiser_config(const RunConfig& cfg, const TrajectoryDataset& ds) {
  DenoiserConfig d;
  d.state_channels = ds.num_channels;
  d.cond_channels = ds.num_channels;
  d.pos_dim = ds.topology.dim;
  d.hidden = cfg.model.hidden;
  d.num_heads = cfg.model.heads;
  d.fourier_features = cfg.model.fourier_features;
  d.noise_embed_dim = cfg.model.noise_embed_dim;
  d.encoder_levels = cfg.model.encoder_levels;
  d.blocks_per_level = cfg.model.blocks_per_level;
  d.bottleneck_blocks = cfg.model.bottleneck_blocks;
  d.ffn_mult = cfg.model.ffn_mult;
  d.predict_increment = cfg.model.predict_increment;
  d.sigma_data = cfg.schedule.sigma_data;
  d.validate();
  return d;
}

GraphHierarchy make_hierarchy(const RunConfig& cfg, const TrajectoryDataset& ds) {
  PoolingConfig pc;
  pc.voxel_sizes = cfg.model.voxel_sizes;
  pc.knn_k = cfg.model.knn_k;
  pc.validate();
  return build_hierarchy(ds.topology, pc);
}

// Fresh files get the provenance comment plus the header; existing ones are
// appended to so resumes keep one header.
void ensure_csv(const std::string& path, const std::string& header, std::uint64_t hash,
                std::uint64_t seed) {
  if (fs::exists(path)) return;
  std::FILE* f = open_or_throw(path, "w");
  std::fputs(meta_comment(hash, seed).c_str(), f);
  std::fprintf(f, "%s\n", header.c_str());
  close_or_throw(f, path);
}

double metrics_last_kimg(const std::string& path, long long& rows) {
  rows = 0;
  double last = 0.0;
  std::ifstream in(path);
  if (!in) return 0.0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || !std::isdigit(static_cast<unsigned char>(line[0])))
      continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) continue;
    last = std::strtod(line.substr(c1 + 1, c2 - c1 - 1).c_str(), nullptr);
    ++rows;
  }
  return last;
}

GapMetric gap_metric_of(const RunConfig& cfg) {
  return cfg.sensing.metric == "grid" ? GapMetric::grid_chebyshev
                                      : GapMetric::position_euclidean;
}

std::vector<int> grid_dims_of(const RunConfig& cfg) {
  if (cfg.sensing.metric != "grid") return {};
  return {cfg.dataset.grid_points};
}

// The config quotes the euclidean gap in median-edge-length multiples and the
// grid gap directly in lattice points.
double absolute_gap(const RunConfig& cfg, const MeshGraph& topology) {
  if (cfg.sensing.metric == "grid") return cfg.sensing.gap;
  return cfg.sensing.gap * median_edge_length(topology);
}

void write_forecast_csv(const std::string& path, const std::vector<ForecastRow>& rows,
                        std::uint64_t hash, std::uint64_t seed) {
  std::FILE* f = open_or_throw(path, "w");
  std::fputs(meta_comment(hash, seed).c_str(), f);
  std::fprintf(f, "step,member_mean,member_std,mae\n");
  for (const auto& r : rows)
    std::fprintf(f, "%d,%.17g,%.17g,%.17g\n", r.step, r.member_mean, r.member_std, r.mae);
  close_or_throw(f, path);
}

void write_sensor_csv(const std::string& path, const std::vector<SensorSet>& log,
                      std::uint64_t hash, std::uint64_t seed) {
  std::FILE* f = open_or_throw(path, "w");
  std::fputs(meta_comment(hash, seed).c_str(), f);
  std::fprintf(f, "step,order,node,strategy,truncated\n");
  for (const auto& set : log)
    for (std::size_t i = 0; i < set.nodes.size(); ++i)
      std::fprintf(f, "%d,%zu,%d,%s,%d\n", set.step_index, i, set.nodes[i],
                   set.strategy.c_str(), set.truncated ? 1 : 0);
  close_or_throw(f, path);
}

struct PlacementTools {
  GapMetric metric = GapMetric::position_euclidean;
  std::vector<int> grid_dims;
  SensorBudget budget;
  ErrorPredictorNet predictor;
  bool has_predictor = false;
};

PlacementTools placement_tools(const RunConfig& cfg, const TrajectoryDataset& ds,
                               const RunPaths& paths, const std::string& strategy) {
  PlacementTools t;
  t.metric = gap_metric_of(cfg);
  t.grid_dims = grid_dims_of(cfg);
  t.budget.s = cfg.sensing.sensors;
  t.budget.g = absolute_gap(cfg, ds.topology);
  t.budget.validate();
  if (strategy == "predictive") {
    require(fs::exists(paths.error_net),
            "error predictor not found at " + paths.error_net +
                " (run train-error-net first)");
    t.predictor = load_error_predictor(paths.error_net);
    t.has_predictor = true;
  }
  if (strategy == "uncertainty")
    require(cfg.sensing.ensemble >= 2, "uncertainty strategy needs sensing.ensemble >= 2");
  return t;
}

SensorSet choose_sensors(const std::string& strategy, const PlacementTools& tools,
                         const RunConfig& cfg, const TrajectoryDataset& ds,
                         const GraphHierarchy& hier, const DenoiseFn& denoiser,
                         const Tensor& cond, Rng& rng) {
  PlacementContext ctx;
  ctx.graph = &ds.topology;
  ctx.budget = tools.budget;
  ctx.metric = tools.metric;
  ctx.grid_dims = tools.grid_dims;
  if (strategy == "random") {
    ctx.rng = &rng;
    return place_sensors(PlacementStrategy::random, ctx);
  }
  if (strategy == "predictive") {
    ctx.predictor = &tools.predictor;
    ctx.hierarchy = &hier;
    ctx.condition = &cond;
    return place_sensors(PlacementStrategy::predictive, ctx);
  }
  if (strategy == "uncertainty") {
    const Shape shape{ds.num_nodes(), ds.num_channels};
    EnsembleForecast pilot = sample_ensemble(denoiser, shape, cfg.schedule, cfg.sampler,
                                             cond, nullptr, cfg.sensing.ensemble, rng);
    ctx.ensemble = &pilot;
    return place_sensors(PlacementStrategy::uncertainty, ctx);
  }
  throw std::runtime_error("unknown placement strategy: " + strategy);
}

// Shared forecast/assimilation rollout. strategy "none" runs unguided and is
// the forecast path; anything else places sensors each step and guides the
// ensemble with ground-truth readings at the chosen nodes.
std::vector<ForecastRow> rollout_ensemble(const RunConfig& cfg, const TrajectoryDataset& ds,
                                          const GraphHierarchy& hier, const DenoiserNet& net,
                                          const RunPaths& paths, const std::string& strategy,
                                          std::vector<SensorSet>* sensor_log) {
  const auto& fc = cfg.forecast;
  require(fc.start_step + fc.horizon <
              static_cast<int>(ds.trajectories[static_cast<size_t>(fc.trajectory)].size()),
          "forecast window exceeds trajectory length");
  const DenoiseFn denoiser = bind_denoiser(net, hier);
  const bool increments = net.config.predict_increment;
  const int N = ds.num_nodes();
  const int C = ds.num_channels;
  const int E = fc.ensemble;
  const Shape shape{N, C};

  PlacementTools tools;
  if (strategy != "none") tools = placement_tools(cfg, ds, paths, strategy);

  Rng rng = command_rng(cfg, kSaltForecast);
  Tensor cond = state_tensor(ds, fc.trajectory, fc.start_step);
  std::vector<ForecastRow> rows;
  rows.reserve(static_cast<size_t>(fc.horizon));

  for (int h = 1; h <= fc.horizon; ++h) {
    const Tensor truth = state_tensor(ds, fc.trajectory, fc.start_step + h);

    ObservationModel obs;
    if (strategy != "none") {
      SensorSet sel = choose_sensors(strategy, tools, cfg, ds, hier, denoiser, cond, rng);
      sel.step_index = h;
      obs.sensor_indices = sel.nodes;
      obs.noise_var = cfg.sensing.noise_var;
      obs.gamma_hat = cfg.sensing.gamma_hat;
      obs.observed_values.reserve(sel.nodes.size() * static_cast<size_t>(C));
      // readings live in the diffusion variable: the increment when the net
      // predicts increments, the raw state otherwise
      for (int node : sel.nodes)
        for (int c = 0; c < C; ++c) {
          const std::int64_t at = static_cast<std::int64_t>(node) * C + c;
          double y = truth.value_at(at);
          if (increments) y -= cond.value_at(at);
          obs.observed_values.push_back(y);
        }
      obs.validate(ds.topology, C);
      if (sensor_log) sensor_log->push_back(std::move(sel));
    }

    const EnsembleForecast ens = sample_ensemble(denoiser, shape, cfg.schedule, cfg.sampler,
                                                 cond, obs.empty() ? nullptr : &obs, E, rng);

    const std::int64_t n_vals = numel(shape);
    std::vector<double> mean_state(static_cast<size_t>(n_vals), 0.0);
    double grand = 0.0;
    for (const Tensor& m : ens.members)
      for (std::int64_t i = 0; i < n_vals; ++i) {
        double v = m.value_at(i);
        if (increments) v += cond.value_at(i);
        mean_state[static_cast<size_t>(i)] += v;
        grand += v;
      }
    for (double& v : mean_state) v /= E;
    grand /= static_cast<double>(E) * n_vals;

    double spread = 0.0;
    if (E >= 2) {
      // member std is invariant to the shared +cond shift
      for (double u : ens.uncertainty) spread += u;
      spread /= static_cast<double>(ens.uncertainty.size());
    }

    Tensor forecast = Tensor::from_data(shape, mean_state);
    rows.push_back({h, grand, spread, mean_abs_error(forecast, truth)});
    cond = std::move(forecast);
  }
  return rows;
}

double check_margin(std::vector<VerifyCheck>& checks, const std::string& name, double margin,
                    const std::string& detail) {
  checks.push_back({name, margin >= 0.0, margin, detail});
  return margin;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string RunPaths::assimilate_csv(const std::string& strategy) const {
  return out_dir + "/assimilate_" + strategy + ".csv";
}

std::string RunPaths::sensors_csv(const std::string& strategy) const {
  return out_dir + "/sensors_" + strategy + ".csv";
}

RunPaths run_paths(const RunConfig& cfg) {
  RunPaths p;
  p.out_dir = cfg.out_dir;
  p.dataset_dir = cfg.dataset.path.empty() ? cfg.out_dir + "/dataset" : cfg.dataset.path;
  p.checkpoint = cfg.out_dir + "/denoiser.ckpt";
  p.error_net = cfg.out_dir + "/errornet.ckpt";
  p.train_metrics = cfg.out_dir + "/train_metrics.csv";
  p.error_net_metrics = cfg.out_dir + "/errornet_metrics.csv";
  p.forecast_csv = cfg.out_dir + "/forecast.csv";
  p.verify_report = cfg.out_dir + "/verify_report.txt";
  p.benchmark_csv = cfg.out_dir + "/benchmark_placement.csv";
  return p;
}

RunLock::RunLock(const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/.lock";
  fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd_ < 0) throw std::runtime_error("cannot open lock file " + path);
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw std::runtime_error("run directory " + out_dir +
                             " is locked by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

int env_thread_count() {
  const char* env = std::getenv("FLOWCAST_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 256));
}

double mean_abs_error(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mean_abs_error: shape mismatch");
  const std::int64_t n = numel(a.shape());
  require(n > 0, "mean_abs_error: empty tensors");
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) acc += std::abs(a.value_at(i) - b.value_at(i));
  return acc / static_cast<double>(n);
}

void run_generate_data(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  TrajectoryDataset ds;
  if (cfg.dataset.kind == "chaotic1d") {
    ds = chaotic_pde_trajectories(cfg.dataset.grid_points, cfg.dataset.dt_snapshot,
                                  cfg.dataset.steps, cfg.dataset.trajectories, cfg.seed);
  } else {
    ds = mesh_dynamics(cfg.dataset.mesh_nodes, cfg.dataset.steps, cfg.dataset.trajectories,
                       cfg.seed);
  }
  write_dataset(paths.dataset_dir, ds);
  std::FILE* f = open_or_throw(paths.dataset_dir + "/meta.txt", "w");
  std::fprintf(f, "config %s\nseed %llu\n", hex16(run_config_hash(cfg)).c_str(),
               static_cast<unsigned long long>(cfg.seed));
  close_or_throw(f, paths.dataset_dir + "/meta.txt");
}

void run_train(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  const TrajectoryDataset ds = load_data(paths);
  const GraphHierarchy hier = make_hierarchy(cfg, ds);
  const DenoiserConfig dcfg = derive_denoiser_config(cfg, ds);
  const std::uint64_t run_hash = run_config_hash(cfg);

  DenoiserNet net;
  double offset = 0.0;
  long long prior_rows = 0;
  if (fs::exists(paths.checkpoint)) {
    std::uint64_t stored = 0;
    if (read_artifact_meta(paths.checkpoint, stored) && stored != run_hash)
      throw std::runtime_error(
          "train: refusing to resume: checkpoint was produced by config " + hex16(stored) +
          " but the current config hashes to " + hex16(run_hash));
    try {
      net = load_checkpoint(paths.checkpoint, config_hash(dcfg));
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("train: refusing to resume: ") + e.what());
    }
    offset = metrics_last_kimg(paths.train_metrics, prior_rows);
  } else {
    Rng init_rng = command_rng(cfg, kSaltTrain);
    net = make_denoiser(dcfg, init_rng);
  }

  ensure_csv(paths.train_metrics, "step,kimg,k_active,lr,loss", run_hash, cfg.seed);

  RolloutConfig rollout;
  rollout.K = cfg.training.k;
  rollout.curriculum_kimg = cfg.training.curriculum_kimg;
  OptimizerConfig opt;
  opt.lr = cfg.training.lr;
  opt.weight_decay = cfg.training.weight_decay;
  opt.ramp_kimg = cfg.training.ramp_kimg;
  TrainOptions options;
  options.budget_kimg = cfg.training.budget_kimg;
  options.batch_size = cfg.training.batch_size;
  options.log_every = cfg.training.log_every;
  options.kimg_offset = offset;
  options.metrics_path = paths.train_metrics;
  options.checkpoint_path = paths.checkpoint;
  options.checkpoint_interval_kimg = cfg.training.checkpoint_interval_kimg;

  // distinct stream per training leg so a resume does not replay batches
  Rng rng = command_rng(cfg, kSaltTrain).fork(static_cast<std::uint64_t>(prior_rows));
  train(net, ds, hier, rollout, opt, cfg.schedule, options, rng);
  append_artifact_meta(paths.checkpoint, run_hash, cfg.seed);
}

void run_train_error_net(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  const TrajectoryDataset ds = load_data(paths);
  const GraphHierarchy hier = make_hierarchy(cfg, ds);
  const DenoiserConfig dcfg = derive_denoiser_config(cfg, ds);
  require(fs::exists(paths.checkpoint),
          "denoiser checkpoint not found at " + paths.checkpoint + " (run train first)");
  const DenoiserNet dnet = load_checkpoint(paths.checkpoint, config_hash(dcfg));
  const DenoiseFn frozen = bind_denoiser(dnet, hier);
  const std::uint64_t run_hash = run_config_hash(cfg);

  Rng rng = command_rng(cfg, kSaltErrNet);
  ErrorPredictorNet predictor = make_error_predictor(dcfg, rng);
  OptimizerConfig opt;
  opt.lr = cfg.sensing.error_net_lr;
  ErrorTrainOptions options;
  options.budget_kimg = cfg.sensing.error_net_budget_kimg;
  options.batch_size = cfg.training.batch_size;
  options.log_every = cfg.training.log_every;

  const auto log = train_error_predictor(predictor, ds, frozen, hier, cfg.schedule, opt,
                                         options, rng);
  save_error_predictor(predictor, paths.error_net);
  append_artifact_meta(paths.error_net, run_hash, cfg.seed);

  std::FILE* f = open_or_throw(paths.error_net_metrics, "w");
  std::fputs(meta_comment(run_hash, cfg.seed).c_str(), f);
  std::fprintf(f, "step,kimg,k_active,lr,loss\n");
  for (const auto& r : log)
    std::fprintf(f, "%lld,%.6f,%d,%.17g,%.17g\n", r.step, r.kimg, r.k_active, r.lr, r.loss);
  close_or_throw(f, paths.error_net_metrics);
}

std::vector<ForecastRow> run_forecast(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  const TrajectoryDataset ds = load_data(paths);
  const GraphHierarchy hier = make_hierarchy(cfg, ds);
  require(fs::exists(paths.checkpoint),
          "denoiser checkpoint not found at " + paths.checkpoint + " (run train first)");
  const DenoiserNet net = load_checkpoint(paths.checkpoint,
                                          config_hash(derive_denoiser_config(cfg, ds)));
  const auto rows = rollout_ensemble(cfg, ds, hier, net, paths, "none", nullptr);
  write_forecast_csv(paths.forecast_csv, rows, run_config_hash(cfg), cfg.seed);
  return rows;
}

std::vector<ForecastRow> run_assimilate(const RunConfig& cfg, const std::string& strategy) {
  cfg.validate();
  require(strategy == "none" || strategy == "random" || strategy == "predictive" ||
              strategy == "uncertainty",
          "assimilate: unknown strategy " + strategy);
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  const TrajectoryDataset ds = load_data(paths);
  const GraphHierarchy hier = make_hierarchy(cfg, ds);
  require(fs::exists(paths.checkpoint),
          "denoiser checkpoint not found at " + paths.checkpoint + " (run train first)");
  const DenoiserNet net = load_checkpoint(paths.checkpoint,
                                          config_hash(derive_denoiser_config(cfg, ds)));
  const std::uint64_t run_hash = run_config_hash(cfg);

  std::vector<SensorSet> sensor_log;
  const auto rows = rollout_ensemble(cfg, ds, hier, net, paths, strategy, &sensor_log);
  write_forecast_csv(paths.assimilate_csv(strategy), rows, run_hash, cfg.seed);
  if (strategy != "none") {
    write_sensor_csv(paths.sensors_csv(strategy), sensor_log, run_hash, cfg.seed);
    // property re-check on our own artifact: pairwise gap holds on reload
    load_sensor_log(paths.sensors_csv(strategy), ds.topology, gap_metric_of(cfg),
                    grid_dims_of(cfg), absolute_gap(cfg, ds.topology));
  }
  return rows;
}

SensorSet run_place_sensors(const RunConfig& cfg, const std::string& strategy) {
  cfg.validate();
  require(strategy == "random" || strategy == "predictive" || strategy == "uncertainty",
          "place-sensors: strategy must be random|predictive|uncertainty");
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  const TrajectoryDataset ds = load_data(paths);
  const GraphHierarchy hier = make_hierarchy(cfg, ds);
  const PlacementTools tools = placement_tools(cfg, ds, paths, strategy);
  const Tensor cond = state_tensor(ds, cfg.forecast.trajectory, cfg.forecast.start_step);

  DenoiserNet net;
  DenoiseFn denoiser;
  if (strategy == "uncertainty") {
    require(fs::exists(paths.checkpoint),
            "denoiser checkpoint not found at " + paths.checkpoint + " (run train first)");
    net = load_checkpoint(paths.checkpoint, config_hash(derive_denoiser_config(cfg, ds)));
    denoiser = bind_denoiser(net, hier);
  }

  Rng rng = command_rng(cfg, kSaltPlace);
  SensorSet sel = choose_sensors(strategy, tools, cfg, ds, hier, denoiser, cond, rng);
  sel.step_index = cfg.forecast.start_step;
  write_sensor_csv(paths.sensors_csv(strategy), {sel}, run_config_hash(cfg), cfg.seed);
  load_sensor_log(paths.sensors_csv(strategy), ds.topology, tools.metric, tools.grid_dims,
                  tools.budget.g);
  return sel;
}

std::vector<SensorSet> load_sensor_log(const std::string& path, const MeshGraph& graph,
                                       GapMetric metric, const std::vector<int>& grid_dims,
                                       double min_gap) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "cannot open sensor log " + path);
  std::string line;
  bool saw_header = false;
  std::map<int, std::vector<std::pair<int, int>>> by_step;  // step -> (order, node)
  std::map<int, std::pair<std::string, bool>> step_info;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      require(line == "step,order,node,strategy,truncated",
              "sensor log " + path + " has an unexpected header: " + line);
      saw_header = true;
      continue;
    }
    std::istringstream ss(line);
    std::string f_step, f_order, f_node, f_strategy, f_trunc;
    require(std::getline(ss, f_step, ',') && std::getline(ss, f_order, ',') &&
                std::getline(ss, f_node, ',') && std::getline(ss, f_strategy, ',') &&
                std::getline(ss, f_trunc, ','),
            "sensor log " + path + " has a malformed row: " + line);
    const int step = std::stoi(f_step);
    const int order = std::stoi(f_order);
    const int node = std::stoi(f_node);
    require(node >= 0 && node < graph.num_nodes,
            "sensor log " + path + " references node " + f_node + " outside the mesh");
    by_step[step].emplace_back(order, node);
    step_info[step] = {f_strategy, f_trunc == "1"};
  }
  require(saw_header, "sensor log " + path + " is missing its header");

  std::vector<SensorSet> out;
  for (auto& [step, picks] : by_step) {
    std::sort(picks.begin(), picks.end());
    SensorSet set;
    set.step_index = step;
    set.strategy = step_info[step].first;
    set.truncated = step_info[step].second;
    for (const auto& [order, node] : picks) set.nodes.push_back(node);
    set.budget_s = static_cast<int>(set.nodes.size());
    set.gap = min_gap;
    for (std::size_t i = 0; i < set.nodes.size(); ++i)
      for (std::size_t j = i + 1; j < set.nodes.size(); ++j) {
        const double d =
            suppression_distance(graph, metric, grid_dims, set.nodes[i], set.nodes[j]);
        require(d >= min_gap - 1e-9,
                "sensor log " + path + " violates the pairwise gap at step " +
                    std::to_string(step) + ": nodes " + std::to_string(set.nodes[i]) +
                    " and " + std::to_string(set.nodes[j]) + " are " + fmt(d) +
                    " apart, need " + fmt(min_gap));
      }
    out.push_back(std::move(set));
  }
  return out;
}

VerifyReport run_verify(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  VerifyReport report;
  auto& checks = report.checks;

  {  // EDM preconditioning identities
    Rng rng = command_rng(cfg, kSaltVerify);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double sigma = std::exp(rng.uniform(std::log(1e-3), std::log(1e3)));
      const double sigma_data = rng.uniform(0.1, 10.0);
      const auto c = precondition_coeffs(sigma, sigma_data);
      const double lam = loss_weight(sigma, sigma_data);
      worst = std::max(worst, std::abs(lam * c.c_out * c.c_out - 1.0));
      worst = std::max(worst,
                       std::abs(c.c_in * c.c_in * (sigma * sigma + sigma_data * sigma_data) -
                                1.0));
    }
    check_margin(checks, "edm_identities", 1e-12 - worst,
                 "max relative error " + fmt(worst) + " over 1000 draws, tolerance 1e-12");
  }

  {  // sigma-step discretization endpoints and ordering
    const auto sigmas = sigma_steps(cfg.sampler, cfg.schedule);
    double min_drop = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < sigmas.size(); ++i)
      min_drop = std::min(min_drop, sigmas[i] - sigmas[i + 1]);
    const bool ends = sigmas.front() == cfg.schedule.sigma_max && sigmas.back() == 0.0 &&
                      static_cast<int>(sigmas.size()) == cfg.sampler.num_steps + 1;
    check_margin(checks, "sigma_steps", ends ? min_drop : -1.0,
                 "endpoints exact, smallest decrement " + fmt(min_drop));
  }

  {  // quantile-coupling W2 oracle
    const double w_mix = w2_1d({-1.0, 1.0}, {0.0, 0.0});
    const double w_self = w2_1d({0.3, -0.7, 2.0}, {2.0, 0.3, -0.7});
    const double err = std::max(std::abs(w_mix - 1.0), w_self);
    check_margin(checks, "w2_oracle", 1e-12 - err,
                 "point-mass vs Rademacher = " + fmt(w_mix) + ", identical samples = " +
                     fmt(w_self));
  }

  {  // Proposition 1 floor: no deterministic surrogate beats the spread
    Rng rng = command_rng(cfg, kSaltVerify).fork(2);
    const auto kernel = kernel_rademacher();
    const int n = 100000;
    std::vector<double> draws(static_cast<size_t>(n)), point(static_cast<size_t>(n), 0.0);
    for (auto& d : draws) d = kernel.sample(0.3, rng);
    const double floor = w2_1d(draws, point);  // best point mass sits at the mean
    check_margin(checks, "rademacher_floor", floor - 0.95,
                 "one-step W2 of the best deterministic surrogate = " + fmt(floor) +
                     ", required >= 0.95");
  }

  {  // Proposition 1 envelope on the affine-Gaussian kernel, 3 seeds
    double min_margin = std::numeric_limits<double>::infinity();
    for (std::uint64_t s = 1; s <= 3; ++s) {
      Rng rng = command_rng(cfg, kSaltVerify).fork(10 + s);
      const auto kernel = kernel_affine_gaussian(0.9, 0.3, 0.1);
      const auto surrogate = kernel_affine_gaussian(0.9, 0.25, 0.1);
      // true one-step mismatch is 0.05; the conservative eps keeps the
      // margin positive without leaning on an MC tolerance
      const auto r = verify_prop1(kernel, surrogate, 1.0, 20, 8000, 0.9, 0.07, 0.0, rng);
      min_margin = std::min(min_margin, r.min_margin);
    }
    check_margin(checks, "prop1_envelope", min_margin,
                 "min over 3 seeds and t<=20 of bound(t) - What(t) = " + fmt(min_margin));
  }

  {  // posterior trace monotone + per-sensor guarantee on random priors
    Rng rng = command_rng(cfg, kSaltVerify).fork(20);
    double min_slack = std::numeric_limits<double>::infinity();
    bool all = true;
    for (int trial = 0; trial < 20; ++trial) {
      const int dim = 5;
      Eigen::MatrixXd a(dim, dim);
      for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j) a(i, j) = rng.normal() * 0.6;
      GaussianPriorModel prior;
      prior.mean = Eigen::VectorXd::Zero(dim);
      prior.cov = a.transpose() * a + 0.1 * Eigen::MatrixXd::Identity(dim, dim);
      prior.noise_var = rng.uniform(0.3, 1.5);
      std::vector<int> seq{static_cast<int>(rng.uniform_index(dim))};
      while (static_cast<int>(seq.size()) < 3) {
        const int cand = static_cast<int>(rng.uniform_index(dim));
        if (std::find(seq.begin(), seq.end(), cand) == seq.end()) seq.push_back(cand);
      }
      const auto r = verify_monotone_reduction(prior, seq);
      all = all && r.passed;
      for (std::size_t i = 0; i < r.deltas.size(); ++i)
        min_slack = std::min(min_slack, r.deltas[i] - r.lower_bounds[i]);
    }
    check_margin(checks, "monotone_posterior", all ? min_slack : -1.0,
                 "20 random priors; min slack of Delta_i over its guarantee = " +
                     fmt(min_slack));
  }

  {  // first greedy pick maximizes the guaranteed reduction
    Rng rng = command_rng(cfg, kSaltVerify).fork(21);
    double min_gap_to_second = std::numeric_limits<double>::infinity();
    bool all = true;
    for (int trial = 0; trial < 10; ++trial) {
      const int dim = 6;
      GaussianPriorModel prior;
      prior.mean = Eigen::VectorXd::Zero(dim);
      Eigen::VectorXd v(dim);
      for (int i = 0; i < dim; ++i) v(i) = rng.uniform(0.2, 2.0);
      prior.cov = v.array().square().matrix().asDiagonal();
      prior.noise_var = 0.5;
      const auto r = verify_uncertainty_placement_first_step(prior);
      all = all && r.bound_argmax_matches_u;
      double best = -1.0, second = -1.0;
      for (double b : r.bounds) {
        if (b > best) {
          second = best;
          best = b;
        } else if (b > second) {
          second = b;
        }
      }
      min_gap_to_second = std::min(min_gap_to_second, best - second);
    }
    check_margin(checks, "first_step_argmax", all ? min_gap_to_second : -1.0,
                 "argmax of the bound equals argmax of prior std on 10 priors");
  }

  {  // Monte-Carlo MSE equals the posterior trace
    Rng rng = command_rng(cfg, kSaltVerify).fork(22);
    GaussianPriorModel prior;
    prior.mean = Eigen::VectorXd::Zero(4);
    Eigen::MatrixXd a(4, 4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) a(i, j) = 0.5 * rng.normal();
    prior.cov = a.transpose() * a + 0.2 * Eigen::MatrixXd::Identity(4, 4);
    prior.noise_var = 0.4;
    const auto r = mc_posterior_mse(prior, {0, 2}, 20000, rng);
    check_margin(checks, "mc_posterior_mse", 3.0 * r.std_error - std::abs(r.mc_mse - r.trace),
                 "|MC - trace| = " + fmt(std::abs(r.mc_mse - r.trace)) + ", 3 SE = " +
                     fmt(3.0 * r.std_error));
  }

  report.passed = true;
  for (const auto& c : checks) report.passed = report.passed && c.passed;

  std::FILE* f = open_or_throw(paths.verify_report, "w");
  std::fputs(meta_comment(run_config_hash(cfg), cfg.seed).c_str(), f);
  for (const auto& c : checks)
    std::fprintf(f, "[%s] %s margin=%.6g %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                 c.margin, c.detail.c_str());
  std::fprintf(f, "overall: %s\n", report.passed ? "PASS" : "FAIL");
  close_or_throw(f, paths.verify_report);
  return report;
}

PlacementBenchmark benchmark_placement(int nodes, const std::vector<int>& budgets,
                                       std::uint64_t seed, const std::string& csv_path,
                                       std::uint64_t config_hash_value) {
  require(nodes >= 2, "benchmark: need at least 2 nodes");
  require(!budgets.empty(), "benchmark: need at least one budget");
  Rng rng(seed);
  MeshGraph g;
  g.num_nodes = nodes;
  g.dim = 2;
  g.num_channels = 0;
  g.positions.resize(static_cast<size_t>(nodes) * 2);
  for (auto& p : g.positions) p = rng.uniform(0.0, 1.0);
  g.boundary.assign(static_cast<size_t>(nodes), 0);
  std::vector<double> score(static_cast<size_t>(nodes));
  for (auto& s : score) s = rng.uniform(0.0, 1.0);
  const ScoreField field = make_score_field(g, score);
  // a gap near the mean nearest-neighbor spacing keeps suppression active
  const double gap = 0.7 / std::sqrt(static_cast<double>(nodes));

  PlacementBenchmark bench;
  bench.budgets = budgets;
  using clock = std::chrono::steady_clock;
  for (int s : budgets) {
    require(s >= 1 && s < nodes, "benchmark: budget out of range");
    const SensorBudget budget{s, gap};
    long long sink = 0;
    auto once = [&] {
      const SensorSet set = greedy_select(field, g, budget);
      sink += static_cast<long long>(set.nodes.size());
    };
    once();  // warm caches and measure a single run
    auto t0 = clock::now();
    once();
    auto t1 = clock::now();
    const double single = std::chrono::duration<double>(t1 - t0).count();
    const int reps = std::max(1, static_cast<int>(std::ceil(0.05 / std::max(single, 1e-7))));
    t0 = clock::now();
    for (int r = 0; r < reps; ++r) once();
    t1 = clock::now();
    require(sink > 0, "benchmark: greedy returned nothing");
    bench.seconds.push_back(std::chrono::duration<double>(t1 - t0).count() / reps);
  }

  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  const auto n = static_cast<double>(budgets.size());
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    const double x = std::log(static_cast<double>(budgets[i]));
    const double y = std::log(std::max(bench.seconds[i], 1e-12));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  bench.loglog_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);

  if (!csv_path.empty()) {
    std::FILE* f = open_or_throw(csv_path, "w");
    std::fputs(meta_comment(config_hash_value, seed).c_str(), f);
    std::fprintf(f, "budget_s,seconds\n");
    for (std::size_t i = 0; i < budgets.size(); ++i)
      std::fprintf(f, "%d,%.17g\n", budgets[i], bench.seconds[i]);
    std::fprintf(f, "# loglog_slope %.17g\n", bench.loglog_slope);
    close_or_throw(f, csv_path);
  }
  return bench;
}

PlacementBenchmark run_benchmark_placement(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunLock lock(paths.out_dir);
  return benchmark_placement(2000, {8, 16, 32, 64}, cfg.seed, paths.benchmark_csv,
                             run_config_hash(cfg));
}

}  // namespace flowcast
