#include "config.hpp"

#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace flowcast {
namespace {

using nlohmann::json;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("config: " + msg);
}

void expect_keys(const json& obj, const char* section,
                 std::initializer_list<const char*> known) {
  require(obj.is_object(), std::string(section) + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool found = false;
    for (const char* k : known) {
      if (it.key() == k) {
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::invalid_argument("config: unknown key '" + it.key() + "' in " +
                                  section);
    }
  }
}

template <typename T>
void read_field(const json& obj, const char* section, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("config: bad value for ") +
                                section + "." + key);
  }
}

void parse_dataset(const json& j, DatasetConfig& d) {
  expect_keys(j, "dataset",
              {"kind", "grid_points", "mesh_nodes", "dt_snapshot", "steps",
               "trajectories", "path"});
  read_field(j, "dataset", "kind", d.kind);
  read_field(j, "dataset", "grid_points", d.grid_points);
  read_field(j, "dataset", "mesh_nodes", d.mesh_nodes);
  read_field(j, "dataset", "dt_snapshot", d.dt_snapshot);
  read_field(j, "dataset", "steps", d.steps);
  read_field(j, "dataset", "trajectories", d.trajectories);
  read_field(j, "dataset", "path", d.path);
}

void parse_model(const json& j, ModelConfig& m) {
  expect_keys(j, "model",
              {"hidden", "heads", "fourier_features", "noise_embed_dim",
               "encoder_levels", "blocks_per_level", "bottleneck_blocks",
               "ffn_mult", "predict_increment", "voxel_sizes", "knn_k"});
  read_field(j, "model", "hidden", m.hidden);
  read_field(j, "model", "heads", m.heads);
  read_field(j, "model", "fourier_features", m.fourier_features);
  read_field(j, "model", "noise_embed_dim", m.noise_embed_dim);
  read_field(j, "model", "encoder_levels", m.encoder_levels);
  read_field(j, "model", "blocks_per_level", m.blocks_per_level);
  read_field(j, "model", "bottleneck_blocks", m.bottleneck_blocks);
  read_field(j, "model", "ffn_mult", m.ffn_mult);
  read_field(j, "model", "predict_increment", m.predict_increment);
  read_field(j, "model", "voxel_sizes", m.voxel_sizes);
  read_field(j, "model", "knn_k", m.knn_k);
}

void parse_schedule(const json& j, NoiseSchedule& s) {
  expect_keys(j, "schedule",
              {"sigma_min", "sigma_max", "p_mean", "p_std", "sigma_data"});
  read_field(j, "schedule", "sigma_min", s.sigma_min);
  read_field(j, "schedule", "sigma_max", s.sigma_max);
  read_field(j, "schedule", "p_mean", s.p_mean);
  read_field(j, "schedule", "p_std", s.p_std);
  read_field(j, "schedule", "sigma_data", s.sigma_data);
}

void parse_sampler(const json& j, SamplerConfig& s) {
  expect_keys(j, "sampler",
              {"num_steps", "rho", "s_churn", "s_noise", "s_min", "s_max"});
  read_field(j, "sampler", "num_steps", s.num_steps);
  read_field(j, "sampler", "rho", s.rho);
  read_field(j, "sampler", "s_churn", s.s_churn);
  read_field(j, "sampler", "s_noise", s.s_noise);
  read_field(j, "sampler", "s_min", s.s_min);
  read_field(j, "sampler", "s_max", s.s_max);
}

void parse_training(const json& j, TrainConfig& t) {
  expect_keys(j, "training",
              {"k", "curriculum_kimg", "lr", "weight_decay", "ramp_kimg",
               "budget_kimg", "batch_size", "log_every",
               "checkpoint_interval_kimg"});
  read_field(j, "training", "k", t.k);
  read_field(j, "training", "curriculum_kimg", t.curriculum_kimg);
  read_field(j, "training", "lr", t.lr);
  read_field(j, "training", "weight_decay", t.weight_decay);
  read_field(j, "training", "ramp_kimg", t.ramp_kimg);
  read_field(j, "training", "budget_kimg", t.budget_kimg);
  read_field(j, "training", "batch_size", t.batch_size);
  read_field(j, "training", "log_every", t.log_every);
  read_field(j, "training", "checkpoint_interval_kimg",
             t.checkpoint_interval_kimg);
}

void parse_sensing(const json& j, SensingConfig& s) {
  expect_keys(j, "sensing",
              {"strategy", "sensors", "gap", "metric", "gamma_hat", "noise_var",
               "ensemble", "error_net_budget_kimg", "error_net_lr"});
  read_field(j, "sensing", "strategy", s.strategy);
  read_field(j, "sensing", "sensors", s.sensors);
  read_field(j, "sensing", "gap", s.gap);
  read_field(j, "sensing", "metric", s.metric);
  read_field(j, "sensing", "gamma_hat", s.gamma_hat);
  read_field(j, "sensing", "noise_var", s.noise_var);
  read_field(j, "sensing", "ensemble", s.ensemble);
  read_field(j, "sensing", "error_net_budget_kimg", s.error_net_budget_kimg);
  read_field(j, "sensing", "error_net_lr", s.error_net_lr);
}

void parse_forecast(const json& j, ForecastConfig& f) {
  expect_keys(j, "forecast",
              {"horizon", "ensemble", "start_step", "trajectory"});
  read_field(j, "forecast", "horizon", f.horizon);
  read_field(j, "forecast", "ensemble", f.ensemble);
  read_field(j, "forecast", "start_step", f.start_step);
  read_field(j, "forecast", "trajectory", f.trajectory);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  require(dataset.kind == "chaotic1d" || dataset.kind == "mesh2d",
          "dataset.kind must be chaotic1d or mesh2d");
  require(dataset.grid_points >= 32, "dataset.grid_points must be >= 32");
  require(dataset.grid_points % 2 == 0, "dataset.grid_points must be even");
  require(dataset.mesh_nodes >= 50, "dataset.mesh_nodes must be >= 50");
  require(dataset.dt_snapshot > 0.0, "dataset.dt_snapshot must be > 0");
  require(dataset.steps >= 2, "dataset.steps must be >= 2");
  require(dataset.trajectories >= 1, "dataset.trajectories must be >= 1");

  require(model.hidden >= 1, "model.hidden must be >= 1");
  require(model.heads >= 1, "model.heads must be >= 1");
  require(model.hidden % model.heads == 0,
          "model.hidden must be divisible by model.heads");
  require(model.fourier_features >= 1, "model.fourier_features must be >= 1");
  require(model.noise_embed_dim >= 2 && model.noise_embed_dim % 2 == 0,
          "model.noise_embed_dim must be even and >= 2");
  require(model.encoder_levels >= 0, "model.encoder_levels must be >= 0");
  require(static_cast<int>(model.voxel_sizes.size()) == model.encoder_levels,
          "model.voxel_sizes must have one entry per encoder level");
  for (double v : model.voxel_sizes)
    require(v > 0.0, "model.voxel_sizes entries must be > 0");
  require(model.blocks_per_level >= 1, "model.blocks_per_level must be >= 1");
  require(model.bottleneck_blocks >= 1, "model.bottleneck_blocks must be >= 1");
  require(model.ffn_mult >= 1, "model.ffn_mult must be >= 1");
  require(model.knn_k >= 1, "model.knn_k must be >= 1");

  schedule.validate();
  sampler.validate();

  require(training.k >= 1, "training.k must be >= 1");
  require(training.curriculum_kimg >= 0.0,
          "training.curriculum_kimg must be >= 0");
  require(training.lr > 0.0, "training.lr must be > 0");
  require(training.weight_decay >= 0.0, "training.weight_decay must be >= 0");
  require(training.ramp_kimg >= 0.0, "training.ramp_kimg must be >= 0");
  require(training.budget_kimg >= 0.0, "training.budget_kimg must be >= 0");
  require(training.batch_size >= 1, "training.batch_size must be >= 1");
  require(training.log_every >= 1, "training.log_every must be >= 1");
  require(training.checkpoint_interval_kimg >= 0.0,
          "training.checkpoint_interval_kimg must be >= 0");

  require(sensing.strategy == "none" || sensing.strategy == "random" ||
              sensing.strategy == "predictive" ||
              sensing.strategy == "uncertainty",
          "sensing.strategy must be none|random|predictive|uncertainty");
  require(sensing.sensors >= 1, "sensing.sensors must be >= 1");
  require(sensing.gap >= 0.0, "sensing.gap must be >= 0");
  require(sensing.metric == "euclidean" || sensing.metric == "grid",
          "sensing.metric must be euclidean or grid");
  require(!(sensing.metric == "grid" && dataset.kind != "chaotic1d"),
          "sensing.metric grid requires a chaotic1d dataset");
  require(sensing.gamma_hat >= 0.0, "sensing.gamma_hat must be >= 0");
  require(sensing.noise_var > 0.0, "sensing.noise_var must be > 0");
  require(sensing.ensemble >= 1, "sensing.ensemble must be >= 1");
  require(sensing.error_net_budget_kimg > 0.0,
          "sensing.error_net_budget_kimg must be > 0");
  require(sensing.error_net_lr > 0.0, "sensing.error_net_lr must be > 0");

  require(forecast.horizon >= 1, "forecast.horizon must be >= 1");
  require(forecast.ensemble >= 1, "forecast.ensemble must be >= 1");
  require(forecast.start_step >= 0, "forecast.start_step must be >= 0");
  require(forecast.trajectory >= 0 &&
              forecast.trajectory < dataset.trajectories,
          "forecast.trajectory out of range");
  require(forecast.start_step + forecast.horizon < dataset.steps,
          "forecast window exceeds dataset.steps");

  require(!out_dir.empty(), "out_dir must not be empty");
}

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: JSON parse error: ") +
                                e.what());
  }
  expect_keys(root, "config",
              {"dataset", "model", "schedule", "sampler", "training",
               "sensing", "forecast", "seed", "out_dir"});
  RunConfig cfg;
  if (root.contains("dataset")) parse_dataset(root.at("dataset"), cfg.dataset);
  if (root.contains("model")) parse_model(root.at("model"), cfg.model);
  if (root.contains("schedule"))
    parse_schedule(root.at("schedule"), cfg.schedule);
  if (root.contains("sampler")) parse_sampler(root.at("sampler"), cfg.sampler);
  if (root.contains("training"))
    parse_training(root.at("training"), cfg.training);
  if (root.contains("sensing")) parse_sensing(root.at("sensing"), cfg.sensing);
  if (root.contains("forecast"))
    parse_forecast(root.at("forecast"), cfg.forecast);
  read_field(root, "config", "seed", cfg.seed);
  read_field(root, "config", "out_dir", cfg.out_dir);
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string canonical_config_text(const RunConfig& cfg) {
  std::ostringstream out;
  out << "dataset.kind=" << cfg.dataset.kind << "\n";
  out << "dataset.grid_points=" << cfg.dataset.grid_points << "\n";
  out << "dataset.mesh_nodes=" << cfg.dataset.mesh_nodes << "\n";
  out << "dataset.dt_snapshot=" << fmt_double(cfg.dataset.dt_snapshot) << "\n";
  out << "dataset.steps=" << cfg.dataset.steps << "\n";
  out << "dataset.trajectories=" << cfg.dataset.trajectories << "\n";
  out << "dataset.path=" << cfg.dataset.path << "\n";
  out << "model.hidden=" << cfg.model.hidden << "\n";
  out << "model.heads=" << cfg.model.heads << "\n";
  out << "model.fourier_features=" << cfg.model.fourier_features << "\n";
  out << "model.noise_embed_dim=" << cfg.model.noise_embed_dim << "\n";
  out << "model.encoder_levels=" << cfg.model.encoder_levels << "\n";
  out << "model.blocks_per_level=" << cfg.model.blocks_per_level << "\n";
  out << "model.bottleneck_blocks=" << cfg.model.bottleneck_blocks << "\n";
  out << "model.ffn_mult=" << cfg.model.ffn_mult << "\n";
  out << "model.predict_increment=" << (cfg.model.predict_increment ? 1 : 0)
      << "\n";
  out << "model.voxel_sizes=";
  for (std::size_t i = 0; i < cfg.model.voxel_sizes.size(); ++i) {
    if (i) out << ",";
    out << fmt_double(cfg.model.voxel_sizes[i]);
  }
  out << "\n";
  out << "model.knn_k=" << cfg.model.knn_k << "\n";
  out << "schedule.sigma_min=" << fmt_double(cfg.schedule.sigma_min) << "\n";
  out << "schedule.sigma_max=" << fmt_double(cfg.schedule.sigma_max) << "\n";
  out << "schedule.p_mean=" << fmt_double(cfg.schedule.p_mean) << "\n";
  out << "schedule.p_std=" << fmt_double(cfg.schedule.p_std) << "\n";
  out << "schedule.sigma_data=" << fmt_double(cfg.schedule.sigma_data) << "\n";
  out << "sampler.num_steps=" << cfg.sampler.num_steps << "\n";
  out << "sampler.rho=" << fmt_double(cfg.sampler.rho) << "\n";
  out << "sampler.s_churn=" << fmt_double(cfg.sampler.s_churn) << "\n";
  out << "sampler.s_noise=" << fmt_double(cfg.sampler.s_noise) << "\n";
  out << "sampler.s_min=" << fmt_double(cfg.sampler.s_min) << "\n";
  out << "sampler.s_max=" << fmt_double(cfg.sampler.s_max) << "\n";
  out << "training.k=" << cfg.training.k << "\n";
  out << "training.curriculum_kimg=" << fmt_double(cfg.training.curriculum_kimg)
      << "\n";
  out << "training.lr=" << fmt_double(cfg.training.lr) << "\n";
  out << "training.weight_decay=" << fmt_double(cfg.training.weight_decay)
      << "\n";
  out << "training.ramp_kimg=" << fmt_double(cfg.training.ramp_kimg) << "\n";
  out << "training.budget_kimg=" << fmt_double(cfg.training.budget_kimg)
      << "\n";
  out << "training.batch_size=" << cfg.training.batch_size << "\n";
  out << "training.log_every=" << cfg.training.log_every << "\n";
  out << "training.checkpoint_interval_kimg="
      << fmt_double(cfg.training.checkpoint_interval_kimg) << "\n";
  out << "sensing.strategy=" << cfg.sensing.strategy << "\n";
  out << "sensing.sensors=" << cfg.sensing.sensors << "\n";
  out << "sensing.gap=" << fmt_double(cfg.sensing.gap) << "\n";
  out << "sensing.metric=" << cfg.sensing.metric << "\n";
  out << "sensing.gamma_hat=" << fmt_double(cfg.sensing.gamma_hat) << "\n";
  out << "sensing.noise_var=" << fmt_double(cfg.sensing.noise_var) << "\n";
  out << "sensing.ensemble=" << cfg.sensing.ensemble << "\n";
  out << "sensing.error_net_budget_kimg="
      << fmt_double(cfg.sensing.error_net_budget_kimg) << "\n";
  out << "sensing.error_net_lr=" << fmt_double(cfg.sensing.error_net_lr)
      << "\n";
  out << "forecast.horizon=" << cfg.forecast.horizon << "\n";
  out << "forecast.ensemble=" << cfg.forecast.ensemble << "\n";
  out << "forecast.start_step=" << cfg.forecast.start_step << "\n";
  out << "forecast.trajectory=" << cfg.forecast.trajectory << "\n";
  out << "seed=" << cfg.seed << "\n";
  out << "out_dir=" << cfg.out_dir << "\n";
  return out.str();
}

std::uint64_t run_config_hash(const RunConfig& cfg) {
  const std::string text = canonical_config_text(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string default_config_json() {
  RunConfig def;
  json j;
  j["dataset"] = {{"kind", def.dataset.kind},
                  {"grid_points", def.dataset.grid_points},
                  {"mesh_nodes", def.dataset.mesh_nodes},
                  {"dt_snapshot", def.dataset.dt_snapshot},
                  {"steps", def.dataset.steps},
                  {"trajectories", def.dataset.trajectories},
                  {"path", def.dataset.path}};
  j["model"] = {{"hidden", def.model.hidden},
                {"heads", def.model.heads},
                {"fourier_features", def.model.fourier_features},
                {"noise_embed_dim", def.model.noise_embed_dim},
                {"encoder_levels", def.model.encoder_levels},
                {"blocks_per_level", def.model.blocks_per_level},
                {"bottleneck_blocks", def.model.bottleneck_blocks},
                {"ffn_mult", def.model.ffn_mult},
                {"predict_increment", def.model.predict_increment},
                {"voxel_sizes", def.model.voxel_sizes},
                {"knn_k", def.model.knn_k}};
  j["schedule"] = {{"sigma_min", def.schedule.sigma_min},
                   {"sigma_max", def.schedule.sigma_max},
                   {"p_mean", def.schedule.p_mean},
                   {"p_std", def.schedule.p_std},
                   {"sigma_data", def.schedule.sigma_data}};
  j["sampler"] = {{"num_steps", def.sampler.num_steps},
                  {"rho", def.sampler.rho},
                  {"s_churn", def.sampler.s_churn},
                  {"s_noise", def.sampler.s_noise},
                  {"s_min", def.sampler.s_min},
                  {"s_max", def.sampler.s_max}};
  j["training"] = {{"k", def.training.k},
                   {"curriculum_kimg", def.training.curriculum_kimg},
                   {"lr", def.training.lr},
                   {"weight_decay", def.training.weight_decay},
                   {"ramp_kimg", def.training.ramp_kimg},
                   {"budget_kimg", def.training.budget_kimg},
                   {"batch_size", def.training.batch_size},
                   {"log_every", def.training.log_every},
                   {"checkpoint_interval_kimg",
                    def.training.checkpoint_interval_kimg}};
  j["sensing"] = {{"strategy", def.sensing.strategy},
                  {"sensors", def.sensing.sensors},
                  {"gap", def.sensing.gap},
                  {"metric", def.sensing.metric},
                  {"gamma_hat", def.sensing.gamma_hat},
                  {"noise_var", def.sensing.noise_var},
                  {"ensemble", def.sensing.ensemble},
                  {"error_net_budget_kimg", def.sensing.error_net_budget_kimg},
                  {"error_net_lr", def.sensing.error_net_lr}};
  j["forecast"] = {{"horizon", def.forecast.horizon},
                   {"ensemble", def.forecast.ensemble},
                   {"start_step", def.forecast.start_step},
                   {"trajectory", def.forecast.trajectory}};
  j["seed"] = def.seed;
  j["out_dir"] = def.out_dir;
  return j.dump(2) + "\n";
}

}  // namespace flowcast
