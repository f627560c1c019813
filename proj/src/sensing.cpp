#include "sensing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace flowcast {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("sensing: " + msg);
}

// row-major decomposition of a node id into grid coordinates
void grid_coords(int idx, const std::vector<int>& dims, std::vector<int>& out) {
  out.resize(dims.size());
  for (int k = static_cast<int>(dims.size()) - 1; k >= 0; --k) {
    out[static_cast<std::size_t>(k)] = idx % dims[static_cast<std::size_t>(k)];
    idx /= dims[static_cast<std::size_t>(k)];
  }
}

std::vector<int> select_with_gap(const ScoreField& field, const MeshGraph& graph,
                                 const SensorBudget& budget, GapMetric metric,
                                 const std::vector<int>& grid_dims, Rng* rng, bool* truncated) {
  field.validate();
  budget.validate();
  require(static_cast<int>(field.score.size()) == graph.num_nodes,
          "score field does not match the graph");
  std::vector<std::uint8_t> eligible = field.eligible;
  bool any = false;
  for (std::uint8_t e : eligible) any = any || e != 0;
  require(any, "no eligible nodes to select from");

  std::vector<int> picks;
  picks.reserve(static_cast<std::size_t>(budget.s));
  std::vector<int> candidates;
  while (static_cast<int>(picks.size()) < budget.s) {
    int chosen = -1;
    if (rng == nullptr) {
      double best = -1.0;
      for (int i = 0; i < graph.num_nodes; ++i) {
        if (eligible[static_cast<std::size_t>(i)] && field.score[static_cast<std::size_t>(i)] > best) {
          best = field.score[static_cast<std::size_t>(i)];
          chosen = i;
        }
      }
    } else {
      candidates.clear();
      for (int i = 0; i < graph.num_nodes; ++i)
        if (eligible[static_cast<std::size_t>(i)]) candidates.push_back(i);
      if (!candidates.empty())
        chosen = candidates[rng->uniform_index(candidates.size())];
    }
    if (chosen < 0) {
      *truncated = true;
      break;
    }
    picks.push_back(chosen);
    eligible[static_cast<std::size_t>(chosen)] = 0;
    for (int i = 0; i < graph.num_nodes; ++i) {
      if (eligible[static_cast<std::size_t>(i)] &&
          suppression_distance(graph, metric, grid_dims, chosen, i) < budget.g)
        eligible[static_cast<std::size_t>(i)] = 0;
    }
  }
  return picks;
}

}  // namespace

void SensorBudget::validate() const {
  require(s >= 1, "sensor budget must be at least 1");
  require(std::isfinite(g) && g >= 0.0, "suppression gap must be finite and non-negative");
}

void ScoreField::validate() const {
  require(!score.empty(), "score field is empty");
  require(score.size() == eligible.size(), "score/eligibility size mismatch");
  for (double v : score)
    require(std::isfinite(v) && v >= 0.0, "scores must be finite and non-negative");
}

ScoreField make_score_field(const MeshGraph& graph, std::vector<double> score) {
  require(static_cast<int>(score.size()) == graph.num_nodes,
          "score vector does not match node count");
  ScoreField field;
  field.score = std::move(score);
  field.eligible.resize(static_cast<std::size_t>(graph.num_nodes));
  for (int i = 0; i < graph.num_nodes; ++i)
    field.eligible[static_cast<std::size_t>(i)] =
        graph.boundary[static_cast<std::size_t>(i)] ? 0 : 1;
  field.validate();
  return field;
}

double suppression_distance(const MeshGraph& graph, GapMetric metric,
                            const std::vector<int>& grid_dims, int a, int b) {
  require(a >= 0 && a < graph.num_nodes && b >= 0 && b < graph.num_nodes,
          "node index out of range");
  if (metric == GapMetric::position_euclidean) {
    double sq = 0.0;
    for (int k = 0; k < graph.dim; ++k) {
      const double d = graph.positions[static_cast<std::size_t>(a) * graph.dim + k] -
                       graph.positions[static_cast<std::size_t>(b) * graph.dim + k];
      sq += d * d;
    }
    return std::sqrt(sq);
  }
  // grid-index Chebyshev; without explicit dims treat node ids as a 1-D chain
  if (grid_dims.empty()) return std::fabs(static_cast<double>(a - b));
  int span = 1;
  for (int d : grid_dims) {
    require(d >= 1, "grid dimensions must be positive");
    span *= d;
  }
  require(span == graph.num_nodes, "grid dimensions do not cover the graph");
  static thread_local std::vector<int> ca, cb;
  grid_coords(a, grid_dims, ca);
  grid_coords(b, grid_dims, cb);
  int cheb = 0;
  for (std::size_t k = 0; k < grid_dims.size(); ++k)
    cheb = std::max(cheb, std::abs(ca[k] - cb[k]));
  return static_cast<double>(cheb);
}

SensorSet greedy_select(const ScoreField& field, const MeshGraph& graph,
                        const SensorBudget& budget, GapMetric metric,
                        const std::vector<int>& grid_dims) {
  SensorSet out;
  out.nodes = select_with_gap(field, graph, budget, metric, grid_dims, nullptr, &out.truncated);
  out.strategy = "greedy";
  out.budget_s = budget.s;
  out.gap = budget.g;
  return out;
}

ErrorPredictorNet make_error_predictor(const DenoiserConfig& cfg, Rng& rng) {
  DenoiserConfig adjusted = cfg;
  adjusted.state_channels = 1;  // the state slot carries zeros
  adjusted.validate();
  ErrorPredictorNet p;
  p.net = make_denoiser(adjusted, rng);
  return p;
}

Tensor predict_error(const ErrorPredictorNet& predictor, const GraphHierarchy& hier,
                     const Tensor& x_cond) {
  require(x_cond.defined() && x_cond.ndim() == 2, "conditioning state must be [nodes, channels]");
  Tensor zeros = Tensor::zeros({x_cond.shape()[0], 1});
  Tensor raw = forward_raw(predictor.net, hier, zeros, x_cond, 1.0);
  return scale(softplus(raw), predictor.target_scale);
}

std::vector<double> ground_truth_error_field(const DenoiseFn& denoiser, const Tensor& x0,
                                             const Tensor& condition,
                                             const NoiseSchedule& schedule, Rng& rng) {
  schedule.validate();
  require(x0.defined() && x0.ndim() == 2, "ground truth must be [nodes, channels]");
  Tensor noise = randn(x0.shape(), rng, schedule.sigma_max);
  Tensor den = denoiser(add(x0, noise), condition, schedule.sigma_max);
  require(den.shape() == x0.shape(), "denoiser output shape mismatch");
  const int nodes = x0.shape()[0];
  const int channels = x0.shape()[1];
  std::vector<double> field(static_cast<std::size_t>(nodes), 0.0);
  for (int i = 0; i < nodes; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const std::size_t at = static_cast<std::size_t>(i) * channels + c;
      const double d = x0.values()[at] - den.values()[at];
      acc += d * d;
    }
    field[static_cast<std::size_t>(i)] = acc / channels;
  }
  return field;
}

void ErrorTrainOptions::validate() const {
  require(std::isfinite(budget_kimg) && budget_kimg >= 0.0, "budget must be non-negative");
  require(batch_size >= 1, "batch size must be at least 1");
  require(log_every >= 1, "log interval must be at least 1");
}

std::vector<TrainMetricsRow> train_error_predictor(ErrorPredictorNet& predictor,
                                                   const TrajectoryDataset& data,
                                                   const DenoiseFn& frozen_denoiser,
                                                   const GraphHierarchy& hier,
                                                   const NoiseSchedule& schedule,
                                                   const OptimizerConfig& opt,
                                                   const ErrorTrainOptions& options, Rng& rng) {
  data.validate();
  opt.validate();
  options.validate();
  schedule.validate();
  require(predictor.net.config.cond_channels == data.num_channels,
          "predictor conditioning width does not match the dataset");
  require(hier.fine.num_nodes == data.num_nodes(), "hierarchy does not match the dataset");
  const int traj_len = static_cast<int>(data.trajectories.front().size());
  require(traj_len >= 2, "error-predictor training needs at least two states per trajectory");

  std::vector<Tensor> params = parameters(predictor.net);
  AdamState adam = make_adam_state(params);
  std::vector<TrainMetricsRow> log;

  double consumed = 0.0;
  int step = 0;
  while (consumed < options.budget_kimg) {
    ++step;
    for (Tensor& p : params) p.zero_grad();

    std::vector<Tensor> conds;
    std::vector<std::vector<double>> targets;
    for (int b = 0; b < options.batch_size; ++b) {
      const int r = static_cast<int>(rng.uniform_index(data.trajectories.size()));
      const int t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(traj_len - 1)));
      Tensor x0 = state_tensor(data, r, t);
      Tensor cond = state_tensor(data, r, t - 1);
      targets.push_back(ground_truth_error_field(frozen_denoiser, x0, cond, schedule, rng));
      conds.push_back(cond);
    }
    if (step == 1) {
      // pin the normalization so Huber's delta = 1 bites at the data scale
      double mean = 0.0;
      std::size_t count = 0;
      for (const auto& t : targets)
        for (double v : t) {
          mean += v;
          ++count;
        }
      mean /= static_cast<double>(count);
      predictor.target_scale = std::max(mean, 1e-12);
    }

    Tensor batch_loss;
    for (int b = 0; b < options.batch_size; ++b) {
      const int nodes = conds[static_cast<std::size_t>(b)].shape()[0];
      std::vector<double> normalized = targets[static_cast<std::size_t>(b)];
      for (double& v : normalized) v /= predictor.target_scale;
      Tensor target = Tensor::from_data({nodes, 1}, normalized);
      Tensor zeros = Tensor::zeros({nodes, 1});
      Tensor pred = softplus(
          forward_raw(predictor.net, hier, zeros, conds[static_cast<std::size_t>(b)], 1.0));
      Tensor field_loss = mean(huber(sub(pred, target), 1.0));
      batch_loss = batch_loss.defined() ? add(batch_loss, field_loss) : field_loss;
    }
    batch_loss = scale(batch_loss, 1.0 / options.batch_size);

    const double loss_value = batch_loss.item();
    if (!std::isfinite(loss_value))
      throw std::runtime_error("sensing: non-finite error-predictor loss at step " +
                               std::to_string(step));
    backward(batch_loss);
    consumed += options.batch_size / 1000.0;
    double lr = opt.lr;
    if (opt.ramp_kimg > 0.0) lr *= std::min(1.0, consumed / opt.ramp_kimg);
    adam_step(params, adam, opt, lr);

    if (step % options.log_every == 0 || consumed >= options.budget_kimg) {
      TrainMetricsRow row;
      row.step = step;
      row.kimg = consumed;
      row.k_active = 1;
      row.lr = lr;
      row.loss = loss_value;
      log.push_back(row);
    }
  }
  return log;
}

void save_error_predictor(const ErrorPredictorNet& predictor, const std::string& path) {
  save_checkpoint(path, predictor.net);
  std::FILE* f = std::fopen(path.c_str(), "a");
  require(f != nullptr, "cannot append to " + path);
  std::fprintf(f, "errscale %.17g\n", predictor.target_scale);
  std::fclose(f);
}

ErrorPredictorNet load_error_predictor(const std::string& path) {
  ErrorPredictorNet p;
  p.net = load_checkpoint(path);
  // the scale record trails the base checkpoint's end marker
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, "cannot open " + path);
  char tag[32];
  double scale = 0.0;
  bool found = false;
  while (std::fscanf(f, "%31s", tag) == 1) {
    if (std::string(tag) == "errscale" && std::fscanf(f, "%lg", &scale) == 1) {
      found = true;
      break;
    }
  }
  std::fclose(f);
  require(found && std::isfinite(scale) && scale > 0.0, "missing errscale record in " + path);
  p.target_scale = scale;
  return p;
}

ScoreField uncertainty_field(const EnsembleForecast& ensemble, const MeshGraph& graph) {
  require(ensemble.members.size() >= 2, "uncertainty needs at least two ensemble members");
  std::vector<double> u = ensemble.uncertainty.empty()
                              ? ensemble_uncertainty(ensemble.members)
                              : ensemble.uncertainty;
  return make_score_field(graph, std::move(u));
}

SensorSet place_sensors(PlacementStrategy strategy, const PlacementContext& ctx) {
  require(ctx.graph != nullptr, "placement context needs a graph");
  ctx.budget.validate();
  const MeshGraph& graph = *ctx.graph;

  SensorSet out;
  if (strategy == PlacementStrategy::random) {
    require(ctx.rng != nullptr, "random placement needs an rng");
    std::vector<double> flat(static_cast<std::size_t>(graph.num_nodes), 1.0);
    ScoreField field = make_score_field(graph, std::move(flat));
    out.nodes = select_with_gap(field, graph, ctx.budget, ctx.metric, ctx.grid_dims, ctx.rng,
                                &out.truncated);
    out.strategy = "random";
  } else if (strategy == PlacementStrategy::predictive) {
    require(ctx.predictor != nullptr && ctx.hierarchy != nullptr && ctx.condition != nullptr,
            "predictive placement needs a predictor, hierarchy, and conditioning state");
    Tensor errs = predict_error(*ctx.predictor, *ctx.hierarchy, *ctx.condition);
    ScoreField field = make_score_field(graph, errs.values());
    out = greedy_select(field, graph, ctx.budget, ctx.metric, ctx.grid_dims);
    out.strategy = "predictive";
  } else {
    require(ctx.ensemble != nullptr, "uncertainty placement needs an ensemble");
    ScoreField field = uncertainty_field(*ctx.ensemble, graph);
    out = greedy_select(field, graph, ctx.budget, ctx.metric, ctx.grid_dims);
    out.strategy = "uncertainty";
  }
  out.budget_s = ctx.budget.s;
  out.gap = ctx.budget.g;
  return out;
}

}  // namespace flowcast
