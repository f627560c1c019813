#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "datagen.hpp"
#include "denoiser.hpp"
#include "graphmesh.hpp"
#include "sampler.hpp"
#include "schedule.hpp"
#include "tensor.hpp"
#include "training.hpp"

namespace flowcast {

struct SensorBudget {
  int s = 1;       // number of sensors
  double g = 0.0;  // suppression gap, absolute units of the chosen metric
  void validate() const;
};

// Distance used by the suppression rule. grid_chebyshev decomposes node ids
// row-major over grid_dims and takes the max per-axis index difference, so g
// is quoted in grid points; position_euclidean works on mesh coordinates.
enum class GapMetric { position_euclidean, grid_chebyshev };

struct ScoreField {
  std::vector<double> score;              // per node, nonnegative
  std::vector<std::uint8_t> eligible;     // interior nodes only
  void validate() const;
};

// Eligibility = interior nodes of the graph.
ScoreField make_score_field(const MeshGraph& graph, std::vector<double> score);

struct SensorSet {
  std::vector<int> nodes;  // selection order
  bool truncated = false;  // fewer than budget.s survived suppression
  std::string strategy = "greedy";
  int budget_s = 0;
  double gap = 0.0;
  int step_index = 0;
};

double suppression_distance(const MeshGraph& graph, GapMetric metric,
                            const std::vector<int>& grid_dims, int a, int b);

// Iteratively pick the eligible argmax (ties to the lowest node index), then
// drop every node strictly closer than g to the pick. Throws when nothing is
// eligible at the start; sets `truncated` when suppression starves the budget.
SensorSet greedy_select(const ScoreField& field, const MeshGraph& graph,
                        const SensorBudget& budget,
                        GapMetric metric = GapMetric::position_euclidean,
                        const std::vector<int>& grid_dims = {});

// Denoiser backbone reused as the error predictor: the state slot is fed
// zeros, the noise embedding a fixed sigma of 1, so the AdaLN modulation
// degenerates to learned per-block constants. Output head is softplus times
// the target scale fixed from the first training batch.
struct ErrorPredictorNet {
  DenoiserNet net;  // state_channels forced to 1
  double target_scale = 1.0;
};

ErrorPredictorNet make_error_predictor(const DenoiserConfig& cfg, Rng& rng);

// Nonnegative [num_nodes, 1] predicted error map for a conditioning state.
Tensor predict_error(const ErrorPredictorNet& predictor, const GraphHierarchy& hier,
                     const Tensor& x_cond);

// E_gt,i = (1/C) || x0_i - D(x0 + sigma_max n; sigma_max, condition)_i ||^2
std::vector<double> ground_truth_error_field(const DenoiseFn& denoiser, const Tensor& x0,
                                             const Tensor& condition,
                                             const NoiseSchedule& schedule, Rng& rng);

struct ErrorTrainOptions {
  double budget_kimg = 1.0;  // thousands of supervised error fields
  int batch_size = 4;
  int log_every = 1;
  void validate() const;
};

// Huber (delta = 1 on scale-normalized targets) regression of the predictor
// against ground-truth error fields; the denoiser is only evaluated, never
// updated. Windows are (condition = state t-1, target state t).
std::vector<TrainMetricsRow> train_error_predictor(ErrorPredictorNet& predictor,
                                                   const TrajectoryDataset& data,
                                                   const DenoiseFn& frozen_denoiser,
                                                   const GraphHierarchy& hier,
                                                   const NoiseSchedule& schedule,
                                                   const OptimizerConfig& opt,
                                                   const ErrorTrainOptions& options, Rng& rng);

void save_error_predictor(const ErrorPredictorNet& predictor, const std::string& path);
ErrorPredictorNet load_error_predictor(const std::string& path);

// Per-node mean-over-channels population std across ensemble members.
ScoreField uncertainty_field(const EnsembleForecast& ensemble, const MeshGraph& graph);

enum class PlacementStrategy { random, predictive, uncertainty };

struct PlacementContext {
  const MeshGraph* graph = nullptr;
  SensorBudget budget;
  GapMetric metric = GapMetric::position_euclidean;
  std::vector<int> grid_dims;

  const ErrorPredictorNet* predictor = nullptr;  // predictive
  const GraphHierarchy* hierarchy = nullptr;     // predictive
  const Tensor* condition = nullptr;             // predictive
  const EnsembleForecast* ensemble = nullptr;    // uncertainty
  Rng* rng = nullptr;                            // random
};

// random: uniform over eligible nodes under the same gap rule; predictive:
// greedy on the predicted error map; uncertainty: greedy on u_i.
SensorSet place_sensors(PlacementStrategy strategy, const PlacementContext& ctx);

}  // namespace flowcast
