#pragma once

#include <string>
#include <vector>

#include "datagen.hpp"
#include "denoiser.hpp"
#include "graphmesh.hpp"
#include "schedule.hpp"
#include "tensor.hpp"

namespace flowcast {

struct RolloutConfig {
  int K = 1;
  std::vector<double> step_weights;  // empty means w(k) = 1 everywhere
  double curriculum_kimg = 0.0;      // 0 disables the single-step warmup

  double weight(int k) const;  // k in [0, K)
  void validate() const;
};

struct OptimizerConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double ramp_kimg = 0.0;  // lr scales linearly from 0 over this many kimg

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long long t = 0;
};

AdamState make_adam_state(const std::vector<Tensor>& params);
// One Adam(W) update from the grads currently on `params`; tensors without a
// grad this step are treated as zero-gradient.
void adam_step(std::vector<Tensor>& params, AdamState& state, const OptimizerConfig& cfg,
               double lr);

// lambda(sigma) * ||D(x0 + sigma n; sigma, condition) - x0||_F^2 with one
// sigma draw and one noise field. x0 is the diffusion variable (the increment
// when the net is configured for increment prediction).
Tensor single_step_loss(const DenoiseFn& denoiser, const Tensor& x0, const Tensor& condition,
                        const NoiseSchedule& schedule, Rng& rng);
Tensor single_step_loss(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x0,
                        const Tensor& condition, const NoiseSchedule& schedule, Rng& rng);

// (1/K) sum_k w(k) lambda(sigma_k) ||xhat_k - x_k||_F^2 over a rollout whose
// conditioning is the detached previous prediction. trajectory holds the K+1
// states x^(0..K); rng consumption order is sigma then noise, per step.
Tensor multi_step_loss(const DenoiseFn& denoiser, bool predict_increment,
                       const std::vector<Tensor>& trajectory, const RolloutConfig& rollout,
                       const NoiseSchedule& schedule, Rng& rng);
Tensor multi_step_loss(const DenoiserNet& net, const GraphHierarchy& hier,
                       const std::vector<Tensor>& trajectory, const RolloutConfig& rollout,
                       const NoiseSchedule& schedule, Rng& rng);

struct TrainMetricsRow {
  long long step;
  double kimg;
  int k_active;
  double lr;
  double loss;
};

struct TrainOptions {
  double budget_kimg = 1.0;
  int batch_size = 8;
  int log_every = 1;
  double kimg_offset = 0.0;     // already-consumed budget when resuming
  std::string metrics_path;     // empty keeps metrics in memory only
  std::string checkpoint_path;  // empty disables periodic checkpoints
  double checkpoint_interval_kimg = 0.0;

  void validate() const;
};

// Adam training loop over random trajectory windows. kimg counts supervised
// prediction states consumed (batch * K_active per step, in thousands).
std::vector<TrainMetricsRow> train(DenoiserNet& net, const TrajectoryDataset& data,
                                   const GraphHierarchy& hier, const RolloutConfig& rollout,
                                   const OptimizerConfig& opt, const NoiseSchedule& schedule,
                                   const TrainOptions& options, Rng& rng);

// [N, C] tensor view of one stored snapshot.
Tensor state_tensor(const TrajectoryDataset& data, int trajectory, int step);

}  // namespace flowcast
