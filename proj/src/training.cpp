#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace flowcast {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

Tensor sum_squares(const Tensor& r) { return sum(mul(r, r)); }

// One rollout-step term: lambda(sigma) * w * ||D - target||^2. Consumes one
// sigma draw then one noise field from rng.
Tensor step_term(const DenoiseFn& denoiser, const Tensor& target, const Tensor& condition,
                 double w, const NoiseSchedule& schedule, Rng& rng, Tensor* denoised_out) {
  const double sigma = sample_sigma(schedule, rng);
  Tensor noise = randn(target.shape(), rng, sigma);
  Tensor out = denoiser(add(target, noise), condition, sigma);
  if (denoised_out) *denoised_out = out;
  return scale(sum_squares(sub(out, target)), loss_weight(sigma, schedule.sigma_data) * w);
}

}  // namespace

double RolloutConfig::weight(int k) const {
  return step_weights.empty() ? 1.0 : step_weights[static_cast<size_t>(k)];
}

void RolloutConfig::validate() const {
  require(K >= 1, "rollout: K must be >= 1");
  require(step_weights.empty() || static_cast<int>(step_weights.size()) == K,
          "rollout: step_weights must be empty or length K");
  for (double w : step_weights) require(w > 0.0, "rollout: step weights must be positive");
  require(curriculum_kimg >= 0.0, "rollout: curriculum_kimg must be >= 0");
}

void OptimizerConfig::validate() const {
  require(lr >= 0.0, "optimizer: lr must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "optimizer: betas must lie in [0, 1)");
  require(eps > 0.0, "optimizer: eps must be > 0");
  require(weight_decay >= 0.0, "optimizer: weight_decay must be >= 0");
  require(ramp_kimg >= 0.0, "optimizer: ramp_kimg must be >= 0");
}

void TrainOptions::validate() const {
  require(budget_kimg >= 0.0, "train: budget_kimg must be >= 0");
  require(batch_size >= 1, "train: batch_size must be >= 1");
  require(log_every >= 1, "train: log_every must be >= 1");
  require(kimg_offset >= 0.0, "train: kimg_offset must be >= 0");
  require(checkpoint_interval_kimg >= 0.0, "train: checkpoint interval must be >= 0");
}

AdamState make_adam_state(const std::vector<Tensor>& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(static_cast<size_t>(p.size()), 0.0);
    st.v.emplace_back(static_cast<size_t>(p.size()), 0.0);
  }
  return st;
}

void adam_step(std::vector<Tensor>& params, AdamState& state, const OptimizerConfig& cfg,
               double lr) {
  require(params.size() == state.m.size(), "adam: state does not match parameter list");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = params[i].has_grad();
    const std::vector<double>* g = has ? &params[i].grad() : nullptr;
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g ? (*g)[j] : 0.0;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[j]);
    }
  }
}

Tensor single_step_loss(const DenoiseFn& denoiser, const Tensor& x0, const Tensor& condition,
                        const NoiseSchedule& schedule, Rng& rng) {
  return step_term(denoiser, x0, condition, 1.0, schedule, rng, nullptr);
}

Tensor single_step_loss(const DenoiserNet& net, const GraphHierarchy& hier, const Tensor& x0,
                        const Tensor& condition, const NoiseSchedule& schedule, Rng& rng) {
  return single_step_loss(bind_denoiser(net, hier), x0, condition, schedule, rng);
}

Tensor multi_step_loss(const DenoiseFn& denoiser, bool predict_increment,
                       const std::vector<Tensor>& trajectory, const RolloutConfig& rollout,
                       const NoiseSchedule& schedule, Rng& rng) {
  rollout.validate();
  if (static_cast<int>(trajectory.size()) < rollout.K + 1)
    throw std::invalid_argument("multi_step_loss: trajectory shorter than K+1 states");

  Tensor cond = detach(trajectory[0]);
  Tensor acc;
  for (int k = 1; k <= rollout.K; ++k) {
    const Tensor& xk = trajectory[static_cast<size_t>(k)];
    Tensor target = predict_increment ? sub(xk, cond) : xk;
    Tensor denoised;
    Tensor term = step_term(denoiser, target, cond, rollout.weight(k - 1), schedule, rng,
                            &denoised);
    acc = k == 1 ? term : add(acc, term);
    if (k < rollout.K) {
      Tensor pred = predict_increment ? add(cond, denoised) : denoised;
      cond = detach(pred);
    }
  }
  return scale(acc, 1.0 / static_cast<double>(rollout.K));
}

Tensor multi_step_loss(const DenoiserNet& net, const GraphHierarchy& hier,
                       const std::vector<Tensor>& trajectory, const RolloutConfig& rollout,
                       const NoiseSchedule& schedule, Rng& rng) {
  return multi_step_loss(bind_denoiser(net, hier), net.config.predict_increment, trajectory,
                         rollout, schedule, rng);
}

Tensor state_tensor(const TrajectoryDataset& data, int trajectory, int step) {
  const auto& state =
      data.trajectories[static_cast<size_t>(trajectory)][static_cast<size_t>(step)];
  return Tensor::from_data({data.num_nodes(), data.num_channels}, state);
}

std::vector<TrainMetricsRow> train(DenoiserNet& net, const TrajectoryDataset& data,
                                   const GraphHierarchy& hier, const RolloutConfig& rollout,
                                   const OptimizerConfig& opt, const NoiseSchedule& schedule,
                                   const TrainOptions& options, Rng& rng) {
  rollout.validate();
  opt.validate();
  options.validate();
  schedule.validate();
  data.validate();
  require(!data.trajectories.empty(), "train: dataset is empty");
  require(net.config.state_channels == data.num_channels,
          "train: net state_channels does not match dataset");
  require(net.config.cond_channels == data.num_channels,
          "train: net cond_channels must match dataset channels");
  const int min_len = rollout.K + 1;
  for (const auto& traj : data.trajectories)
    require(static_cast<int>(traj.size()) >= min_len,
            "train: trajectory shorter than rollout window");

  std::FILE* metrics_file = nullptr;
  if (!options.metrics_path.empty()) {
    bool fresh = true;
    if (std::FILE* probe = std::fopen(options.metrics_path.c_str(), "r")) {
      fresh = false;
      std::fclose(probe);
    }
    metrics_file = std::fopen(options.metrics_path.c_str(), "a");
    if (!metrics_file)
      throw std::runtime_error("train: cannot open metrics file " + options.metrics_path);
    if (fresh) std::fprintf(metrics_file, "step,kimg,k_active,lr,loss\n");
  }

  std::vector<TrainMetricsRow> log;
  auto params = parameters(net);
  AdamState adam = make_adam_state(params);
  double consumed_kimg = 0.0;
  long long step = 0;
  double next_checkpoint = options.checkpoint_interval_kimg;

  while (consumed_kimg < options.budget_kimg) {
    const int k_active =
        options.kimg_offset + consumed_kimg < rollout.curriculum_kimg ? 1 : rollout.K;
    RolloutConfig active = rollout;
    active.K = k_active;
    if (!active.step_weights.empty())
      active.step_weights.resize(static_cast<size_t>(k_active));

    for (auto& p : params) p.zero_grad();
    Tensor batch_loss;
    for (int b = 0; b < options.batch_size; ++b) {
      const auto r = rng.uniform_index(data.trajectories.size());
      const auto len = data.trajectories[r].size();
      const auto t0 = rng.uniform_index(len - static_cast<size_t>(k_active));
      std::vector<Tensor> window;
      window.reserve(static_cast<size_t>(k_active) + 1);
      for (int k = 0; k <= k_active; ++k)
        window.push_back(
            state_tensor(data, static_cast<int>(r), static_cast<int>(t0) + k));
      Tensor item = multi_step_loss(net, hier, window, active, schedule, rng);
      batch_loss = b == 0 ? item : add(batch_loss, item);
    }
    batch_loss = scale(batch_loss, 1.0 / options.batch_size);
    const double loss_value = batch_loss.item();
    if (!std::isfinite(loss_value)) {
      if (metrics_file) std::fclose(metrics_file);
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                               " (kimg " + std::to_string(consumed_kimg) + ")");
    }
    backward(batch_loss);

    consumed_kimg += options.batch_size * k_active / 1000.0;
    const double ramp = opt.ramp_kimg > 0.0
                            ? std::min(1.0, (options.kimg_offset + consumed_kimg) / opt.ramp_kimg)
                            : 1.0;
    const double lr = opt.lr * ramp;
    adam_step(params, adam, opt, lr);
    step += 1;

    if (step % options.log_every == 0 || consumed_kimg >= options.budget_kimg) {
      TrainMetricsRow row{step, options.kimg_offset + consumed_kimg, k_active, lr, loss_value};
      log.push_back(row);
      if (metrics_file)
        std::fprintf(metrics_file, "%lld,%.6f,%d,%.17g,%.17g\n", row.step, row.kimg,
                     row.k_active, row.lr, row.loss);
    }
    if (!options.checkpoint_path.empty() && options.checkpoint_interval_kimg > 0.0 &&
        consumed_kimg >= next_checkpoint) {
      save_checkpoint(options.checkpoint_path, net);
      next_checkpoint += options.checkpoint_interval_kimg;
    }
  }

  if (metrics_file && std::fclose(metrics_file) != 0)
    throw std::runtime_error("train: metrics write failed");
  if (!options.checkpoint_path.empty()) save_checkpoint(options.checkpoint_path, net);
  return log;
}

}  // namespace flowcast
