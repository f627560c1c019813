#include "sampler.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>

namespace flowcast {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("sampler: " + msg);
}

// One denoise with the tape rooted at x, plus the observation mismatch
// gradient d/dx ||y - M(D)||^2 / (2 (Sigma_y + sigma^2 Gamma)). The gradient
// tensor is undefined when the denoiser does not depend on x.
std::pair<Tensor, Tensor> likelihood_pass(const DenoiseFn& denoiser, const Tensor& x,
                                          const Tensor& condition, double sigma,
                                          const ObservationModel& obs) {
  Tensor xt = detach(x);
  xt.set_requires_grad(true);
  Tensor den = denoiser(xt, condition, sigma);
  require(den.ndim() == 2 && den.shape() == x.shape(), "denoiser output shape mismatch");
  const int channels = den.shape()[1];
  const int sensors = static_cast<int>(obs.sensor_indices.size());
  require(obs.noise_var > 0.0, "noise_var must be positive");
  require(obs.gamma_hat >= 0.0, "gamma_hat must be non-negative");
  require(static_cast<int>(obs.observed_values.size()) == sensors * channels,
          "observed_values must hold num_sensors * channels entries");
  for (int idx : obs.sensor_indices)
    require(idx >= 0 && idx < den.shape()[0], "sensor index out of range");

  Tensor picked = gather_rows(den, obs.sensor_indices);
  Tensor y = Tensor::from_data({sensors, channels}, obs.observed_values);
  Tensor resid = sub(y, picked);
  const double denom = obs.noise_var + sigma * sigma * obs.gamma_hat;
  Tensor loss = scale(sum(mul(resid, resid)), 0.5 / denom);
  if (loss.requires_grad()) backward(loss);
  Tensor grad = xt.has_grad() ? Tensor::from_data(x.shape(), xt.grad()) : Tensor();
  return {detach(den), grad};
}

// dx/dsigma, optionally with the likelihood term folded in:
//   (x - D)/sigma - sigma * s_lik,  s_lik = -grad of the mismatch above.
Tensor drift(const DenoiseFn& denoiser, const Tensor& x, double sigma, const Tensor& condition,
             const ObservationModel* obs) {
  if (obs == nullptr || obs->empty()) {
    Tensor den = denoiser(x, condition, sigma);
    return detach(scale(sub(x, den), 1.0 / sigma));
  }
  auto [den, grad] = likelihood_pass(denoiser, x, condition, sigma, *obs);
  Tensor d = scale(sub(detach(x), den), 1.0 / sigma);
  if (grad.defined()) d = add(d, scale(grad, sigma));
  return d;
}

Tensor heun_step(const DenoiseFn& denoiser, const Tensor& x, double sigma_cur, double sigma_next,
                 const Tensor& condition, const ObservationModel* obs) {
  require(std::isfinite(sigma_cur) && std::isfinite(sigma_next), "sigma must be finite");
  require(sigma_cur > sigma_next && sigma_next >= 0.0,
          "step requires sigma_cur > sigma_next >= 0");
  const double h = sigma_next - sigma_cur;
  Tensor d1 = drift(denoiser, x, sigma_cur, condition, obs);
  Tensor x_euler = detach(add(x, scale(d1, h)));
  if (sigma_next == 0.0) return x_euler;
  Tensor d2 = drift(denoiser, x_euler, sigma_next, condition, obs);
  return detach(add(x, scale(add(d1, d2), 0.5 * h)));
}

Tensor run_sampler(const DenoiseFn& denoiser, const Shape& state_shape,
                   const NoiseSchedule& schedule, const SamplerConfig& config,
                   const Tensor& condition, const ObservationModel* obs, Rng& rng) {
  schedule.validate();
  config.validate();
  require(state_shape.size() == 2 && state_shape[0] > 0 && state_shape[1] > 0,
          "state shape must be [nodes, channels]");
  const std::vector<double> sigmas = sigma_steps(config, schedule);
  Tensor x = randn(state_shape, rng, sigmas.front());
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
    auto [x_churned, sigma_hat] = churn(x, sigmas[i], config, rng);
    x = heun_step(denoiser, x_churned, sigma_hat, sigmas[i + 1], condition, obs);
  }
  return x;
}

}  // namespace

void ObservationModel::validate(const MeshGraph& g, int channels) const {
  require(channels > 0, "channels must be positive");
  require(noise_var > 0.0, "noise_var must be positive");
  require(gamma_hat >= 0.0, "gamma_hat must be non-negative");
  std::unordered_set<int> seen;
  for (int idx : sensor_indices) {
    require(idx >= 0 && idx < g.num_nodes, "sensor index out of range");
    require(g.boundary[static_cast<std::size_t>(idx)] == 0, "sensors must sit on interior nodes");
    require(seen.insert(idx).second, "duplicate sensor index");
  }
  require(observed_values.size() == sensor_indices.size() * static_cast<std::size_t>(channels),
          "observed_values must hold num_sensors * channels entries");
}

Tensor pf_ode_step(const DenoiseFn& denoiser, const Tensor& x, double sigma_cur,
                   double sigma_next, const Tensor& condition) {
  require(x.defined() && x.ndim() == 2, "state must be a [nodes, channels] tensor");
  return heun_step(denoiser, x, sigma_cur, sigma_next, condition, nullptr);
}

std::pair<Tensor, double> churn(const Tensor& x, double sigma_cur, const SamplerConfig& config,
                                Rng& rng) {
  config.validate();
  require(x.defined(), "churn state must be defined");
  require(std::isfinite(sigma_cur) && sigma_cur > 0.0, "sigma must be positive");
  double gamma = 0.0;
  if (config.s_churn > 0.0 && sigma_cur >= config.s_min && sigma_cur <= config.s_max) {
    const double cap = std::sqrt(2.0) - 1.0;
    gamma = std::min(config.s_churn / config.num_steps, cap);
  }
  if (gamma == 0.0) return {x, sigma_cur};
  const double sigma_hat = (1.0 + gamma) * sigma_cur;
  const double noise_std =
      std::sqrt(sigma_hat * sigma_hat - sigma_cur * sigma_cur) * config.s_noise;
  Tensor noise = randn(x.shape(), rng, noise_std);
  return {detach(add(x, noise)), sigma_hat};
}

Tensor guidance_gradient(const DenoiseFn& denoiser, const Tensor& x, const Tensor& condition,
                         double sigma, const ObservationModel& obs) {
  require(x.defined() && x.ndim() == 2, "state must be a [nodes, channels] tensor");
  require(std::isfinite(sigma) && sigma > 0.0, "sigma must be positive");
  if (obs.empty()) return Tensor();
  auto [den, grad] = likelihood_pass(denoiser, x, condition, sigma, obs);
  (void)den;
  if (!grad.defined()) return Tensor::zeros(x.shape());
  return neg(grad);
}

Tensor sample(const DenoiseFn& denoiser, const Shape& state_shape,
              const NoiseSchedule& schedule, const SamplerConfig& config,
              const Tensor& condition, Rng& rng) {
  return run_sampler(denoiser, state_shape, schedule, config, condition, nullptr, rng);
}

Tensor guided_sample(const DenoiseFn& denoiser, const Shape& state_shape,
                     const NoiseSchedule& schedule, const SamplerConfig& config,
                     const Tensor& condition, const ObservationModel& obs, Rng& rng) {
  return run_sampler(denoiser, state_shape, schedule, config, condition,
                     obs.empty() ? nullptr : &obs, rng);
}

std::vector<double> ensemble_uncertainty(const std::vector<Tensor>& members) {
  require(members.size() >= 2, "uncertainty needs at least two members");
  const Shape shape = members.front().shape();
  require(shape.size() == 2, "members must be [nodes, channels] tensors");
  for (const Tensor& m : members) require(m.shape() == shape, "member shape mismatch");
  const int nodes = shape[0];
  const int channels = shape[1];
  const double count = static_cast<double>(members.size());
  std::vector<double> u(static_cast<std::size_t>(nodes), 0.0);
  for (int i = 0; i < nodes; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const std::size_t at = static_cast<std::size_t>(i) * channels + c;
      double mean = 0.0;
      for (const Tensor& m : members) mean += m.values()[at];
      mean /= count;
      double sq = 0.0;
      for (const Tensor& m : members) {
        const double d = m.values()[at] - mean;
        sq += d * d;
      }
      acc += std::sqrt(sq / count);
    }
    u[static_cast<std::size_t>(i)] = acc / channels;
  }
  return u;
}

EnsembleForecast sample_ensemble(const DenoiseFn& denoiser, const Shape& state_shape,
                                 const NoiseSchedule& schedule, const SamplerConfig& config,
                                 const Tensor& condition, const ObservationModel* obs,
                                 int ensemble_size, Rng& rng) {
  require(ensemble_size >= 1, "ensemble size must be at least 1");
  EnsembleForecast out;
  out.members.reserve(static_cast<std::size_t>(ensemble_size));
  for (int e = 0; e < ensemble_size; ++e) {
    out.members.push_back(
        run_sampler(denoiser, state_shape, schedule, config, condition,
                    (obs != nullptr && !obs->empty()) ? obs : nullptr, rng));
  }
  if (ensemble_size >= 2) out.uncertainty = ensemble_uncertainty(out.members);
  return out;
}

}  // namespace flowcast
