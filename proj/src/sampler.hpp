#pragma once

#include <utility>
#include <vector>

#include "denoiser.hpp"
#include "graphmesh.hpp"
#include "schedule.hpp"
#include "tensor.hpp"

namespace flowcast {

// Sensor readings assimilated by the guided sampler. observed_values is
// row-major [num_sensors, channels].
struct ObservationModel {
  std::vector<int> sensor_indices;
  double noise_var = 1.0;   // Sigma_y
  double gamma_hat = 0.1;   // scalar stand-in for the Jacobian-prior variance
  std::vector<double> observed_values;

  bool empty() const { return sensor_indices.empty(); }
  // Unique interior indices, positive noise variance, matching value count.
  void validate(const MeshGraph& g, int channels) const;
};

// One Heun step of dx/dsigma = (x - D(x; sigma)) / sigma from sigma_cur down
// to sigma_next; single Euler stage when sigma_next is 0. The paper prints
// the drift with the opposite sign, which contradicts its own sampling
// direction; the analytic D == 0 solution x(sigma) = x0 sigma / sigma_max
// fixes the sign used here.
Tensor pf_ode_step(const DenoiseFn& denoiser, const Tensor& x, double sigma_cur,
                   double sigma_next, const Tensor& condition);

// EDM churn: inflate sigma to (1+gamma) sigma inside [s_min, s_max] and add
// the variance difference as fresh noise. Identity (no rng consumed) outside
// the interval or when s_churn is 0.
std::pair<Tensor, double> churn(const Tensor& x, double sigma_cur, const SamplerConfig& config,
                                Rng& rng);

// SDA likelihood gradient: d/dx of -||y - M(D(x;sigma))||^2 / (2 (Sigma_y +
// sigma^2 Gamma)), differentiated through the denoiser. Returns an
// undefined Tensor when the sensor set is empty. Leaves gradient residue on
// any trainable weights inside `denoiser`; zero_grad before training again.
Tensor guidance_gradient(const DenoiseFn& denoiser, const Tensor& x, const Tensor& condition,
                         double sigma, const ObservationModel& obs);

// Churned Heun integration from x ~ N(0, sigma_max^2 I) down the sigma_steps
// ladder to 0. `condition` may be undefined for unconditional nets.
Tensor sample(const DenoiseFn& denoiser, const Shape& state_shape,
              const NoiseSchedule& schedule, const SamplerConfig& config,
              const Tensor& condition, Rng& rng);

// Same step structure with the likelihood gradient folded into the drift at
// both Heun stages. An empty observation set reproduces sample() bitwise.
Tensor guided_sample(const DenoiseFn& denoiser, const Shape& state_shape,
                     const NoiseSchedule& schedule, const SamplerConfig& config,
                     const Tensor& condition, const ObservationModel& obs, Rng& rng);

struct EnsembleForecast {
  std::vector<Tensor> members;
  std::vector<double> uncertainty;  // per node, populated when E >= 2
};

// u_i: per-node mean over channels of the population standard deviation
// across members.
std::vector<double> ensemble_uncertainty(const std::vector<Tensor>& members);

// E members drawn sequentially from one rng; obs may be null for unguided
// forecasts, and all members share it (placement precedes member sampling).
EnsembleForecast sample_ensemble(const DenoiseFn& denoiser, const Shape& state_shape,
                                 const NoiseSchedule& schedule, const SamplerConfig& config,
                                 const Tensor& condition, const ObservationModel* obs,
                                 int ensemble_size, Rng& rng);

}  // namespace flowcast
