#pragma once

#include <vector>

#include "rng.hpp"

namespace flowcast {

// EDM noise schedule: training noise distribution and preconditioning scales.
// Defaults follow the graph-experiment column of the consolidated
// hyperparameter table.
struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double p_mean = -0.2;
  double p_std = 2.2;
  double sigma_data = 1.0;

  void validate() const;
};

// Deterministic sampler discretization and churn settings.
struct SamplerConfig {
  int num_steps = 30;
  double rho = 7.0;
  double s_churn = 80.0;
  double s_noise = 1.003;
  double s_min = 0.01;
  double s_max = 50.0;

  void validate() const;
};

struct PreconditionCoeffs {
  double c_skip;
  double c_out;
  double c_in;
  double c_noise;
};

// One log-normal noise level: exp(z), z ~ N(p_mean, p_std^2).
double sample_sigma(const NoiseSchedule& schedule, Rng& rng);

PreconditionCoeffs precondition_coeffs(double sigma, double sigma_data);

// lambda(sigma) = (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2
double loss_weight(double sigma, double sigma_data);

// N noise levels, log-linear in rho-space from sigma_max down to sigma_min,
// with a terminal 0 appended (N+1 entries, strictly decreasing).
std::vector<double> sigma_steps(const SamplerConfig& config, const NoiseSchedule& schedule);

}  // namespace flowcast
