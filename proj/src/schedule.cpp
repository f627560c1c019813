#include "schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace flowcast {

void NoiseSchedule::validate() const {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
    throw std::invalid_argument("noise schedule requires 0 < sigma_min < sigma_max");
  if (!(p_std > 0.0)) throw std::invalid_argument("noise schedule requires p_std > 0");
  if (!(sigma_data > 0.0)) throw std::invalid_argument("noise schedule requires sigma_data > 0");
}

void SamplerConfig::validate() const {
  if (num_steps < 2) throw std::invalid_argument("sampler requires num_steps >= 2");
  if (!(rho > 0.0)) throw std::invalid_argument("sampler requires rho > 0");
  if (s_churn < 0.0 || !(s_noise > 0.0))
    throw std::invalid_argument("sampler requires s_churn >= 0 and s_noise > 0");
  if (s_min < 0.0 || !(s_max > s_min))
    throw std::invalid_argument("sampler requires s_max > s_min >= 0");
}

double sample_sigma(const NoiseSchedule& schedule, Rng& rng) {
  return std::exp(rng.normal(schedule.p_mean, schedule.p_std));
}

PreconditionCoeffs precondition_coeffs(double sigma, double sigma_data) {
  if (!(sigma_data > 0.0)) throw std::invalid_argument("precondition_coeffs: sigma_data <= 0");
  if (sigma < 0.0) throw std::invalid_argument("precondition_coeffs: sigma < 0");
  const double sd2 = sigma_data * sigma_data;
  const double tot = sigma * sigma + sd2;
  PreconditionCoeffs c;
  c.c_skip = sd2 / tot;
  c.c_out = sigma * sigma_data / std::sqrt(tot);
  c.c_in = 1.0 / std::sqrt(tot);
  // c_noise is only consumed by denoiser calls, which never happen at sigma=0
  c.c_noise = sigma > 0.0 ? 0.25 * std::log(sigma) : 0.0;
  return c;
}

double loss_weight(double sigma, double sigma_data) {
  if (!(sigma > 0.0)) throw std::invalid_argument("loss_weight: sigma <= 0");
  const double p = sigma * sigma_data;
  return (sigma * sigma + sigma_data * sigma_data) / (p * p);
}

std::vector<double> sigma_steps(const SamplerConfig& config, const NoiseSchedule& schedule) {
  config.validate();
  schedule.validate();
  const int n = config.num_steps;
  const double inv_rho = 1.0 / config.rho;
  const double hi = std::pow(schedule.sigma_max, inv_rho);
  const double lo = std::pow(schedule.sigma_min, inv_rho);
  std::vector<double> steps(static_cast<size_t>(n) + 1);
  for (int i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(n - 1);
    steps[static_cast<size_t>(i)] = std::pow(hi + t * (lo - hi), config.rho);
  }
  steps[static_cast<size_t>(n)] = 0.0;
  return steps;
}

}  // namespace flowcast
