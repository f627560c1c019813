#include "theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace flowcast {

void BoundParams::validate() const {
  if (!(L > 0.0)) throw std::invalid_argument("prop1: L must be > 0");
  if (epsilon < 0.0) throw std::invalid_argument("prop1: epsilon must be >= 0");
  if (!(dt > 0.0)) throw std::invalid_argument("prop1: dt must be > 0");
  if (t < 0) throw std::invalid_argument("prop1: t must be >= 0");
}

double w2_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("w2_1d: empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const size_t n = a.size(), m = b.size();
  if (n == m) {
    long double acc = 0.0L;
    for (size_t i = 0; i < n; ++i) {
      const double d = a[i] - b[i];
      acc += static_cast<long double>(d) * d;
    }
    return std::sqrt(static_cast<double>(acc / static_cast<long double>(n)));
  }
  // unequal counts: integrate the squared quantile gap over the merged grid
  long double acc = 0.0L;
  size_t ia = 0, ib = 0;
  double u = 0.0;
  while (ia < n && ib < m) {
    const double next_a = static_cast<double>(ia + 1) / static_cast<double>(n);
    const double next_b = static_cast<double>(ib + 1) / static_cast<double>(m);
    const double next = std::min(next_a, next_b);
    const double d = a[ia] - b[ib];
    acc += static_cast<long double>(next - u) * d * d;
    u = next;
    if (next_a <= next) ++ia;
    if (next_b <= next) ++ib;
  }
  return std::sqrt(static_cast<double>(acc));
}

double intrinsic_spread(const MarkovKernel1D& kernel, const std::vector<double>& probe_states,
                        int samples_per_state, Rng& rng) {
  if (probe_states.empty()) throw std::invalid_argument("intrinsic_spread: no probe states");
  if (samples_per_state < 2) throw std::invalid_argument("intrinsic_spread: need >= 2 samples");
  double worst = 0.0;
  for (double x : probe_states) {
    long double s = 0.0L, s2 = 0.0L;
    for (int i = 0; i < samples_per_state; ++i) {
      const double v = kernel.sample(x, rng);
      if (!std::isfinite(v)) throw std::runtime_error("intrinsic_spread: non-finite kernel draw");
      s += v;
      s2 += static_cast<long double>(v) * v;
    }
    const double mean = static_cast<double>(s / samples_per_state);
    const double var = static_cast<double>(s2 / samples_per_state) - mean * mean;
    worst = std::max(worst, std::sqrt(std::max(var, 0.0)));
  }
  return worst;
}

double estimate_wasserstein_lipschitz(const MarkovKernel1D& kernel, double state_lo,
                                      double state_hi, int num_pairs, int samples_per_state,
                                      Rng& rng) {
  double worst = 0.0;
  std::vector<double> da(static_cast<size_t>(samples_per_state));
  std::vector<double> db(static_cast<size_t>(samples_per_state));
  // pairs closer than this would divide MC sampling noise by a tiny gap
  const double min_gap = 0.25 * (state_hi - state_lo);
  for (int p = 0; p < num_pairs; ++p) {
    const double x = rng.uniform(state_lo, state_hi);
    double y = rng.uniform(state_lo, state_hi);
    while (std::abs(y - x) < min_gap) y = rng.uniform(state_lo, state_hi);
    for (int i = 0; i < samples_per_state; ++i) da[static_cast<size_t>(i)] = kernel.sample(x, rng);
    for (int i = 0; i < samples_per_state; ++i) db[static_cast<size_t>(i)] = kernel.sample(y, rng);
    worst = std::max(worst, w2_1d(da, db) / std::abs(y - x));
  }
  return worst;
}

Prop1Bound prop1_bound(const BoundParams& params) {
  params.validate();
  const double L = params.L;
  const double eps = params.epsilon;
  const double t = static_cast<double>(params.t);
  Prop1Bound b;
  if (std::abs(L - 1.0) < 1e-12) {
    b.geometric = t * eps;
    b.continuous = t * eps;
    return b;
  }
  b.geometric = eps * (std::pow(L, t) - 1.0) / (L - 1.0);
  // Lambda = ln L / dt, T = t dt, eps_bar = eps / dt; the dt factors cancel
  b.continuous = eps * (std::pow(L, t) - 1.0) / std::log(L);
  if (L > 1.0 && b.geometric > b.continuous * (1.0 + 1e-12))
    throw std::logic_error("prop1: geometric bound exceeded continuous bound");
  return b;
}

Prop1Report verify_prop1(const MarkovKernel1D& kernel, const MarkovKernel1D& surrogate, double x0,
                         int horizon, int n_samples, double L, double epsilon, double mc_tol,
                         Rng& rng) {
  if (horizon < 1) throw std::invalid_argument("verify_prop1: horizon must be >= 1");
  Prop1Report report;
  report.L = L;
  report.epsilon = epsilon;
  std::vector<double> xs(static_cast<size_t>(n_samples), x0);
  std::vector<double> ys(static_cast<size_t>(n_samples), x0);
  report.min_margin = std::numeric_limits<double>::infinity();
  report.passed = true;
  for (int t = 1; t <= horizon; ++t) {
    for (double& v : xs) v = kernel.sample(v, rng);
    for (double& v : ys) v = surrogate.sample(v, rng);
    const double e_hat = w2_1d(xs, ys);
    BoundParams bp;
    bp.L = L;
    bp.epsilon = epsilon;
    bp.t = t;
    const double bound = prop1_bound(bp).geometric;
    report.e_hat.push_back(e_hat);
    report.bound.push_back(bound);
    const double margin = bound + mc_tol - e_hat;
    report.min_margin = std::min(report.min_margin, margin);
    if (margin < 0.0) report.passed = false;
  }
  return report;
}

void GaussianPriorModel::validate() const {
  if (mean.size() == 0 || cov.rows() != mean.size() || cov.cols() != mean.size())
    throw std::invalid_argument("gaussian prior: shape mismatch");
  if (!(noise_var > 0.0)) throw std::invalid_argument("gaussian prior: noise_var must be > 0");
  if (!cov.isApprox(cov.transpose(), 1e-10))
    throw std::invalid_argument("gaussian prior: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.eigenvalues().minCoeff() < -1e-10)
    throw std::invalid_argument("gaussian prior: covariance not PSD");
}

namespace {

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

void check_sensors(const GaussianPriorModel& prior, const std::vector<int>& sensors) {
  for (int s : sensors)
    if (s < 0 || s >= prior.mean.size())
      throw std::invalid_argument("gaussian posterior: sensor index out of range");
}

}  // namespace

GaussianPosterior gaussian_posterior(const GaussianPriorModel& prior,
                                     const std::vector<int>& sensors,
                                     const Eigen::VectorXd& observations) {
  check_sensors(prior, sensors);
  if (observations.size() != static_cast<Eigen::Index>(sensors.size()))
    throw std::invalid_argument("gaussian posterior: observation count mismatch");
  GaussianPosterior post;
  if (sensors.empty()) {
    post.mean = prior.mean;
    post.cov = prior.cov;
    return post;
  }
  const Eigen::MatrixXd cross = select_rows(prior.cov, sensors).transpose();  // N x s
  Eigen::MatrixXd gram = select_rows(cross, sensors);                         // s x s, M Sigma M^T
  gram.diagonal().array() += prior.noise_var;
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("gaussian posterior: update factorization failed");
  Eigen::VectorXd innov = observations;
  for (size_t i = 0; i < sensors.size(); ++i)
    innov(static_cast<Eigen::Index>(i)) -= prior.mean(sensors[i]);
  post.mean = prior.mean + cross * llt.solve(innov);
  post.cov = prior.cov - cross * llt.solve(cross.transpose());
  return post;
}

MonotoneReport verify_monotone_reduction(const GaussianPriorModel& prior,
                                         const std::vector<int>& sensor_sequence) {
  prior.validate();
  check_sensors(prior, sensor_sequence);
  MonotoneReport report;
  report.trace_monotone = true;
  report.bounds_hold = true;

  GaussianPriorModel current = prior;
  report.traces.push_back(current.cov.trace());
  const Eigen::VectorXd zero_obs = Eigen::VectorXd::Zero(1);
  for (int s : sensor_sequence) {
    const double v2 = current.cov(s, s);
    const double lower = v2 * v2 / (prior.noise_var + v2);
    const GaussianPosterior post = gaussian_posterior(current, {s}, zero_obs);
    const double delta = current.cov.trace() - post.cov.trace();
    report.deltas.push_back(delta);
    report.lower_bounds.push_back(lower);
    report.traces.push_back(post.cov.trace());
    if (delta < -1e-10) report.trace_monotone = false;
    if (delta + 1e-10 < lower) report.bounds_hold = false;
    current.cov = post.cov;
    current.mean = post.mean;
  }
  report.passed = report.trace_monotone && report.bounds_hold;
  return report;
}

FirstStepReport verify_uncertainty_placement_first_step(const GaussianPriorModel& prior) {
  prior.validate();
  FirstStepReport report;
  const int n = static_cast<int>(prior.mean.size());
  const Eigen::VectorXd zero_obs = Eigen::VectorXd::Zero(1);
  double best_u = -1.0, best_bound = -1.0, best_delta = -1.0;
  for (int i = 0; i < n; ++i) {
    const double v2 = prior.cov(i, i);
    const double bound = v2 * v2 / (prior.noise_var + v2);
    const double delta = prior.cov.trace() - gaussian_posterior(prior, {i}, zero_obs).cov.trace();
    report.bounds.push_back(bound);
    report.realized_delta.push_back(delta);
    if (std::sqrt(v2) > best_u) {
      best_u = std::sqrt(v2);
      report.argmax_u = i;
    }
    if (bound > best_bound) {
      best_bound = bound;
      report.argmax_bound = i;
    }
    if (delta > best_delta) {
      best_delta = delta;
      report.argmax_delta = i;
    }
  }
  report.bound_argmax_matches_u = report.argmax_bound == report.argmax_u;
  return report;
}

MseCheck mc_posterior_mse(const GaussianPriorModel& prior, const std::vector<int>& sensors,
                          int n_trials, Rng& rng) {
  prior.validate();
  check_sensors(prior, sensors);
  const int n = static_cast<int>(prior.mean.size());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(prior.cov);
  const Eigen::MatrixXd sqrt_cov =
      es.eigenvectors() *
      es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
      es.eigenvectors().transpose();
  const double noise_std = std::sqrt(prior.noise_var);

  long double acc = 0.0L, acc2 = 0.0L;
  Eigen::VectorXd z(n), y(static_cast<Eigen::Index>(sensors.size()));
  for (int trial = 0; trial < n_trials; ++trial) {
    for (int i = 0; i < n; ++i) z(i) = rng.normal();
    const Eigen::VectorXd x0 = prior.mean + sqrt_cov * z;
    for (size_t s = 0; s < sensors.size(); ++s)
      y(static_cast<Eigen::Index>(s)) = x0(sensors[s]) + noise_std * rng.normal();
    const GaussianPosterior post = gaussian_posterior(prior, sensors, y);
    const double err = (x0 - post.mean).squaredNorm();
    acc += err;
    acc2 += static_cast<long double>(err) * err;
  }
  MseCheck check;
  check.mc_mse = static_cast<double>(acc / n_trials);
  const double var = static_cast<double>(acc2 / n_trials) - check.mc_mse * check.mc_mse;
  check.std_error = std::sqrt(std::max(var, 0.0) / n_trials);
  check.trace = gaussian_posterior(prior, sensors, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sensors.size()))).cov.trace();
  check.within_3se = std::abs(check.mc_mse - check.trace) <= 3.0 * check.std_error;
  return check;
}

}  // namespace flowcast
