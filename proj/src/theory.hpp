#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "rng.hpp"

namespace flowcast {

// One-dimensional stochastic transition kernel x' ~ T(.|x), with analytic
// conditional moments when the construction provides them.
struct MarkovKernel1D {
  std::string name;
  std::function<double(double, Rng&)> sample;
  bool has_moments = false;
  std::function<double(double)> cond_mean;
  std::function<double(double)> cond_std;
};

struct BoundParams {
  double L = 1.0;        // Wasserstein-Lipschitz constant
  double epsilon = 0.0;  // one-step mismatch
  double dt = 1.0;
  int t = 0;

  void validate() const;
};

struct Prop1Bound {
  double geometric;   // eps * (L^t - 1)/(L - 1), or t*eps at L = 1
  double continuous;  // (e^{Lambda T} - 1)/Lambda * eps_bar
};

// Exact W2 between two empirical 1-D distributions via the quantile coupling.
// Equal counts reduce to the RMS of sorted-sample differences.
double w2_1d(std::vector<double> a, std::vector<double> b);

// V̂*: max over probe states of the square root of the empirical conditional
// (population) variance.
double intrinsic_spread(const MarkovKernel1D& kernel, const std::vector<double>& probe_states,
                        int samples_per_state, Rng& rng);

// Empirical Wasserstein-Lipschitz constant: max over random state pairs of
// W2(T(.|x), T(.|x')) / |x - x'|.
double estimate_wasserstein_lipschitz(const MarkovKernel1D& kernel, double state_lo,
                                      double state_hi, int num_pairs, int samples_per_state,
                                      Rng& rng);

Prop1Bound prop1_bound(const BoundParams& params);

struct Prop1Report {
  std::vector<double> e_hat;  // empirical W2 per step, index 0 = t=1
  std::vector<double> bound;  // geometric bound per step
  double L = 0.0;
  double epsilon = 0.0;
  double min_margin = 0.0;  // min over t of bound + mc_tol - e_hat
  bool passed = false;
};

// Rolls n_samples trajectories of both kernels from x0 and checks
// Ê_t <= prop1_bound(t) + mc_tol for t = 1..horizon.
Prop1Report verify_prop1(const MarkovKernel1D& kernel, const MarkovKernel1D& surrogate, double x0,
                         int horizon, int n_samples, double L, double epsilon, double mc_tol,
                         Rng& rng);

struct GaussianPriorModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;     // symmetric PSD
  double noise_var = 1.0;  // sigma_eta^2 > 0

  void validate() const;
};

struct GaussianPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Exact conjugate update for y = M x + eta, M selecting `sensors` rows.
GaussianPosterior gaussian_posterior(const GaussianPriorModel& prior,
                                     const std::vector<int>& sensors,
                                     const Eigen::VectorXd& observations);

struct MonotoneReport {
  std::vector<double> traces;        // posterior trace after each nested prefix
  std::vector<double> deltas;        // trace drop when sensor i is added
  std::vector<double> lower_bounds;  // v_i^4/(noise_var + v_i^2) at addition time
  bool trace_monotone = false;
  bool bounds_hold = false;
  bool passed = false;
};

// Checks Tr(posterior cov) non-increasing along a nested sensor sequence and
// the per-sensor guarantee Delta_i >= v_i^4/(sigma_eta^2 + v_i^2).
MonotoneReport verify_monotone_reduction(const GaussianPriorModel& prior,
                                         const std::vector<int>& sensor_sequence);

struct FirstStepReport {
  std::vector<double> bounds;          // guaranteed reduction per candidate
  std::vector<double> realized_delta;  // actual trace drop per candidate
  int argmax_u = -1;                   // argmax prior std
  int argmax_bound = -1;
  int argmax_delta = -1;
  bool bound_argmax_matches_u = false;  // exact claim (holds by monotonicity)
};

FirstStepReport verify_uncertainty_placement_first_step(const GaussianPriorModel& prior);

struct MseCheck {
  double mc_mse = 0.0;
  double trace = 0.0;
  double std_error = 0.0;
  bool within_3se = false;
};

// Monte-Carlo E||x0 - posterior_mean||^2 against Tr(posterior cov).
MseCheck mc_posterior_mse(const GaussianPriorModel& prior, const std::vector<int>& sensors,
                          int n_trials, Rng& rng);

}  // namespace flowcast
