#include "datagen.hpp"

#include <fftw3.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "runtime.hpp"

namespace flowcast {

namespace {

constexpr double kPi = 3.14159265358979323846;

// The fftw planner is not thread-safe; plan creation/destruction serializes.
std::mutex& fftw_planner_mutex() {
  static std::mutex mu;
  return mu;
}

// Runs work(r) for r in [0, n); trajectories fork their own rng streams, so
// any thread count produces identical data. Exceptions are rethrown.
void parallel_trajectories(int n, const std::function<void(int)>& work) {
  const int threads = std::min(max_threads(), n);
  if (threads <= 1) {
    for (int r = 0; r < n; ++r) work(r);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const int r = next.fetch_add(1);
        if (r >= n) return;
        try {
          work(r);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

void normalize_dataset(TrajectoryDataset& ds) {
  const int c = ds.num_channels;
  ds.channel_mean.assign(static_cast<size_t>(c), 0.0);
  ds.channel_std.assign(static_cast<size_t>(c), 1.0);
  std::vector<long double> s(static_cast<size_t>(c), 0.0L), s2(static_cast<size_t>(c), 0.0L);
  std::int64_t count = 0;
  for (const auto& traj : ds.trajectories)
    for (const auto& state : traj) {
      for (size_t i = 0; i < state.size(); ++i) {
        const size_t ch = i % static_cast<size_t>(c);
        s[ch] += state[i];
        s2[ch] += static_cast<long double>(state[i]) * state[i];
      }
      count += static_cast<std::int64_t>(state.size()) / c;
    }
  for (int ch = 0; ch < c; ++ch) {
    const double mean = static_cast<double>(s[static_cast<size_t>(ch)] / count);
    const double var = static_cast<double>(s2[static_cast<size_t>(ch)] / count) - mean * mean;
    ds.channel_mean[static_cast<size_t>(ch)] = mean;
    ds.channel_std[static_cast<size_t>(ch)] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  for (auto& traj : ds.trajectories)
    for (auto& state : traj)
      for (size_t i = 0; i < state.size(); ++i) {
        const size_t ch = i % static_cast<size_t>(c);
        state[i] = (state[i] - ds.channel_mean[ch]) / ds.channel_std[ch];
      }
}

}  // namespace

void TrajectoryDataset::validate() const {
  topology.validate();
  if (num_channels < 1) throw std::invalid_argument("dataset: num_channels must be >= 1");
  if (channel_mean.size() != static_cast<size_t>(num_channels) ||
      channel_std.size() != static_cast<size_t>(num_channels))
    throw std::invalid_argument("dataset: stats size mismatch");
  const size_t state_len = static_cast<size_t>(topology.num_nodes) * num_channels;
  for (const auto& traj : trajectories)
    for (const auto& state : traj)
      if (state.size() != state_len) throw std::invalid_argument("dataset: state size mismatch");
}

// ---- kernel zoo -------------------------------------------------------------

MarkovKernel1D kernel_rademacher() {
  MarkovKernel1D k;
  k.name = "rademacher";
  k.sample = [](double, Rng& rng) { return rng.uniform() < 0.5 ? -1.0 : 1.0; };
  k.has_moments = true;
  k.cond_mean = [](double) { return 0.0; };
  k.cond_std = [](double) { return 1.0; };
  return k;
}

MarkovKernel1D kernel_affine_gaussian(double a, double b, double s) {
  if (s < 0.0) throw std::invalid_argument("affine_gaussian: s must be >= 0");
  MarkovKernel1D k;
  char buf[96];
  std::snprintf(buf, sizeof(buf), "affine_gaussian(%g,%g,%g)", a, b, s);
  k.name = buf;
  k.sample = [a, b, s](double x, Rng& rng) { return a * x + b + s * rng.normal(); };
  k.has_moments = true;
  k.cond_mean = [a, b](double x) { return a * x + b; };
  k.cond_std = [s](double) { return s; };
  return k;
}

MarkovKernel1D kernel_bimodal_drift() {
  MarkovKernel1D k;
  k.name = "bimodal_drift";
  k.sample = [](double x, Rng& rng) {
    const double mode = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return 0.5 * x + mode + 0.1 * rng.normal();
  };
  k.has_moments = true;
  k.cond_mean = [](double x) { return 0.5 * x; };
  k.cond_std = [](double) { return std::sqrt(1.01); };
  return k;
}

MarkovKernel1D kernel_deterministic_logistic(double r) {
  MarkovKernel1D k;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "deterministic_logistic(%g)", r);
  k.name = buf;
  k.sample = [r](double x, Rng&) { return r * x * (1.0 - x); };
  k.has_moments = true;
  k.cond_mean = [r](double x) { return r * x * (1.0 - x); };
  k.cond_std = [](double) { return 0.0; };
  return k;
}

MarkovKernel1D kernel_zoo(const std::string& name) {
  if (name == "rademacher") return kernel_rademacher();
  if (name == "bimodal_drift") return kernel_bimodal_drift();
  double a = 0.0, b = 0.0, s = 0.0;
  if (std::sscanf(name.c_str(), "affine_gaussian(%lf,%lf,%lf)", &a, &b, &s) == 3)
    return kernel_affine_gaussian(a, b, s);
  if (std::sscanf(name.c_str(), "deterministic_logistic(%lf)", &a) == 1)
    return kernel_deterministic_logistic(a);
  throw std::invalid_argument("kernel_zoo: unknown kernel '" + name + "'");
}

// ---- Kuramoto-Sivashinsky ----------------------------------------------------

namespace {

// ETDRK4 exponential integrator on the KS spectrum (Kassam-Trefethen style
// contour evaluation of the phi functions).
class KsIntegrator {
 public:
  KsIntegrator(int n, double domain, double h) : n_(n), h_(h) {
    q_.resize(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) {
      const int idx = k <= n / 2 ? k : k - n;
      q_[static_cast<size_t>(k)] = 2.0 * kPi * idx / domain;
    }
    e_.resize(static_cast<size_t>(n));
    e2_.resize(static_cast<size_t>(n));
    qc_.resize(static_cast<size_t>(n));
    f1_.resize(static_cast<size_t>(n));
    f2_.resize(static_cast<size_t>(n));
    f3_.resize(static_cast<size_t>(n));
    const int m = 32;
    for (int k = 0; k < n; ++k) {
      const double q = q_[static_cast<size_t>(k)];
      const double lin = q * q - q * q * q * q;
      e_[static_cast<size_t>(k)] = std::exp(h * lin);
      e2_[static_cast<size_t>(k)] = std::exp(0.5 * h * lin);
      std::complex<double> cq = 0.0, c1 = 0.0, c2 = 0.0, c3 = 0.0;
      for (int j = 0; j < m; ++j) {
        const std::complex<double> r = std::polar(1.0, kPi * (j + 0.5) / m);
        const std::complex<double> z = h * lin + r;
        const std::complex<double> ez = std::exp(z);
        const std::complex<double> z2 = z * z, z3 = z2 * z;
        cq += (std::exp(0.5 * z) - 1.0) / z;
        c1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z2)) / z3;
        c2 += (2.0 + z + ez * (-2.0 + z)) / z3;
        c3 += (-4.0 - 3.0 * z - z2 + ez * (4.0 - z)) / z3;
      }
      // conjugate-symmetric contour: means are real
      qc_[static_cast<size_t>(k)] = h * cq.real() / m;
      f1_[static_cast<size_t>(k)] = h * c1.real() / m;
      f2_[static_cast<size_t>(k)] = h * c2.real() / m;
      f3_[static_cast<size_t>(k)] = h * c3.real() / m;
    }
    std::lock_guard<std::mutex> lk(fftw_planner_mutex());
    buf_a_ = fftw_alloc_complex(static_cast<size_t>(n));
    buf_b_ = fftw_alloc_complex(static_cast<size_t>(n));
    fwd_ = fftw_plan_dft_1d(n, buf_a_, buf_b_, FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft_1d(n, buf_a_, buf_b_, FFTW_BACKWARD, FFTW_ESTIMATE);
  }

  ~KsIntegrator() {
    std::lock_guard<std::mutex> lk(fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
    fftw_free(buf_a_);
    fftw_free(buf_b_);
  }

  KsIntegrator(const KsIntegrator&) = delete;
  KsIntegrator& operator=(const KsIntegrator&) = delete;

  std::vector<std::complex<double>> to_spectrum(const std::vector<double>& u) {
    for (int i = 0; i < n_; ++i) {
      buf_a_[i][0] = u[static_cast<size_t>(i)];
      buf_a_[i][1] = 0.0;
    }
    fftw_execute(fwd_);
    std::vector<std::complex<double>> v(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) v[static_cast<size_t>(i)] = {buf_b_[i][0], buf_b_[i][1]};
    return v;
  }

  std::vector<double> to_field(const std::vector<std::complex<double>>& v) {
    for (int i = 0; i < n_; ++i) {
      buf_a_[i][0] = v[static_cast<size_t>(i)].real();
      buf_a_[i][1] = v[static_cast<size_t>(i)].imag();
    }
    fftw_execute(bwd_);
    std::vector<double> u(static_cast<size_t>(n_));
    for (int i = 0; i < n_; ++i) u[static_cast<size_t>(i)] = buf_b_[i][0] / n_;
    return u;
  }

  void step(std::vector<std::complex<double>>& v) {
    const auto nv = nonlinear(v);
    std::vector<std::complex<double>> a(static_cast<size_t>(n_)), b(static_cast<size_t>(n_)),
        c(static_cast<size_t>(n_));
    for (int k = 0; k < n_; ++k)
      a[static_cast<size_t>(k)] =
          e2_[static_cast<size_t>(k)] * v[static_cast<size_t>(k)] +
          qc_[static_cast<size_t>(k)] * nv[static_cast<size_t>(k)];
    const auto na = nonlinear(a);
    for (int k = 0; k < n_; ++k)
      b[static_cast<size_t>(k)] =
          e2_[static_cast<size_t>(k)] * v[static_cast<size_t>(k)] +
          qc_[static_cast<size_t>(k)] * na[static_cast<size_t>(k)];
    const auto nb = nonlinear(b);
    for (int k = 0; k < n_; ++k)
      c[static_cast<size_t>(k)] =
          e2_[static_cast<size_t>(k)] * a[static_cast<size_t>(k)] +
          qc_[static_cast<size_t>(k)] *
              (2.0 * nb[static_cast<size_t>(k)] - nv[static_cast<size_t>(k)]);
    const auto nc = nonlinear(c);
    for (int k = 0; k < n_; ++k)
      v[static_cast<size_t>(k)] =
          e_[static_cast<size_t>(k)] * v[static_cast<size_t>(k)] +
          nv[static_cast<size_t>(k)] * f1_[static_cast<size_t>(k)] +
          2.0 * (na[static_cast<size_t>(k)] + nb[static_cast<size_t>(k)]) *
              f2_[static_cast<size_t>(k)] +
          nc[static_cast<size_t>(k)] * f3_[static_cast<size_t>(k)];
  }

 private:
  std::vector<std::complex<double>> nonlinear(const std::vector<std::complex<double>>& v) {
    auto u = to_field(v);
    for (double& x : u) x *= x;
    auto w = to_spectrum(u);
    for (int k = 0; k < n_; ++k) {
      // -u u_x = -(u^2)_x / 2, with 2/3-rule dealiasing
      const double q = q_[static_cast<size_t>(k)];
      const int idx = k <= n_ / 2 ? k : k - n_;
      if (std::abs(idx) > n_ / 3)
        w[static_cast<size_t>(k)] = 0.0;
      else
        w[static_cast<size_t>(k)] *= std::complex<double>(0.0, -0.5 * q);
    }
    return w;
  }

  int n_;
  double h_;
  std::vector<double> q_, e_, e2_, qc_, f1_, f2_, f3_;
  fftw_complex* buf_a_;
  fftw_complex* buf_b_;
  fftw_plan fwd_, bwd_;
};

MeshGraph ring_topology(int n, double domain, int channels) {
  MeshGraph g;
  g.num_nodes = n;
  g.dim = 2;
  g.num_channels = channels;
  const double radius = domain / (2.0 * kPi);
  g.positions.resize(static_cast<size_t>(n) * 2);
  for (int i = 0; i < n; ++i) {
    const double theta = 2.0 * kPi * i / n;
    g.positions[static_cast<size_t>(i) * 2] = radius * std::cos(theta);
    g.positions[static_cast<size_t>(i) * 2 + 1] = radius * std::sin(theta);
  }
  g.features.assign(static_cast<size_t>(n) * channels, 0.0);
  g.boundary.assign(static_cast<size_t>(n), 0);
  // 5-point stencil: neighbors at offsets 1 and 2 around the ring
  for (int i = 0; i < n; ++i)
    for (int off : {-2, -1, 1, 2}) {
      g.edge_src.push_back(((i + off) % n + n) % n);
      g.edge_dst.push_back(i);
    }
  g.rebuild_edge_attr();
  return g;
}

}  // namespace

TrajectoryDataset chaotic_pde_trajectories(int grid_points, double dt_snapshot, int n_steps,
                                           int n_trajectories, std::uint64_t seed, double domain,
                                           double init_amplitude, double transient) {
  if (grid_points < 32) throw std::invalid_argument("chaotic_pde: grid_points must be >= 32");
  if (!(dt_snapshot > 0.0)) throw std::invalid_argument("chaotic_pde: dt_snapshot must be > 0");
  if (n_steps < 1 || n_trajectories < 1)
    throw std::invalid_argument("chaotic_pde: need at least one step and trajectory");

  const int n_sub = std::max(1, static_cast<int>(std::ceil(dt_snapshot / 0.05)));
  const double h = dt_snapshot / n_sub;

  TrajectoryDataset ds;
  ds.topology = ring_topology(grid_points, domain, 1);
  ds.num_channels = 1;
  ds.dt_snapshot = dt_snapshot;
  ds.trajectories.resize(static_cast<size_t>(n_trajectories));

  Rng root(seed);
  parallel_trajectories(n_trajectories, [&](int r) {
    Rng rng = root.fork(static_cast<std::uint64_t>(r) + 1);
    KsIntegrator integ(grid_points, domain, h);
    std::vector<double> u(static_cast<size_t>(grid_points), 0.0);
    for (int mode = 1; mode <= 4; ++mode) {
      const double amp = init_amplitude * rng.uniform(-1.0, 1.0);
      const double phase = rng.uniform(0.0, 2.0 * kPi);
      for (int i = 0; i < grid_points; ++i)
        u[static_cast<size_t>(i)] += amp * std::cos(2.0 * kPi * mode * i / grid_points + phase);
    }
    auto v = integ.to_spectrum(u);
    const int burn = static_cast<int>(std::ceil(transient / h));
    for (int s = 0; s < burn; ++s) integ.step(v);

    std::vector<std::vector<double>> traj;
    traj.reserve(static_cast<size_t>(n_steps));
    traj.push_back(integ.to_field(v));
    for (int t = 1; t < n_steps; ++t) {
      for (int s = 0; s < n_sub; ++s) integ.step(v);
      auto field = integ.to_field(v);
      for (double x : field)
        if (!std::isfinite(x) || std::abs(x) > 1e3)
          throw std::runtime_error("chaotic_pde: integrator blow-up");
      traj.push_back(std::move(field));
    }
    ds.trajectories[static_cast<size_t>(r)] = std::move(traj);
  });
  normalize_dataset(ds);
  return ds;
}

// ---- unstructured mesh dynamics ---------------------------------------------

namespace {

// rectangle [0,2]x[0,1] with the step cutout [1.4,2]x[0,0.4] removed
constexpr double kCutX = 1.4, kCutY = 0.4;

bool in_domain(double x, double y) {
  if (x < 0.0 || x > 2.0 || y < 0.0 || y > 1.0) return false;
  return !(x > kCutX && y < kCutY);
}

double dist_to_cutout(double x, double y) {
  const double dx = std::max(kCutX - x, 0.0);
  const double dy = std::max(y - kCutY, 0.0);
  if (x >= kCutX && y <= kCutY) return 0.0;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

TrajectoryDataset mesh_dynamics(int n_nodes, int n_steps, int n_trajectories,
                                std::uint64_t seed) {
  if (n_nodes < 50) throw std::invalid_argument("mesh_dynamics: n_nodes must be >= 50");
  if (n_steps < 1 || n_trajectories < 1)
    throw std::invalid_argument("mesh_dynamics: need at least one step and trajectory");

  Rng geo(seed);
  MeshGraph g;
  g.num_nodes = n_nodes;
  g.dim = 2;
  g.num_channels = 1;
  g.positions.resize(static_cast<size_t>(n_nodes) * 2);
  const double wall = 0.05;
  for (int i = 0; i < n_nodes; ++i) {
    double x = 0.0, y = 0.0;
    do {
      x = geo.uniform(0.0, 2.0);
      y = geo.uniform(0.0, 1.0);
    } while (!in_domain(x, y));
    g.positions[static_cast<size_t>(i) * 2] = x;
    g.positions[static_cast<size_t>(i) * 2 + 1] = y;
  }
  g.features.assign(static_cast<size_t>(n_nodes), 0.0);
  g.boundary.resize(static_cast<size_t>(n_nodes));
  for (int i = 0; i < n_nodes; ++i) {
    const double x = g.positions[static_cast<size_t>(i) * 2];
    const double y = g.positions[static_cast<size_t>(i) * 2 + 1];
    const bool near_wall = x < wall || x > 2.0 - wall || y < wall || y > 1.0 - wall ||
                           dist_to_cutout(x, y) < wall;
    g.boundary[static_cast<size_t>(i)] = near_wall ? 1 : 0;
  }

  const double area = 2.0 * 1.0 - (2.0 - kCutX) * kCutY;
  double radius = 1.7 * std::sqrt(area / n_nodes);
  for (int attempt = 0;; ++attempt) {
    auto [src, dst] = build_radius_edges(g.positions, n_nodes, 2, radius);
    g.edge_src = std::move(src);
    g.edge_dst = std::move(dst);
    g.rebuild_edge_attr();
    if (is_connected(g)) break;
    if (attempt >= 5) throw std::runtime_error("mesh_dynamics: could not connect graph");
    radius *= 1.3;
  }

  // neighbor weights for diffusion and upstream advection
  const int ne = g.num_edges();
  std::vector<double> wdiff(static_cast<size_t>(ne)), wup(static_cast<size_t>(ne));
  std::vector<double> speed(static_cast<size_t>(n_nodes)), hloc(static_cast<size_t>(n_nodes), 0.0);
  std::vector<int> deg(static_cast<size_t>(n_nodes), 0);
  for (int e = 0; e < ne; ++e) {
    const int dst = g.edge_dst[static_cast<size_t>(e)];
    const double len = g.edge_attr[static_cast<size_t>(e) * 3 + 2];
    hloc[static_cast<size_t>(dst)] += len;
    ++deg[static_cast<size_t>(dst)];
  }
  for (int i = 0; i < n_nodes; ++i)
    hloc[static_cast<size_t>(i)] = deg[static_cast<size_t>(i)] > 0
                                       ? hloc[static_cast<size_t>(i)] / deg[static_cast<size_t>(i)]
                                       : 1.0;
  std::vector<double> vel(static_cast<size_t>(n_nodes) * 2);
  for (int i = 0; i < n_nodes; ++i) {
    const double x = g.positions[static_cast<size_t>(i) * 2];
    const double y = g.positions[static_cast<size_t>(i) * 2 + 1];
    // slow rotation about the domain center keeps mass circulating
    vel[static_cast<size_t>(i) * 2] = -0.4 * (y - 0.5);
    vel[static_cast<size_t>(i) * 2 + 1] = 0.4 * (x - 1.0);
    speed[static_cast<size_t>(i)] = std::hypot(vel[static_cast<size_t>(i) * 2],
                                               vel[static_cast<size_t>(i) * 2 + 1]);
  }
  for (int e = 0; e < ne; ++e) {
    const int s = g.edge_src[static_cast<size_t>(e)];
    const int d = g.edge_dst[static_cast<size_t>(e)];
    const double len = g.edge_attr[static_cast<size_t>(e) * 3 + 2];
    wdiff[static_cast<size_t>(e)] = 1.0 / std::max(len, 1e-9);
    // edge carries flow into d when the relative direction aligns with v(d)
    const double ex = g.positions[static_cast<size_t>(d) * 2] - g.positions[static_cast<size_t>(s) * 2];
    const double ey =
        g.positions[static_cast<size_t>(d) * 2 + 1] - g.positions[static_cast<size_t>(s) * 2 + 1];
    const double sp = speed[static_cast<size_t>(d)];
    const double align =
        sp > 1e-12 ? (ex * vel[static_cast<size_t>(d) * 2] + ey * vel[static_cast<size_t>(d) * 2 + 1]) /
                         (std::max(len, 1e-9) * sp)
                   : 0.0;
    wup[static_cast<size_t>(e)] = std::max(0.0, align) / std::max(len, 1e-9);
  }

  const double hot_x = 1.32, hot_y = 0.48, hot_w = 0.12;
  std::vector<double> bump(static_cast<size_t>(n_nodes));
  for (int i = 0; i < n_nodes; ++i) {
    const double dx = g.positions[static_cast<size_t>(i) * 2] - hot_x;
    const double dy = g.positions[static_cast<size_t>(i) * 2 + 1] - hot_y;
    bump[static_cast<size_t>(i)] = std::exp(-(dx * dx + dy * dy) / (2.0 * hot_w * hot_w));
  }

  TrajectoryDataset ds;
  ds.topology = g;
  ds.num_channels = 1;
  ds.dt_snapshot = 1.0;

  const double alpha = 0.35, damp = 0.04, ar_rho = 0.9, ar_sig = 0.5;
  ds.trajectories.resize(static_cast<size_t>(n_trajectories));
  Rng root(seed ^ 0x5bd1e995u);
  parallel_trajectories(n_trajectories, [&](int r) {
    Rng rng = root.fork(static_cast<std::uint64_t>(r) + 1);
    std::vector<double> u(static_cast<size_t>(n_nodes));
    for (int i = 0; i < n_nodes; ++i) {
      const double x = g.positions[static_cast<size_t>(i) * 2];
      const double y = g.positions[static_cast<size_t>(i) * 2 + 1];
      u[static_cast<size_t>(i)] = 0.5 * std::sin(2.0 * x + 1.0) * std::cos(3.0 * y) +
                                  0.2 * rng.normal();
    }
    double forcing = 0.0;
    std::vector<std::vector<double>> traj;
    std::vector<double> diff_acc(static_cast<size_t>(n_nodes)), up_acc(static_cast<size_t>(n_nodes)),
        diff_w(static_cast<size_t>(n_nodes)), up_w(static_cast<size_t>(n_nodes));
    const int burn = 50;
    for (int t = 0; t < burn + n_steps; ++t) {
      std::fill(diff_acc.begin(), diff_acc.end(), 0.0);
      std::fill(up_acc.begin(), up_acc.end(), 0.0);
      std::fill(diff_w.begin(), diff_w.end(), 0.0);
      std::fill(up_w.begin(), up_w.end(), 0.0);
      for (int e = 0; e < ne; ++e) {
        const int s = g.edge_src[static_cast<size_t>(e)];
        const int d = g.edge_dst[static_cast<size_t>(e)];
        diff_acc[static_cast<size_t>(d)] += wdiff[static_cast<size_t>(e)] * u[static_cast<size_t>(s)];
        diff_w[static_cast<size_t>(d)] += wdiff[static_cast<size_t>(e)];
        up_acc[static_cast<size_t>(d)] += wup[static_cast<size_t>(e)] * u[static_cast<size_t>(s)];
        up_w[static_cast<size_t>(d)] += wup[static_cast<size_t>(e)];
      }
      forcing = ar_rho * forcing + ar_sig * rng.normal();
      for (int i = 0; i < n_nodes; ++i) {
        const double nb_mean = diff_w[static_cast<size_t>(i)] > 0.0
                                   ? diff_acc[static_cast<size_t>(i)] / diff_w[static_cast<size_t>(i)]
                                   : u[static_cast<size_t>(i)];
        const double up_mean = up_w[static_cast<size_t>(i)] > 0.0
                                   ? up_acc[static_cast<size_t>(i)] / up_w[static_cast<size_t>(i)]
                                   : u[static_cast<size_t>(i)];
        const double beta =
            std::min(0.6, speed[static_cast<size_t>(i)] * ds.dt_snapshot / hloc[static_cast<size_t>(i)] * 0.5);
        double next = u[static_cast<size_t>(i)];
        next += alpha * (nb_mean - u[static_cast<size_t>(i)]);
        next += beta * (up_mean - u[static_cast<size_t>(i)]);
        next += forcing * bump[static_cast<size_t>(i)];
        next -= damp * u[static_cast<size_t>(i)];
        diff_acc[static_cast<size_t>(i)] = next;  // reuse as scratch for the new state
      }
      std::swap(u, diff_acc);
      for (double x : u)
        if (!std::isfinite(x)) throw std::runtime_error("mesh_dynamics: non-finite state");
      if (t >= burn) traj.push_back(u);
    }
    ds.trajectories[static_cast<size_t>(r)] = std::move(traj);
  });
  normalize_dataset(ds);
  return ds;
}

// ---- dataset IO ---------------------------------------------------------------

void write_dataset(const std::string& dir, const TrajectoryDataset& ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  write_mesh(dir + "/mesh.txt", ds.topology);

  std::FILE* f = std::fopen((dir + "/stats.txt").c_str(), "w");
  if (!f) throw std::runtime_error("cannot open for write: " + dir + "/stats.txt");
  std::fprintf(f, "flowcast-stats 1\n%d %.17g %d\n", ds.num_channels, ds.dt_snapshot,
               static_cast<int>(ds.trajectories.size()));
  for (int c = 0; c < ds.num_channels; ++c)
    std::fprintf(f, "%s%.17g", c ? " " : "", ds.channel_mean[static_cast<size_t>(c)]);
  std::fputc('\n', f);
  for (int c = 0; c < ds.num_channels; ++c)
    std::fprintf(f, "%s%.17g", c ? " " : "", ds.channel_std[static_cast<size_t>(c)]);
  std::fputc('\n', f);
  if (std::fclose(f) != 0) throw std::runtime_error("write failed: " + dir + "/stats.txt");

  for (size_t r = 0; r < ds.trajectories.size(); ++r) {
    const std::string path = dir + "/traj_" + std::to_string(r) + ".txt";
    std::FILE* tf = std::fopen(path.c_str(), "w");
    if (!tf) throw std::runtime_error("cannot open for write: " + path);
    std::fprintf(tf, "flowcast-traj 1\n%d %d %d\n", static_cast<int>(ds.trajectories[r].size()),
                 ds.topology.num_nodes, ds.num_channels);
    for (const auto& state : ds.trajectories[r]) {
      for (size_t i = 0; i < state.size(); ++i)
        std::fprintf(tf, "%s%.17g", i ? " " : "", state[i]);
      std::fputc('\n', tf);
    }
    if (std::fclose(tf) != 0) throw std::runtime_error("write failed: " + path);
  }
}

TrajectoryDataset read_dataset(const std::string& dir) {
  TrajectoryDataset ds;
  ds.topology = read_mesh(dir + "/mesh.txt");

  std::FILE* f = std::fopen((dir + "/stats.txt").c_str(), "r");
  if (!f) throw std::runtime_error("cannot open for read: " + dir + "/stats.txt");
  auto fail = [&](const char* why) {
    std::fclose(f);
    throw std::runtime_error(std::string("malformed stats file: ") + why);
  };
  char magic[32];
  int version = 0, n_traj = 0;
  if (std::fscanf(f, "%31s %d", magic, &version) != 2 || std::string(magic) != "flowcast-stats" ||
      version != 1)
    fail("bad header");
  if (std::fscanf(f, "%d %lf %d", &ds.num_channels, &ds.dt_snapshot, &n_traj) != 3 ||
      ds.num_channels < 1 || n_traj < 0)
    fail("bad dimensions");
  ds.channel_mean.resize(static_cast<size_t>(ds.num_channels));
  ds.channel_std.resize(static_cast<size_t>(ds.num_channels));
  for (double& v : ds.channel_mean)
    if (std::fscanf(f, "%lf", &v) != 1) fail("truncated means");
  for (double& v : ds.channel_std)
    if (std::fscanf(f, "%lf", &v) != 1) fail("truncated stds");
  std::fclose(f);

  for (int r = 0; r < n_traj; ++r) {
    const std::string path = dir + "/traj_" + std::to_string(r) + ".txt";
    std::FILE* tf = std::fopen(path.c_str(), "r");
    if (!tf) throw std::runtime_error("cannot open for read: " + path);
    auto tfail = [&](const char* why) {
      std::fclose(tf);
      throw std::runtime_error("malformed trajectory file " + path + ": " + why);
    };
    int tv = 0, n_states = 0, n_nodes = 0, n_channels = 0;
    if (std::fscanf(tf, "%31s %d", magic, &tv) != 2 || std::string(magic) != "flowcast-traj" ||
        tv != 1)
      tfail("bad header");
    if (std::fscanf(tf, "%d %d %d", &n_states, &n_nodes, &n_channels) != 3)
      tfail("bad dimensions");
    if (n_nodes != ds.topology.num_nodes || n_channels != ds.num_channels)
      tfail("topology mismatch");
    std::vector<std::vector<double>> traj(static_cast<size_t>(n_states));
    for (auto& state : traj) {
      state.resize(static_cast<size_t>(n_nodes) * n_channels);
      for (double& v : state)
        if (std::fscanf(tf, "%lf", &v) != 1) tfail("truncated state");
    }
    std::fclose(tf);
    ds.trajectories.push_back(std::move(traj));
  }
  ds.validate();
  return ds;
}

}  // namespace flowcast
