#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "graphmesh.hpp"
#include "theory.hpp"

namespace flowcast {

// Snapshots of one or more trajectories on a shared topology, stored
// normalized; stats invert the normalization exactly.
struct TrajectoryDataset {
  MeshGraph topology;
  int num_channels = 1;
  double dt_snapshot = 0.0;
  std::vector<double> channel_mean;  // per channel
  std::vector<double> channel_std;
  // trajectories[r][t] = state vector of num_nodes * num_channels values
  std::vector<std::vector<std::vector<double>>> trajectories;

  int num_nodes() const { return topology.num_nodes; }
  void validate() const;
};

// name ∈ {rademacher, affine_gaussian(a,b,s), bimodal_drift, deterministic_logistic(r)}
MarkovKernel1D kernel_zoo(const std::string& name);

MarkovKernel1D kernel_rademacher();
MarkovKernel1D kernel_affine_gaussian(double a, double b, double s);
MarkovKernel1D kernel_bimodal_drift();
MarkovKernel1D kernel_deterministic_logistic(double r);

// Kuramoto-Sivashinsky u_t = -u u_x - u_xx - u_xxxx on a periodic domain of
// length `domain`, integrated spectrally (ETDRK4), sampled every dt_snapshot
// after a transient. The periodic 1-D domain is embedded as a circle in 2-D so
// edge attributes stay consistent across the wrap.
TrajectoryDataset chaotic_pde_trajectories(int grid_points, double dt_snapshot, int n_steps,
                                           int n_trajectories, std::uint64_t seed,
                                           double domain = 64.0, double init_amplitude = 0.1,
                                           double transient = 150.0);

// Advection-diffusion field on random interior points of a rectangle with a
// step cutout, driven by an AR(1) hot spot near the step corner.
TrajectoryDataset mesh_dynamics(int n_nodes, int n_steps, int n_trajectories,
                                std::uint64_t seed);

// Dataset directory: mesh.txt, stats.txt, traj_<i>.txt. See README.
void write_dataset(const std::string& dir, const TrajectoryDataset& ds);
TrajectoryDataset read_dataset(const std::string& dir);

}  // namespace flowcast
