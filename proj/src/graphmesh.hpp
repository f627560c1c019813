#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace flowcast {

// Node state container on an unstructured mesh. Edges are directed; every
// undirected neighbor relation is stored as both directions. edge_attr row e
// holds [p_dst - p_src, |p_dst - p_src|], d+1 columns.
struct MeshGraph {
  int num_nodes = 0;
  int dim = 0;
  int num_channels = 0;
  std::vector<double> positions;       // num_nodes * dim, row-major
  std::vector<double> features;        // num_nodes * num_channels
  std::vector<int> edge_src;
  std::vector<int> edge_dst;
  std::vector<double> edge_attr;       // num_edges * (dim + 1)
  std::vector<std::uint8_t> boundary;  // 1 = boundary node

  int num_edges() const { return static_cast<int>(edge_src.size()); }
  void rebuild_edge_attr();
  void validate() const;
};

struct PoolingConfig {
  std::vector<double> voxel_sizes;  // strictly increasing, one per coarse level
  int knn_k = 3;
  double edge_radius_factor = std::sqrt(2.0) * 1.5;

  void validate() const;
};

// All directed edges (i,j), i != j, with |p_i - p_j| <= radius (inclusive).
// Pairs are emitted in ascending (src, dst) order.
std::pair<std::vector<int>, std::vector<int>> build_radius_edges(
    const std::vector<double>& positions, int num_nodes, int dim, double radius);

struct VoxelPoolResult {
  MeshGraph coarse;
  std::vector<int> assignment;  // fine node -> coarse cluster
};

// Clusters nodes by voxel cell floor(p/r); coarse positions/features are
// cluster means, coarse edges connect clusters within r * edge_radius_factor.
VoxelPoolResult voxel_pool(const MeshGraph& g, double r,
                           double edge_radius_factor = std::sqrt(2.0) * 1.5);

// Precomputed k-nearest-neighbor inverse-distance interpolation weights from
// a coarse node set onto a fine one. Weight rows are nonnegative and sum to 1;
// a fine node within 1e-12 of a coarse node copies that node exactly.
struct KnnInterp {
  int num_fine = 0;
  int k = 0;
  std::vector<int> index;      // num_fine * k coarse indices
  std::vector<double> weight;  // num_fine * k
};

KnnInterp build_knn_interp(const std::vector<double>& coarse_positions, int num_coarse,
                           const std::vector<double>& fine_positions, int num_fine, int dim,
                           int k);

// Differentiable application: fine_features = sum_k w * coarse_features[idx].
Tensor apply_knn_interp(const KnnInterp& interp, const Tensor& coarse_features);

Tensor knn_unpool(const Tensor& coarse_features, const std::vector<double>& coarse_positions,
                  const std::vector<double>& fine_positions, int dim, int k);

// Pool/unpool geometry for the U-shaped denoiser, built once per topology.
struct GraphHierarchy {
  struct Level {
    MeshGraph graph;
    std::vector<int> assignment;    // previous (finer) level node -> cluster
    std::vector<double> inv_count;  // 1/cluster_size, for differentiable mean pooling
    KnnInterp unpool;               // this level back onto the previous one
  };
  MeshGraph fine;
  std::vector<Level> coarse;
};

GraphHierarchy build_hierarchy(const MeshGraph& g, const PoolingConfig& cfg);

double median_edge_length(const MeshGraph& g);
bool is_connected(const MeshGraph& g);

// Plain-text mesh container; see README for the byte-level layout.
void write_mesh(const std::string& path, const MeshGraph& g);
MeshGraph read_mesh(const std::string& path);

}  // namespace flowcast
