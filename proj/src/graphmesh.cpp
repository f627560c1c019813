#include "graphmesh.hpp"

#include <algorithm>
#include <array>
#include <cinttypes>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

namespace flowcast {

namespace {

double sq_dist(const double* a, const double* b, int dim) {
  double s = 0.0;
  for (int c = 0; c < dim; ++c) {
    const double d = a[c] - b[c];
    s += d * d;
  }
  return s;
}

using Cell = std::array<long long, 3>;

Cell cell_of(const double* p, int dim, double r) {
  Cell c = {0, 0, 0};
  for (int i = 0; i < dim; ++i) c[static_cast<size_t>(i)] = static_cast<long long>(std::floor(p[i] / r));
  return c;
}

}  // namespace

void MeshGraph::rebuild_edge_attr() {
  const int e = num_edges();
  edge_attr.assign(static_cast<size_t>(e) * (dim + 1), 0.0);
  for (int i = 0; i < e; ++i) {
    const double* ps = positions.data() + static_cast<size_t>(edge_src[static_cast<size_t>(i)]) * dim;
    const double* pd = positions.data() + static_cast<size_t>(edge_dst[static_cast<size_t>(i)]) * dim;
    double* row = edge_attr.data() + static_cast<size_t>(i) * (dim + 1);
    double s = 0.0;
    for (int c = 0; c < dim; ++c) {
      row[c] = pd[c] - ps[c];
      s += row[c] * row[c];
    }
    row[dim] = std::sqrt(s);
  }
}

void MeshGraph::validate() const {
  if (num_nodes <= 0) throw std::invalid_argument("mesh: empty graph");
  if (dim < 1 || dim > 3) throw std::invalid_argument("mesh: dim must be 1, 2, or 3");
  if (positions.size() != static_cast<size_t>(num_nodes) * dim)
    throw std::invalid_argument("mesh: positions size mismatch");
  if (features.size() != static_cast<size_t>(num_nodes) * num_channels)
    throw std::invalid_argument("mesh: features size mismatch");
  if (edge_src.size() != edge_dst.size()) throw std::invalid_argument("mesh: edge list mismatch");
  if (boundary.size() != static_cast<size_t>(num_nodes))
    throw std::invalid_argument("mesh: boundary mask size mismatch");
  for (double p : positions)
    if (!std::isfinite(p)) throw std::invalid_argument("mesh: non-finite position");
  for (size_t i = 0; i < edge_src.size(); ++i) {
    if (edge_src[i] < 0 || edge_src[i] >= num_nodes || edge_dst[i] < 0 || edge_dst[i] >= num_nodes)
      throw std::invalid_argument("mesh: edge endpoint out of range");
  }
  if (edge_attr.size() != static_cast<size_t>(num_edges()) * (dim + 1))
    throw std::invalid_argument("mesh: edge_attr size mismatch");
  MeshGraph probe;
  probe.num_nodes = num_nodes;
  probe.dim = dim;
  probe.positions = positions;
  probe.edge_src = edge_src;
  probe.edge_dst = edge_dst;
  probe.rebuild_edge_attr();
  if (probe.edge_attr != edge_attr)
    throw std::invalid_argument("mesh: edge_attr does not match relative positions");
}

void PoolingConfig::validate() const {
  if (knn_k < 1) throw std::invalid_argument("pooling: knn_k must be >= 1");
  if (!(edge_radius_factor > 0.0))
    throw std::invalid_argument("pooling: edge_radius_factor must be > 0");
  for (size_t i = 0; i < voxel_sizes.size(); ++i) {
    if (!(voxel_sizes[i] > 0.0)) throw std::invalid_argument("pooling: voxel sizes must be > 0");
    if (i > 0 && !(voxel_sizes[i] > voxel_sizes[i - 1]))
      throw std::invalid_argument("pooling: voxel sizes must be strictly increasing");
  }
}

std::pair<std::vector<int>, std::vector<int>> build_radius_edges(
    const std::vector<double>& positions, int num_nodes, int dim, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("build_radius_edges: radius must be > 0");
  std::map<Cell, std::vector<int>> grid;
  for (int i = 0; i < num_nodes; ++i)
    grid[cell_of(positions.data() + static_cast<size_t>(i) * dim, dim, radius)].push_back(i);

  const double r2 = radius * radius;
  std::vector<int> src, dst;
  std::vector<int> candidates;
  for (int i = 0; i < num_nodes; ++i) {
    const double* pi = positions.data() + static_cast<size_t>(i) * dim;
    const Cell base = cell_of(pi, dim, radius);
    candidates.clear();
    Cell probe = base;
    const int span1 = dim >= 2 ? 1 : 0;
    const int span2 = dim >= 3 ? 1 : 0;
    for (long long d0 = -1; d0 <= 1; ++d0)
      for (long long d1 = -span1; d1 <= span1; ++d1)
        for (long long d2 = -span2; d2 <= span2; ++d2) {
          probe = {base[0] + d0, base[1] + d1, base[2] + d2};
          auto it = grid.find(probe);
          if (it == grid.end()) continue;
          for (int j : it->second) {
            if (j == i) continue;
            if (sq_dist(pi, positions.data() + static_cast<size_t>(j) * dim, dim) <= r2)
              candidates.push_back(j);
          }
        }
    std::sort(candidates.begin(), candidates.end());
    for (int j : candidates) {
      src.push_back(i);
      dst.push_back(j);
    }
  }
  return {std::move(src), std::move(dst)};
}

VoxelPoolResult voxel_pool(const MeshGraph& g, double r, double edge_radius_factor) {
  if (g.num_nodes <= 0) throw std::invalid_argument("voxel_pool: empty graph");
  if (!(r > 0.0)) throw std::invalid_argument("voxel_pool: r must be > 0");

  // cluster ids in first-occurrence order for determinism
  std::map<Cell, int> cluster_of_cell;
  std::vector<int> assignment(static_cast<size_t>(g.num_nodes));
  int num_clusters = 0;
  for (int i = 0; i < g.num_nodes; ++i) {
    const Cell c = cell_of(g.positions.data() + static_cast<size_t>(i) * g.dim, g.dim, r);
    auto [it, fresh] = cluster_of_cell.try_emplace(c, num_clusters);
    if (fresh) ++num_clusters;
    assignment[static_cast<size_t>(i)] = it->second;
  }

  MeshGraph coarse;
  coarse.num_nodes = num_clusters;
  coarse.dim = g.dim;
  coarse.num_channels = g.num_channels;
  coarse.positions.assign(static_cast<size_t>(num_clusters) * g.dim, 0.0);
  coarse.features.assign(static_cast<size_t>(num_clusters) * g.num_channels, 0.0);
  coarse.boundary.assign(static_cast<size_t>(num_clusters), 0);
  std::vector<int> count(static_cast<size_t>(num_clusters), 0);
  for (int i = 0; i < g.num_nodes; ++i) {
    const int c = assignment[static_cast<size_t>(i)];
    ++count[static_cast<size_t>(c)];
    for (int k = 0; k < g.dim; ++k)
      coarse.positions[static_cast<size_t>(c) * g.dim + k] +=
          g.positions[static_cast<size_t>(i) * g.dim + k];
    for (int k = 0; k < g.num_channels; ++k)
      coarse.features[static_cast<size_t>(c) * g.num_channels + k] +=
          g.features[static_cast<size_t>(i) * g.num_channels + k];
    // a cluster touching the boundary is treated as boundary
    if (g.boundary[static_cast<size_t>(i)]) coarse.boundary[static_cast<size_t>(c)] = 1;
  }
  for (int c = 0; c < num_clusters; ++c) {
    const double inv = 1.0 / count[static_cast<size_t>(c)];
    for (int k = 0; k < g.dim; ++k) coarse.positions[static_cast<size_t>(c) * g.dim + k] *= inv;
    for (int k = 0; k < g.num_channels; ++k)
      coarse.features[static_cast<size_t>(c) * g.num_channels + k] *= inv;
  }

  auto [src, dst] = build_radius_edges(coarse.positions, num_clusters, g.dim, r * edge_radius_factor);
  coarse.edge_src = std::move(src);
  coarse.edge_dst = std::move(dst);
  coarse.rebuild_edge_attr();
  return {std::move(coarse), std::move(assignment)};
}

KnnInterp build_knn_interp(const std::vector<double>& coarse_positions, int num_coarse,
                           const std::vector<double>& fine_positions, int num_fine, int dim,
                           int k) {
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  if (k > num_coarse) throw std::invalid_argument("knn: fewer coarse nodes than k");

  KnnInterp interp;
  interp.num_fine = num_fine;
  interp.k = k;
  interp.index.resize(static_cast<size_t>(num_fine) * k);
  interp.weight.resize(static_cast<size_t>(num_fine) * k);

  std::vector<std::pair<double, int>> dists(static_cast<size_t>(num_coarse));
  for (int f = 0; f < num_fine; ++f) {
    const double* pf = fine_positions.data() + static_cast<size_t>(f) * dim;
    for (int c = 0; c < num_coarse; ++c)
      dists[static_cast<size_t>(c)] = {
          sq_dist(pf, coarse_positions.data() + static_cast<size_t>(c) * dim, dim), c};
    std::partial_sort(dists.begin(), dists.begin() + k, dists.end());

    int* idx = interp.index.data() + static_cast<size_t>(f) * k;
    double* w = interp.weight.data() + static_cast<size_t>(f) * k;
    const double nearest = std::sqrt(dists[0].first);
    if (nearest < 1e-12) {
      // coincident node: copy it exactly
      for (int j = 0; j < k; ++j) {
        idx[j] = dists[static_cast<size_t>(j)].second;
        w[j] = j == 0 ? 1.0 : 0.0;
      }
      continue;
    }
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      idx[j] = dists[static_cast<size_t>(j)].second;
      w[j] = 1.0 / std::sqrt(dists[static_cast<size_t>(j)].first);
      total += w[j];
    }
    for (int j = 0; j < k; ++j) w[j] /= total;
  }
  return interp;
}

Tensor apply_knn_interp(const KnnInterp& interp, const Tensor& coarse_features) {
  std::vector<int> seg(interp.index.size());
  for (size_t i = 0; i < seg.size(); ++i) seg[i] = static_cast<int>(i) / interp.k;
  Tensor gathered = gather_rows(coarse_features, interp.index);
  Tensor weighted = mul_rowscale(gathered, Tensor::from_data({static_cast<int>(interp.weight.size())},
                                                             interp.weight));
  return segment_sum(weighted, seg, interp.num_fine);
}

Tensor knn_unpool(const Tensor& coarse_features, const std::vector<double>& coarse_positions,
                  const std::vector<double>& fine_positions, int dim, int k) {
  const int num_coarse = static_cast<int>(coarse_positions.size()) / dim;
  const int num_fine = static_cast<int>(fine_positions.size()) / dim;
  return apply_knn_interp(
      build_knn_interp(coarse_positions, num_coarse, fine_positions, num_fine, dim, k),
      coarse_features);
}

GraphHierarchy build_hierarchy(const MeshGraph& g, const PoolingConfig& cfg) {
  cfg.validate();
  GraphHierarchy h;
  h.fine = g;
  const MeshGraph* prev = &h.fine;
  for (double r : cfg.voxel_sizes) {
    auto [coarse, assignment] = voxel_pool(*prev, r, cfg.edge_radius_factor);
    GraphHierarchy::Level level;
    level.assignment = std::move(assignment);
    level.inv_count.assign(static_cast<size_t>(coarse.num_nodes), 0.0);
    for (int a : level.assignment) level.inv_count[static_cast<size_t>(a)] += 1.0;
    for (double& v : level.inv_count) v = 1.0 / v;
    level.unpool = build_knn_interp(coarse.positions, coarse.num_nodes, prev->positions,
                                    prev->num_nodes, g.dim,
                                    std::min(cfg.knn_k, coarse.num_nodes));
    level.graph = std::move(coarse);
    h.coarse.push_back(std::move(level));
    prev = &h.coarse.back().graph;
  }
  return h;
}

double median_edge_length(const MeshGraph& g) {
  if (g.num_edges() == 0) throw std::invalid_argument("median_edge_length: no edges");
  std::vector<double> lens(static_cast<size_t>(g.num_edges()));
  for (int e = 0; e < g.num_edges(); ++e)
    lens[static_cast<size_t>(e)] = g.edge_attr[static_cast<size_t>(e) * (g.dim + 1) + g.dim];
  const size_t mid = lens.size() / 2;
  std::nth_element(lens.begin(), lens.begin() + static_cast<std::ptrdiff_t>(mid), lens.end());
  return lens[mid];
}

bool is_connected(const MeshGraph& g) {
  if (g.num_nodes == 0) return false;
  std::vector<std::vector<int>> adj(static_cast<size_t>(g.num_nodes));
  for (int e = 0; e < g.num_edges(); ++e)
    adj[static_cast<size_t>(g.edge_src[static_cast<size_t>(e)])].push_back(
        g.edge_dst[static_cast<size_t>(e)]);
  std::vector<std::uint8_t> seen(static_cast<size_t>(g.num_nodes), 0);
  std::vector<int> stack = {0};
  seen[0] = 1;
  int reached = 1;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int u : adj[static_cast<size_t>(v)]) {
      if (!seen[static_cast<size_t>(u)]) {
        seen[static_cast<size_t>(u)] = 1;
        ++reached;
        stack.push_back(u);
      }
    }
  }
  return reached == g.num_nodes;
}

void write_mesh(const std::string& path, const MeshGraph& g) {
  g.validate();
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  std::fprintf(f, "flowcast-mesh 1\n%d %d %d %d\n", g.num_nodes, g.dim, g.num_channels,
               g.num_edges());
  for (int i = 0; i < g.num_nodes; ++i) {
    for (int c = 0; c < g.dim; ++c)
      std::fprintf(f, "%s%.17g", c ? " " : "", g.positions[static_cast<size_t>(i) * g.dim + c]);
    std::fputc('\n', f);
  }
  for (int i = 0; i < g.num_nodes; ++i) {
    for (int c = 0; c < g.num_channels; ++c)
      std::fprintf(f, "%s%.17g", c ? " " : "",
                   g.features[static_cast<size_t>(i) * g.num_channels + c]);
    std::fputc('\n', f);
  }
  for (int e = 0; e < g.num_edges(); ++e)
    std::fprintf(f, "%d %d\n", g.edge_src[static_cast<size_t>(e)], g.edge_dst[static_cast<size_t>(e)]);
  for (int i = 0; i < g.num_nodes; ++i)
    std::fprintf(f, "%d\n", g.boundary[static_cast<size_t>(i)] ? 1 : 0);
  if (std::fclose(f) != 0) throw std::runtime_error("write failed: " + path);
}

MeshGraph read_mesh(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  auto fail = [&](const char* why) {
    std::fclose(f);
    throw std::runtime_error(std::string("malformed mesh file ") + path + ": " + why);
  };
  char magic[32];
  int version = 0;
  if (std::fscanf(f, "%31s %d", magic, &version) != 2 || std::string(magic) != "flowcast-mesh" ||
      version != 1)
    fail("bad header");
  MeshGraph g;
  int num_edges = 0;
  if (std::fscanf(f, "%d %d %d %d", &g.num_nodes, &g.dim, &g.num_channels, &num_edges) != 4)
    fail("bad dimensions line");
  if (g.num_nodes <= 0 || g.dim < 1 || g.dim > 3 || g.num_channels < 0 || num_edges < 0)
    fail("dimensions out of range");
  g.positions.resize(static_cast<size_t>(g.num_nodes) * g.dim);
  for (double& v : g.positions)
    if (std::fscanf(f, "%lf", &v) != 1) fail("truncated positions");
  g.features.resize(static_cast<size_t>(g.num_nodes) * g.num_channels);
  for (double& v : g.features)
    if (std::fscanf(f, "%lf", &v) != 1) fail("truncated features");
  g.edge_src.resize(static_cast<size_t>(num_edges));
  g.edge_dst.resize(static_cast<size_t>(num_edges));
  for (int e = 0; e < num_edges; ++e)
    if (std::fscanf(f, "%d %d", &g.edge_src[static_cast<size_t>(e)],
                    &g.edge_dst[static_cast<size_t>(e)]) != 2)
      fail("truncated edges");
  g.boundary.resize(static_cast<size_t>(g.num_nodes));
  for (int i = 0; i < g.num_nodes; ++i) {
    int b = 0;
    if (std::fscanf(f, "%d", &b) != 1) fail("truncated boundary mask");
    g.boundary[static_cast<size_t>(i)] = b ? 1 : 0;
  }
  std::fclose(f);
  g.rebuild_edge_attr();
  g.validate();
  return g;
}

}  // namespace flowcast
