#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "graphmesh.hpp"
#include "rng.hpp"

using namespace flowcast;

namespace {

MeshGraph random_cloud(int n, int dim, int channels, Rng& rng, double extent = 1.0) {
  MeshGraph g;
  g.num_nodes = n;
  g.dim = dim;
  g.num_channels = channels;
  g.positions.resize(static_cast<size_t>(n) * dim);
  for (double& p : g.positions) p = rng.uniform(0.0, extent);
  g.features.resize(static_cast<size_t>(n) * channels);
  for (double& f : g.features) f = rng.uniform(-1.0, 1.0);
  g.boundary.assign(static_cast<size_t>(n), 0);
  return g;
}

}  // namespace

TEST_SUITE("graphmesh") {
  TEST_CASE("radius edges basics") {
    std::vector<double> pos = {0.0, 0.0, 1.0, 0.0};
    auto [s1, d1] = build_radius_edges(pos, 2, 2, 0.5);
    CHECK(s1.empty());
    CHECK(d1.empty());

    auto [s2, d2] = build_radius_edges(pos, 2, 2, 1.0);  // boundary inclusive
    REQUIRE(s2.size() == 2);
    CHECK(s2 == std::vector<int>{0, 1});
    CHECK(d2 == std::vector<int>{1, 0});
  }

  TEST_CASE("radius edges match brute force on random clouds") {
    Rng rng(31);
    for (int dim = 1; dim <= 3; ++dim) {
      MeshGraph g = random_cloud(100, dim, 1, rng);
      const double radius = 0.22;
      auto [src, dst] = build_radius_edges(g.positions, g.num_nodes, dim, radius);

      std::vector<std::pair<int, int>> brute;
      for (int i = 0; i < g.num_nodes; ++i)
        for (int j = 0; j < g.num_nodes; ++j) {
          if (i == j) continue;
          double s = 0.0;
          for (int c = 0; c < dim; ++c) {
            const double d = g.positions[static_cast<size_t>(i) * dim + c] -
                             g.positions[static_cast<size_t>(j) * dim + c];
            s += d * d;
          }
          if (s <= radius * radius) brute.emplace_back(i, j);
        }
      REQUIRE(src.size() == brute.size());
      for (size_t e = 0; e < brute.size(); ++e) {
        CHECK(src[e] == brute[e].first);
        CHECK(dst[e] == brute[e].second);
      }
      // symmetry
      std::set<std::pair<int, int>> present(brute.begin(), brute.end());
      for (auto [i, j] : present) CHECK(present.count({j, i}) == 1);
    }
  }

  TEST_CASE("voxel pool merges a shared cell") {
    MeshGraph g;
    g.num_nodes = 2;
    g.dim = 2;
    g.num_channels = 2;
    g.positions = {0.1, 0.1, 0.2, 0.2};
    g.features = {1.0, 2.0, 3.0, 4.0};
    g.boundary = {0, 1};
    auto [coarse, assignment] = voxel_pool(g, 0.5);
    REQUIRE(coarse.num_nodes == 1);
    CHECK(assignment == std::vector<int>{0, 0});
    CHECK(coarse.positions == std::vector<double>{0.15000000000000002, 0.15000000000000002});
    CHECK(coarse.features == std::vector<double>{2.0, 3.0});
    CHECK(coarse.boundary[0] == 1);
  }

  TEST_CASE("voxel pool with distinct cells copies positions") {
    Rng rng(5);
    MeshGraph g = random_cloud(20, 2, 1, rng, 10.0);
    auto [coarse, assignment] = voxel_pool(g, 1e-6);
    REQUIRE(coarse.num_nodes == 20);
    CHECK(coarse.positions == g.positions);
    CHECK(coarse.features == g.features);
    for (int i = 0; i < 20; ++i) CHECK(assignment[static_cast<size_t>(i)] == i);
  }

  TEST_CASE("voxel pool geometric bound and sum preservation") {
    Rng rng(7);
    MeshGraph g = random_cloud(200, 2, 3, rng);
    const double r = 0.23;
    auto [coarse, assignment] = voxel_pool(g, r);

    std::vector<int> count(static_cast<size_t>(coarse.num_nodes), 0);
    for (int a : assignment) ++count[static_cast<size_t>(a)];

    // cluster mean stays within r*sqrt(d)/2 of the voxel center containing the node
    for (int i = 0; i < g.num_nodes; ++i) {
      const int c = assignment[static_cast<size_t>(i)];
      double s = 0.0;
      for (int k = 0; k < 2; ++k) {
        const double center = (std::floor(g.positions[static_cast<size_t>(i) * 2 + k] / r) + 0.5) * r;
        const double d = coarse.positions[static_cast<size_t>(c) * 2 + k] - center;
        s += d * d;
      }
      CHECK(std::sqrt(s) <= r * std::sqrt(2.0) / 2.0 + 1e-12);
    }

    // mean pooling bookkeeping preserves weighted feature sums
    for (int ch = 0; ch < 3; ++ch) {
      double fine_sum = 0.0, coarse_sum = 0.0;
      for (int i = 0; i < g.num_nodes; ++i) fine_sum += g.features[static_cast<size_t>(i) * 3 + ch];
      for (int c = 0; c < coarse.num_nodes; ++c)
        coarse_sum += coarse.features[static_cast<size_t>(c) * 3 + ch] * count[static_cast<size_t>(c)];
      CHECK(fine_sum == doctest::Approx(coarse_sum).epsilon(1e-12));
    }
  }

  TEST_CASE("knn interpolation weights") {
    // fine node equidistant from 3 coarse nodes -> arithmetic mean
    std::vector<double> coarse_pos = {1.0, 0.0, -0.5, 0.8660254037844386, -0.5, -0.8660254037844386};
    std::vector<double> fine_pos = {0.0, 0.0};
    Tensor cf = Tensor::from_data({3, 2}, {1, 10, 2, 20, 3, 30});
    Tensor out = knn_unpool(cf, coarse_pos, fine_pos, 2, 3);
    CHECK(out.value_at(0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out.value_at(1) == doctest::Approx(20.0).epsilon(1e-12));

    // coincident fine node copies exactly
    std::vector<double> fine_on = {1.0, 0.0};
    Tensor hit = knn_unpool(cf, coarse_pos, fine_on, 2, 3);
    CHECK(hit.value_at(0) == 1.0);
    CHECK(hit.value_at(1) == 10.0);

    // k=1 picks the nearest
    std::vector<double> near1 = {0.9, 0.05};
    Tensor n1 = knn_unpool(cf, coarse_pos, near1, 2, 1);
    CHECK(n1.value_at(0) == 1.0);

    CHECK_THROWS(build_knn_interp(coarse_pos, 3, fine_pos, 1, 2, 4));
  }

  TEST_CASE("knn weights are a convex combination") {
    Rng rng(13);
    MeshGraph fine = random_cloud(40, 2, 1, rng);
    MeshGraph coarse = random_cloud(9, 2, 1, rng);
    KnnInterp interp = build_knn_interp(coarse.positions, 9, fine.positions, 40, 2, 4);
    for (int f = 0; f < 40; ++f) {
      double s = 0.0;
      for (int j = 0; j < 4; ++j) {
        const double w = interp.weight[static_cast<size_t>(f) * 4 + j];
        CHECK(w >= 0.0);
        s += w;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("pool then unpool preserves a constant field") {
    Rng rng(19);
    MeshGraph g = random_cloud(120, 2, 2, rng);
    for (size_t i = 0; i < g.features.size(); i += 2) {
      g.features[i] = 4.25;
      g.features[i + 1] = -1.5;
    }
    PoolingConfig cfg;
    cfg.voxel_sizes = {0.2};
    cfg.knn_k = 3;
    GraphHierarchy h = build_hierarchy(g, cfg);
    REQUIRE(h.coarse.size() == 1);
    Tensor coarse_feats = Tensor::from_data({h.coarse[0].graph.num_nodes, 2},
                                            h.coarse[0].graph.features);
    Tensor back = apply_knn_interp(h.coarse[0].unpool, coarse_feats);
    for (int i = 0; i < g.num_nodes; ++i) {
      CHECK(back.value_at(i * 2) == doctest::Approx(4.25).epsilon(1e-14));
      CHECK(back.value_at(i * 2 + 1) == doctest::Approx(-1.5).epsilon(1e-14));
    }
  }

  TEST_CASE("hierarchy levels shrink and stay consistent") {
    Rng rng(23);
    MeshGraph g = random_cloud(300, 2, 1, rng);
    PoolingConfig cfg;
    cfg.voxel_sizes = {0.1, 0.3};
    GraphHierarchy h = build_hierarchy(g, cfg);
    REQUIRE(h.coarse.size() == 2);
    CHECK(h.coarse[0].graph.num_nodes < g.num_nodes);
    CHECK(h.coarse[1].graph.num_nodes < h.coarse[0].graph.num_nodes);
    CHECK(h.coarse[0].assignment.size() == static_cast<size_t>(g.num_nodes));
    CHECK(h.coarse[1].assignment.size() == static_cast<size_t>(h.coarse[0].graph.num_nodes));
    for (const auto& level : h.coarse) {
      double total = 0.0;
      for (size_t c = 0; c < level.inv_count.size(); ++c) total += 1.0 / level.inv_count[c];
      CHECK(total == doctest::Approx(static_cast<double>(level.assignment.size())).epsilon(1e-12));
    }

    PoolingConfig bad;
    bad.voxel_sizes = {0.3, 0.3};
    CHECK_THROWS(build_hierarchy(g, bad));
  }

  TEST_CASE("edge_attr invariant and validation") {
    MeshGraph g;
    g.num_nodes = 3;
    g.dim = 2;
    g.num_channels = 1;
    g.positions = {0, 0, 1, 0, 0, 2};
    g.features = {1, 2, 3};
    g.edge_src = {0, 1};
    g.edge_dst = {1, 0};
    g.boundary = {0, 0, 0};
    g.rebuild_edge_attr();
    CHECK(g.edge_attr == std::vector<double>{1, 0, 1, -1, 0, 1});
    CHECK_NOTHROW(g.validate());

    g.edge_attr[0] = 5.0;
    CHECK_THROWS(g.validate());
    g.rebuild_edge_attr();
    g.edge_src.push_back(7);
    g.edge_dst.push_back(0);
    CHECK_THROWS(g.validate());
  }

  TEST_CASE("connectivity and median edge length") {
    MeshGraph g;
    g.num_nodes = 4;
    g.dim = 1;
    g.num_channels = 0;
    g.positions = {0.0, 1.0, 2.0, 10.0};
    auto [src, dst] = build_radius_edges(g.positions, 4, 1, 1.0);
    g.edge_src = src;
    g.edge_dst = dst;
    g.boundary.assign(4, 0);
    g.rebuild_edge_attr();
    CHECK_FALSE(is_connected(g));
    CHECK(median_edge_length(g) == 1.0);

    auto [s2, d2] = build_radius_edges(g.positions, 4, 1, 8.0);
    g.edge_src = s2;
    g.edge_dst = d2;
    g.rebuild_edge_attr();
    CHECK(is_connected(g));
  }

  TEST_CASE("mesh file round-trips byte-exactly") {
    Rng rng(29);
    MeshGraph g = random_cloud(25, 2, 2, rng);
    auto [src, dst] = build_radius_edges(g.positions, 25, 2, 0.4);
    g.edge_src = src;
    g.edge_dst = dst;
    g.boundary[3] = 1;
    g.boundary[11] = 1;
    g.rebuild_edge_attr();

    const std::string p1 = "test_mesh_a.txt", p2 = "test_mesh_b.txt";
    write_mesh(p1, g);
    MeshGraph back = read_mesh(p1);
    write_mesh(p2, back);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::stringstream b1, b2;
    b1 << f1.rdbuf();
    b2 << f2.rdbuf();
    CHECK(b1.str() == b2.str());
    CHECK(back.positions == g.positions);
    CHECK(back.features == g.features);
    CHECK(back.edge_src == g.edge_src);
    CHECK(back.boundary == g.boundary);
    std::remove(p1.c_str());
    std::remove(p2.c_str());

    CHECK_THROWS(read_mesh("does_not_exist.txt"));
  }
}
