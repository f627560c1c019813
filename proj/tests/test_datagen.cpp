#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "datagen.hpp"
#include "doctest.h"
#include "rng.hpp"

using namespace flowcast;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double num = 0.0, va = 0.0, vb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

}  // namespace

TEST_SUITE("kernel zoo") {
  TEST_CASE("parsing and moments") {
    Rng rng(1);
    auto rad = kernel_zoo("rademacher");
    CHECK(rad.cond_mean(3.0) == 0.0);
    CHECK(rad.cond_std(3.0) == 1.0);
    for (int i = 0; i < 50; ++i) CHECK(std::abs(rad.sample(0.0, rng)) == 1.0);

    auto aff = kernel_zoo("affine_gaussian(0.5,0,0.1)");
    CHECK(aff.cond_mean(2.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(aff.cond_std(2.0) == doctest::Approx(0.1).epsilon(1e-15));

    auto logi = kernel_zoo("deterministic_logistic(3.9)");
    CHECK(logi.sample(0.5, rng) == doctest::Approx(3.9 * 0.25).epsilon(1e-15));
    CHECK(logi.cond_std(0.5) == 0.0);

    auto bi = kernel_zoo("bimodal_drift");
    CHECK(bi.cond_mean(1.0) == 0.5);

    CHECK_THROWS(kernel_zoo("unknown_kernel"));
  }
}

TEST_SUITE("chaotic pde") {
  TEST_CASE("zero initial condition stays zero") {
    auto ds = chaotic_pde_trajectories(64, 0.5, 5, 1, 77, 22.0, 0.0, 1.0);
    for (const auto& state : ds.trajectories[0])
      for (double v : state) CHECK(v == 0.0);
  }

  TEST_CASE("chaotic run is bounded, normalized, and seed-decorrelated") {
    auto ds = chaotic_pde_trajectories(64, 1.5, 40, 4, 5);
    ds.validate();
    CHECK(ds.topology.num_nodes == 64);
    CHECK(ds.topology.dim == 2);
    CHECK(ds.trajectories.size() == 4);
    CHECK(ds.trajectories[0].size() == 40);

    // circle embedding keeps the ring edge lengths uniform
    const double want = 2.0 * (64.0 / (2.0 * 3.14159265358979323846)) *
                        std::sin(3.14159265358979323846 / 64.0);
    bool found_unit = false;
    for (int e = 0; e < ds.topology.num_edges(); ++e) {
      const double len = ds.topology.edge_attr[static_cast<size_t>(e) * 3 + 2];
      if (std::abs(len - want) < 1e-12) found_unit = true;
    }
    CHECK(found_unit);

    double s = 0.0, s2 = 0.0;
    std::int64_t n = 0;
    for (const auto& traj : ds.trajectories)
      for (const auto& state : traj)
        for (double v : state) {
          CHECK(std::isfinite(v));
          s += v;
          s2 += v * v;
          ++n;
        }
    const double mean = s / static_cast<double>(n);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(s2 / static_cast<double>(n) - mean * mean - 1.0) < 1e-9);

    // independent seeds decorrelate after the transient (mean over pairs,
    // single 64-point fields carry sizeable correlation noise)
    double cross = 0.0;
    int pairs = 0;
    for (size_t i = 0; i < 4; ++i)
      for (size_t j = i + 1; j < 4; ++j) {
        cross += std::abs(correlation(ds.trajectories[i].back(), ds.trajectories[j].back()));
        ++pairs;
      }
    CHECK(cross / pairs < 0.25);

    // determinism
    auto again = chaotic_pde_trajectories(64, 1.5, 40, 4, 5);
    CHECK(again.trajectories[1][7] == ds.trajectories[1][7]);

    CHECK_THROWS(chaotic_pde_trajectories(16, 0.5, 5, 1, 5));
  }

  TEST_CASE("consecutive snapshots are correlated but not frozen") {
    auto ds = chaotic_pde_trajectories(64, 0.5, 30, 1, 11);
    double c = 0.0;
    for (size_t t = 0; t + 1 < ds.trajectories[0].size(); ++t)
      c += correlation(ds.trajectories[0][t], ds.trajectories[0][t + 1]);
    c /= static_cast<double>(ds.trajectories[0].size() - 1);
    CHECK(c > 0.5);   // learnable one-step map
    CHECK(c < 0.999); // but states do move
  }
}

TEST_SUITE("mesh dynamics") {
  TEST_CASE("geometry, connectivity, and the hot spot") {
    auto ds = mesh_dynamics(220, 60, 2, 3);
    ds.validate();
    const auto& g = ds.topology;
    CHECK(is_connected(g));

    int interior = 0;
    for (int i = 0; i < g.num_nodes; ++i) {
      const double x = g.positions[static_cast<size_t>(i) * 2];
      const double y = g.positions[static_cast<size_t>(i) * 2 + 1];
      CHECK(x >= 0.0);
      CHECK(x <= 2.0);
      CHECK(y >= 0.0);
      CHECK(y <= 1.0);
      CHECK_FALSE((x > 1.4 && y < 0.4));
      if (!g.boundary[static_cast<size_t>(i)]) ++interior;
    }
    CHECK(interior > g.num_nodes / 2);

    // temporal variance peaks inside the designed hot-spot region
    std::vector<double> var(static_cast<size_t>(g.num_nodes), 0.0);
    for (int i = 0; i < g.num_nodes; ++i) {
      double s = 0.0, s2 = 0.0;
      for (const auto& state : ds.trajectories[0]) {
        s += state[static_cast<size_t>(i)];
        s2 += state[static_cast<size_t>(i)] * state[static_cast<size_t>(i)];
      }
      const double m = s / static_cast<double>(ds.trajectories[0].size());
      var[static_cast<size_t>(i)] = s2 / static_cast<double>(ds.trajectories[0].size()) - m * m;
    }
    const int hottest =
        static_cast<int>(std::max_element(var.begin(), var.end()) - var.begin());
    const double dx = g.positions[static_cast<size_t>(hottest) * 2] - 1.32;
    const double dy = g.positions[static_cast<size_t>(hottest) * 2 + 1] - 0.48;
    CHECK(std::sqrt(dx * dx + dy * dy) < 0.3);

    auto again = mesh_dynamics(220, 60, 2, 3);
    CHECK(again.trajectories[0][5] == ds.trajectories[0][5]);
    CHECK_THROWS(mesh_dynamics(10, 60, 1, 3));
  }
}

TEST_SUITE("dataset io") {
  TEST_CASE("directory round-trip is byte-exact") {
    auto ds = mesh_dynamics(80, 12, 2, 9);
    const std::string d1 = "test_ds_a", d2 = "test_ds_b";
    write_dataset(d1, ds);
    auto back = read_dataset(d1);
    write_dataset(d2, back);

    for (const std::string name : {"mesh.txt", "stats.txt", "traj_0.txt", "traj_1.txt"})
      CHECK(slurp(d1 + "/" + name) == slurp(d2 + "/" + name));
    CHECK(back.trajectories == ds.trajectories);
    CHECK(back.channel_mean == ds.channel_mean);
    CHECK(back.channel_std == ds.channel_std);
    CHECK(back.dt_snapshot == ds.dt_snapshot);

    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
    CHECK_THROWS(read_dataset("no_such_dataset_dir"));
  }
}
