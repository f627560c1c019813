#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include "denoiser.hpp"
#include "doctest.h"
#include "graphmesh.hpp"
#include "schedule.hpp"

using namespace flowcast;

namespace {

MeshGraph random_graph(int n, int channels, unsigned seed, double radius = 0.45) {
  Rng rng(seed);
  MeshGraph g;
  g.num_nodes = n;
  g.dim = 2;
  g.num_channels = channels;
  g.positions.resize(static_cast<size_t>(n) * 2);
  for (double& p : g.positions) p = rng.uniform();
  g.features.assign(static_cast<size_t>(n) * channels, 0.0);
  auto [src, dst] = build_radius_edges(g.positions, n, 2, radius);
  g.edge_src = std::move(src);
  g.edge_dst = std::move(dst);
  g.boundary.assign(static_cast<size_t>(n), 0);
  g.rebuild_edge_attr();
  g.validate();
  return g;
}

GraphHierarchy flat_hierarchy(const MeshGraph& g) {
  PoolingConfig cfg;
  cfg.voxel_sizes = {};
  return build_hierarchy(g, cfg);
}

// In-place random perturbation so zero-initialized layers stop being zero.
void jitter_parameters(DenoiserNet& net, unsigned seed, double amplitude = 0.3) {
  Rng rng(seed);
  for (auto& t : parameters(net))
    for (double& v : t.mutable_values()) v += amplitude * rng.normal();
}

DenoiserConfig small_config() {
  DenoiserConfig cfg;
  cfg.state_channels = 2;
  cfg.cond_channels = 2;
  cfg.pos_dim = 2;
  cfg.hidden = 8;
  cfg.num_heads = 2;
  cfg.fourier_features = 3;
  cfg.noise_embed_dim = 6;
  cfg.encoder_levels = 0;
  cfg.bottleneck_blocks = 2;
  return cfg;
}

}  // namespace

TEST_SUITE("denoiser") {
  TEST_CASE("position embedding identities") {
    DenoiserConfig cfg = small_config();
    Rng rng(7);
    DenoiserNet net = make_denoiser(cfg, rng);

    std::vector<double> at_origin = {0.0, 0.0, 0.0, 0.0};
    Tensor e0 = embed_positions(net, at_origin, 2);
    REQUIRE(e0.shape() == Shape{2, 2 * cfg.fourier_features});
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < cfg.fourier_features; ++j) {
        CHECK(e0.value_at(i * 2 * cfg.fourier_features + j) == 0.0);
        CHECK(e0.value_at(i * 2 * cfg.fourier_features + cfg.fourier_features + j) == 1.0);
      }

    std::vector<double> p = {0.3, -1.2, 2.5, 0.7, -0.4, 0.1};
    Tensor e = embed_positions(net, p, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < cfg.fourier_features; ++j) {
        const double s = e.value_at(i * 2 * cfg.fourier_features + j);
        const double c = e.value_at(i * 2 * cfg.fourier_features + cfg.fourier_features + j);
        CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-12));
      }

    // frozen matrix: repeated calls agree bitwise
    Tensor e2 = embed_positions(net, p, 3);
    CHECK(e.values() == e2.values());
    CHECK_FALSE(net.fourier_w.requires_grad());
  }

  TEST_CASE("zero-init net reduces to the long-skip projection exactly") {
    MeshGraph g = random_graph(12, 2, 3);
    PoolingConfig pool;
    pool.voxel_sizes = {0.5};
    GraphHierarchy hier = build_hierarchy(g, pool);

    DenoiserConfig cfg = small_config();
    cfg.encoder_levels = 1;
    Rng rng(11);
    DenoiserNet net = make_denoiser(cfg, rng);

    Rng data(5);
    Tensor x = randn({12, 2}, data);
    Tensor cond = randn({12, 2}, data);
    Tensor out = forward_raw(net, hier, x, cond, 1.7);
    REQUIRE(out.shape() == Shape{12, 2});

    Tensor input = concat_cols(concat_cols(x, cond),
                               embed_positions(net, g.positions, g.num_nodes));
    Tensor skip = linear_apply(net.long_skip, input);
    for (int i = 0; i < 24; ++i) CHECK(out.value_at(i) == skip.value_at(i));
  }

  TEST_CASE("attention weights are row-stochastic per destination and head") {
    MeshGraph g = random_graph(14, 2, 9);
    REQUIRE(g.num_edges() > 0);
    DenoiserConfig cfg = small_config();
    Rng rng(13);
    DenoiserNet net = make_denoiser(cfg, rng);
    jitter_parameters(net, 77);

    Rng data(21);
    Tensor h = randn({14, cfg.hidden}, data);
    Tensor eattr = Tensor::from_data({g.num_edges(), g.dim + 1}, g.edge_attr);
    Tensor es = noise_embedding(net, 0.9);
    Tensor alpha = attention_alpha(net.bottleneck[0], h, g, eattr, es, cfg.num_heads);
    REQUIRE(alpha.shape() == Shape{g.num_edges(), cfg.num_heads});

    std::vector<std::vector<double>> sums(static_cast<size_t>(g.num_nodes),
                                          std::vector<double>(2, 0.0));
    std::vector<int> indeg(static_cast<size_t>(g.num_nodes), 0);
    for (int e = 0; e < g.num_edges(); ++e) {
      indeg[static_cast<size_t>(g.edge_dst[static_cast<size_t>(e)])]++;
      for (int hd = 0; hd < 2; ++hd) {
        CHECK(alpha.value_at(e * 2 + hd) >= 0.0);
        sums[static_cast<size_t>(g.edge_dst[static_cast<size_t>(e)])][static_cast<size_t>(hd)] +=
            alpha.value_at(e * 2 + hd);
      }
    }
    for (int i = 0; i < g.num_nodes; ++i)
      if (indeg[static_cast<size_t>(i)] > 0)
        for (int hd = 0; hd < 2; ++hd)
          CHECK(std::abs(sums[static_cast<size_t>(i)][static_cast<size_t>(hd)] - 1.0) < 1e-9);
  }

  TEST_CASE("forward_raw is permutation equivariant") {
    MeshGraph g = random_graph(10, 2, 17);
    REQUIRE(g.num_edges() > 0);
    GraphHierarchy hier = flat_hierarchy(g);

    DenoiserConfig cfg = small_config();
    Rng rng(19);
    DenoiserNet net = make_denoiser(cfg, rng);
    jitter_parameters(net, 23);

    Rng data(29);
    Tensor x = randn({10, 2}, data);
    Tensor cond = randn({10, 2}, data);
    Tensor out = forward_raw(net, hier, x, cond, 0.6);

    // perm[i] is the new id of old node i; edge list order is preserved so
    // each destination accumulates its messages in the same sequence
    std::vector<int> perm = {4, 7, 1, 9, 0, 3, 8, 2, 6, 5};
    MeshGraph pg;
    pg.num_nodes = 10;
    pg.dim = 2;
    pg.num_channels = 2;
    pg.positions.resize(20);
    pg.features.assign(20, 0.0);
    pg.boundary.assign(10, 0);
    std::vector<double> px(20), pcond(20);
    for (int i = 0; i < 10; ++i) {
      const int ni = perm[static_cast<size_t>(i)];
      for (int d = 0; d < 2; ++d) {
        pg.positions[static_cast<size_t>(ni) * 2 + d] = g.positions[static_cast<size_t>(i) * 2 + d];
        px[static_cast<size_t>(ni) * 2 + d] = x.value_at(i * 2 + d);
        pcond[static_cast<size_t>(ni) * 2 + d] = cond.value_at(i * 2 + d);
      }
    }
    for (int e = 0; e < g.num_edges(); ++e) {
      pg.edge_src.push_back(perm[static_cast<size_t>(g.edge_src[static_cast<size_t>(e)])]);
      pg.edge_dst.push_back(perm[static_cast<size_t>(g.edge_dst[static_cast<size_t>(e)])]);
    }
    pg.rebuild_edge_attr();
    pg.validate();
    GraphHierarchy phier = flat_hierarchy(pg);

    Tensor pout = forward_raw(net, phier, Tensor::from_data({10, 2}, px),
                              Tensor::from_data({10, 2}, pcond), 0.6);
    for (int i = 0; i < 10; ++i)
      for (int c = 0; c < 2; ++c)
        CHECK(pout.value_at(perm[static_cast<size_t>(i)] * 2 + c) == out.value_at(i * 2 + c));
  }

  TEST_CASE("single-node graph matches a hand-built FFN-only oracle") {
    MeshGraph g;
    g.num_nodes = 1;
    g.dim = 2;
    g.num_channels = 1;
    g.positions = {0.4, -0.2};
    g.features = {0.0};
    g.boundary = {0};
    g.rebuild_edge_attr();
    GraphHierarchy hier = flat_hierarchy(g);

    DenoiserConfig cfg;
    cfg.state_channels = 1;
    cfg.cond_channels = 1;
    cfg.pos_dim = 2;
    cfg.hidden = 4;
    cfg.num_heads = 1;
    cfg.fourier_features = 2;
    cfg.noise_embed_dim = 4;
    cfg.encoder_levels = 0;
    cfg.bottleneck_blocks = 1;
    Rng rng(31);
    DenoiserNet net = make_denoiser(cfg, rng);
    jitter_parameters(net, 37);

    const double sigma = 1.3;
    Tensor x = Tensor::from_data({1, 1}, {0.8});
    Tensor cond = Tensor::from_data({1, 1}, {-0.5});
    Tensor out = forward_raw(net, hier, x, cond, sigma);

    // replay the whole pipeline with plain loops
    auto vec_lin = [](const Linear& l, const std::vector<double>& v) {
      const int in = l.w.dim(0), outd = l.w.dim(1);
      std::vector<double> r(static_cast<size_t>(outd));
      for (int j = 0; j < outd; ++j) {
        double acc = l.b.value_at(j);
        for (int i = 0; i < in; ++i) acc += v[static_cast<size_t>(i)] * l.w.value_at(i * outd + j);
        r[static_cast<size_t>(j)] = acc;
      }
      return r;
    };
    auto vec_silu = [](std::vector<double> v) {
      for (double& a : v) a *= 1.0 / (1.0 + std::exp(-a));
      return v;
    };
    auto vec_ln = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double a : v) m += a;
      m /= static_cast<double>(v.size());
      double var = 0.0;
      for (double a : v) var += (a - m) * (a - m);
      var /= static_cast<double>(v.size());
      const double s = 1.0 / std::sqrt(var + 1e-5);
      std::vector<double> r(v.size());
      for (size_t i = 0; i < v.size(); ++i) r[i] = (v[i] - m) * s;
      return r;
    };

    const double twopi = 6.283185307179586476925286766559;
    std::vector<double> input = {0.8, -0.5};
    for (int j = 0; j < 2; ++j) {
      double proj = 0.0;
      for (int d = 0; d < 2; ++d)
        proj += g.positions[static_cast<size_t>(d)] * net.fourier_w.value_at(d * 2 + j);
      input.push_back(std::sin(twopi * proj));
    }
    for (int j = 0; j < 2; ++j) {
      double proj = 0.0;
      for (int d = 0; d < 2; ++d)
        proj += g.positions[static_cast<size_t>(d)] * net.fourier_w.value_at(d * 2 + j);
      input.push_back(std::cos(twopi * proj));
    }
    std::vector<double> h = vec_lin(net.input_proj, input);

    const double c_noise = 0.25 * std::log(sigma);
    std::vector<double> semb(4);
    for (int i = 0; i < 2; ++i) {
      const double freq = std::exp(-std::log(1e4) * i / 2.0);
      semb[static_cast<size_t>(i)] = std::sin(c_noise * freq);
      semb[static_cast<size_t>(2 + i)] = std::cos(c_noise * freq);
    }
    std::vector<double> es = vec_lin(net.noise2, vec_silu(vec_lin(net.noise1, semb)));

    const auto& blk = net.bottleneck[0];
    std::vector<double> mod = vec_lin(blk.modulation, es);
    std::vector<double> a2(4), hn = vec_ln(h);
    for (int i = 0; i < 4; ++i)
      a2[static_cast<size_t>(i)] =
          hn[static_cast<size_t>(i)] * (1.0 + mod[static_cast<size_t>(12 + i)]) +
          mod[static_cast<size_t>(16 + i)];
    std::vector<double> f = vec_lin(blk.ffn2, vec_silu(vec_lin(blk.ffn1, a2)));
    for (int i = 0; i < 4; ++i)
      h[static_cast<size_t>(i)] += f[static_cast<size_t>(i)] * mod[static_cast<size_t>(20 + i)];

    std::vector<double> expect = vec_lin(net.out_proj, vec_ln(h));
    std::vector<double> skip = vec_lin(net.long_skip, input);
    expect[0] += skip[0];
    CHECK(std::abs(out.value_at(0) - expect[0]) < 1e-12);
  }

  TEST_CASE("denoise wrap formula") {
    MeshGraph g = random_graph(6, 1, 41);
    GraphHierarchy hier = flat_hierarchy(g);
    DenoiserConfig cfg = small_config();
    cfg.state_channels = 1;
    cfg.cond_channels = 1;
    Rng rng(43);
    DenoiserNet net = make_denoiser(cfg, rng);

    Rng data(47);
    Tensor x = randn({6, 1}, data);
    Tensor cond = randn({6, 1}, data);

    SUBCASE("F identically zero gives c_skip * x") {
      // zero the long skip so the freshly initialized backbone outputs 0
      for (double& v : net.long_skip.w.mutable_values()) v = 0.0;
      const double sigma = 2.4;
      const PreconditionCoeffs pc = precondition_coeffs(sigma, cfg.sigma_data);
      Tensor d = denoise(net, hier, x, cond, sigma);
      for (int i = 0; i < 6; ++i)
        CHECK(d.value_at(i) == doctest::Approx(pc.c_skip * x.value_at(i)).epsilon(1e-14));
    }

    SUBCASE("sigma to zero recovers the input") {
      jitter_parameters(net, 53);
      Tensor d = denoise(net, hier, x, cond, 1e-7);
      for (int i = 0; i < 6; ++i) CHECK(std::abs(d.value_at(i) - x.value_at(i)) < 1e-5);
    }

    SUBCASE("sigma equal to sigma_data splits evenly") {
      jitter_parameters(net, 59);
      const double sd = cfg.sigma_data;
      Tensor f = forward_raw(net, hier, scale(x, 1.0 / (sd * std::sqrt(2.0))), cond, sd);
      Tensor d = denoise(net, hier, x, cond, sd);
      for (int i = 0; i < 6; ++i)
        CHECK(d.value_at(i) ==
              doctest::Approx(0.5 * x.value_at(i) + sd / std::sqrt(2.0) * f.value_at(i))
                  .epsilon(1e-13));
    }
  }

  TEST_CASE("denoise gradients match central finite differences on a 20-node graph") {
    MeshGraph g = random_graph(20, 1, 61, 0.4);
    REQUIRE(g.num_edges() > 0);
    PoolingConfig pool;
    pool.voxel_sizes = {0.45};
    GraphHierarchy hier = build_hierarchy(g, pool);
    REQUIRE(hier.coarse.size() == 1);
    REQUIRE(hier.coarse[0].graph.num_nodes < 20);

    DenoiserConfig cfg;
    cfg.state_channels = 1;
    cfg.cond_channels = 1;
    cfg.pos_dim = 2;
    cfg.hidden = 8;
    cfg.num_heads = 2;
    cfg.fourier_features = 3;
    cfg.noise_embed_dim = 6;
    cfg.encoder_levels = 1;
    cfg.blocks_per_level = 1;
    cfg.bottleneck_blocks = 1;
    Rng rng(67);
    DenoiserNet net = make_denoiser(cfg, rng);
    jitter_parameters(net, 71, 0.2);

    Rng data(73);
    Tensor x = randn({20, 1}, data);
    Tensor cond = randn({20, 1}, data);
    Tensor probe = randn({20, 1}, data);  // fixed projection to a scalar
    const double sigma = 0.8;

    auto loss_value = [&]() {
      return sum(mul(denoise(net, hier, x, cond, sigma), probe)).item();
    };

    Tensor loss = sum(mul(denoise(net, hier, x, cond, sigma), probe));
    backward(loss);

    auto params = parameters(net);
    Rng pick(79);
    int checked = 0;
    for (int trial = 0; trial < 160; ++trial) {
      auto& t = params[pick.uniform_index(params.size())];
      const auto idx = static_cast<std::int64_t>(pick.uniform_index(static_cast<size_t>(t.size())));
      const double analytic = t.has_grad() ? t.grad()[static_cast<size_t>(idx)] : 0.0;

      auto& vals = t.mutable_values();
      const double keep = vals[static_cast<size_t>(idx)];
      const double h = 1e-4;
      vals[static_cast<size_t>(idx)] = keep + h;
      const double up = loss_value();
      vals[static_cast<size_t>(idx)] = keep - h;
      const double down = loss_value();
      vals[static_cast<size_t>(idx)] = keep;

      const double fd = (up - down) / (2.0 * h);
      const double rel = std::abs(analytic - fd) /
                         std::max({1.0, std::abs(analytic), std::abs(fd)});
      CHECK(rel < 1e-3);
      ++checked;
    }
    CHECK(checked == 160);
  }

  TEST_CASE("checkpoint rewrites byte-identically and guards the config hash") {
    DenoiserConfig cfg = small_config();
    cfg.encoder_levels = 0;
    Rng rng(83);
    DenoiserNet net = make_denoiser(cfg, rng);
    jitter_parameters(net, 89);

    const std::string p1 = "/tmp/fc_ckpt_a.txt", p2 = "/tmp/fc_ckpt_b.txt";
    save_checkpoint(p1, net);
    DenoiserNet loaded = load_checkpoint(p1, config_hash(cfg));
    save_checkpoint(p2, loaded);

    auto slurp = [](const std::string& p) {
      std::ifstream in(p, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      return ss.str();
    };
    CHECK(slurp(p1) == slurp(p2));
    CHECK(slurp(p1).size() > 0);

    // loaded net computes the same outputs
    MeshGraph g = random_graph(5, 2, 97);
    GraphHierarchy hier = flat_hierarchy(g);
    Rng data(101);
    Tensor x = randn({5, 2}, data);
    Tensor cond = randn({5, 2}, data);
    Tensor a = forward_raw(net, hier, x, cond, 0.7);
    Tensor b = forward_raw(loaded, hier, x, cond, 0.7);
    CHECK(a.values() == b.values());

    CHECK_THROWS(load_checkpoint(p1, config_hash(cfg) + 1));

    DenoiserConfig other = cfg;
    other.hidden = 16;
    CHECK(config_hash(other) != config_hash(cfg));

    // tampering with the stored config line breaks the stored hash
    std::string text = slurp(p1);
    const auto pos = text.find("config 2 2 2 8");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 14, "config 2 2 2 9");
    std::ofstream(p1, std::ios::binary) << text;
    CHECK_THROWS(load_checkpoint(p1));
  }

  TEST_CASE("config validation rejects bad dimensions") {
    Rng rng(1);
    DenoiserConfig cfg = small_config();
    cfg.hidden = 9;  // not divisible by num_heads = 2
    CHECK_THROWS(make_denoiser(cfg, rng));
    cfg = small_config();
    cfg.noise_embed_dim = 5;
    CHECK_THROWS(make_denoiser(cfg, rng));
    cfg = small_config();
    cfg.state_channels = 0;
    CHECK_THROWS(make_denoiser(cfg, rng));

    // shape mismatches at call time
    DenoiserConfig ok = small_config();
    DenoiserNet net = make_denoiser(ok, rng);
    MeshGraph g = random_graph(4, 2, 3);
    GraphHierarchy hier = flat_hierarchy(g);
    Rng data(2);
    CHECK_THROWS(forward_raw(net, hier, randn({4, 3}, data), randn({4, 2}, data), 1.0));
    CHECK_THROWS(forward_raw(net, hier, randn({4, 2}, data), randn({4, 2}, data), 0.0));
    CHECK_THROWS(forward_raw(net, hier, randn({5, 2}, data), randn({5, 2}, data), 1.0));
  }
}
