#include <cmath>
#include <vector>

#include "doctest.h"
#include "graphmesh.hpp"
#include "sampler.hpp"
#include "schedule.hpp"
#include "tensor.hpp"

using namespace flowcast;

namespace {

// Exact denoiser for a bivariate Gaussian prior N(mu, Sigma):
// D(x; sigma) = mu + Sigma (Sigma + sigma^2 I)^{-1} (x - mu).
DenoiseFn gaussian_denoiser(double S00, double S01, double S11, double m0, double m1) {
  return [=](const Tensor& x, const Tensor&, double sigma) {
    const double t = sigma * sigma;
    const double b00 = S00 + t, b11 = S11 + t, det = b00 * b11 - S01 * S01;
    const double i00 = b11 / det, i01 = -S01 / det, i11 = b00 / det;
    Tensor A = Tensor::from_data({2, 2}, {S00 * i00 + S01 * i01, S00 * i01 + S01 * i11,
                                          S01 * i00 + S11 * i01, S01 * i01 + S11 * i11});
    Tensor mu = Tensor::from_data({2, 1}, {m0, m1});
    return add(mu, matmul(A, sub(x, mu)));
  };
}

SamplerConfig no_churn(int steps) {
  SamplerConfig cfg;
  cfg.num_steps = steps;
  cfg.s_churn = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("pf_ode_step: identity denoiser has zero drift") {
  DenoiseFn ident = [](const Tensor& x, const Tensor&, double) { return x; };
  Tensor x = Tensor::from_data({5, 2}, {0.3, -1.2, 0.8, 2.5, -0.4, 0.05, 1.9, -2.2, 0.0, 0.7});
  Tensor out = pf_ode_step(ident, x, 3.0, 1.2, Tensor());
  REQUIRE(out.shape() == x.shape());
  for (int i = 0; i < 10; ++i) CHECK(out.values()[i] == x.values()[i]);
}

TEST_CASE("pf_ode_step: hand-computed Heun stages for a constant denoiser") {
  const double c = 0.4;
  DenoiseFn constant = [c](const Tensor& x, const Tensor&, double) {
    return Tensor::full(x.shape(), c);
  };
  const std::vector<double> xv = {2.0, -1.0, 0.5};
  Tensor x = Tensor::from_data({3, 1}, xv);
  Tensor out = pf_ode_step(constant, x, 2.0, 1.0, Tensor());
  const double h = 1.0 - 2.0;
  for (int i = 0; i < 3; ++i) {
    const double d1 = (xv[i] - c) / 2.0;
    const double xe = xv[i] + h * d1;
    const double d2 = (xe - c) / 1.0;
    const double expected = xv[i] + 0.5 * h * (d1 + d2);
    CHECK(out.values()[i] == doctest::Approx(expected).epsilon(1e-15));
    // for this linear ODE the two-stage update collapses to (x + c) / 2
    CHECK(expected == doctest::Approx(0.5 * (xv[i] + c)).epsilon(1e-15));
  }
}

TEST_CASE("pf_ode_step: zero denoiser follows the analytic linear contraction") {
  DenoiseFn zero = [](const Tensor& x, const Tensor&, double) {
    return Tensor::zeros(x.shape());
  };
  NoiseSchedule sched;
  sched.sigma_min = 0.005;
  sched.sigma_max = 80.0;
  const SamplerConfig cfg = no_churn(50);
  const std::vector<double> sigmas = sigma_steps(cfg, sched);
  REQUIRE(sigmas.size() == 51);
  REQUIRE(sigmas.front() == 80.0);
  REQUIRE(sigmas[49] == doctest::Approx(0.005).epsilon(1e-12));
  REQUIRE(sigmas.back() == 0.0);

  Tensor x = Tensor::from_data({4, 1}, {16.0, -40.0, 4.0, 64.0});
  const std::vector<double> x0 = x.values();
  for (int i = 0; i + 2 < static_cast<int>(sigmas.size()); ++i)
    x = pf_ode_step(zero, x, sigmas[i], sigmas[i + 1], Tensor());
  const double shrink = sigmas[49] / sigmas[0];
  for (int i = 0; i < 4; ++i) {
    const double expected = x0[i] * shrink;
    CHECK(std::fabs(x.values()[i] - expected) < 1e-3 * std::fabs(expected));
  }
  // terminal Euler stage lands exactly on zero
  x = pf_ode_step(zero, x, sigmas[49], 0.0, Tensor());
  for (int i = 0; i < 4; ++i) CHECK(x.values()[i] == 0.0);
}

TEST_CASE("pf_ode_step: rejects bad sigma ordering") {
  DenoiseFn ident = [](const Tensor& x, const Tensor&, double) { return x; };
  Tensor x = Tensor::from_data({2, 1}, {1.0, 2.0});
  CHECK_THROWS(pf_ode_step(ident, x, 1.0, 1.0, Tensor()));
  CHECK_THROWS(pf_ode_step(ident, x, 1.0, 2.0, Tensor()));
  CHECK_THROWS(pf_ode_step(ident, x, 1.0, -0.5, Tensor()));
}

TEST_CASE("churn: identity cases leave state and rng untouched") {
  Tensor x = Tensor::from_data({3, 1}, {0.4, -0.8, 1.5});

  SamplerConfig off = no_churn(30);
  Rng rng(7);
  Rng mirror = rng;
  auto [x_off, sigma_off] = churn(x, 1.0, off, rng);
  CHECK(sigma_off == 1.0);
  for (int i = 0; i < 3; ++i) CHECK(x_off.values()[i] == x.values()[i]);
  CHECK(rng.uniform() == mirror.uniform());

  SamplerConfig cfg;  // defaults: s_min 0.01, s_max 50
  Rng rng2(7);
  Rng mirror2 = rng2;
  auto [x_hi, sigma_hi] = churn(x, 60.0, cfg, rng2);
  CHECK(sigma_hi == 60.0);
  for (int i = 0; i < 3; ++i) CHECK(x_hi.values()[i] == x.values()[i]);
  auto [x_lo, sigma_lo] = churn(x, 0.005, cfg, rng2);
  CHECK(sigma_lo == 0.005);
  for (int i = 0; i < 3; ++i) CHECK(x_lo.values()[i] == x.values()[i]);
  CHECK(rng2.uniform() == mirror2.uniform());
}

TEST_CASE("churn: gamma cap and Monte-Carlo variance bookkeeping") {
  SamplerConfig cfg;  // s_churn 80, num_steps 30 -> gamma capped at sqrt(2)-1
  const int n = 10000;
  Tensor x = Tensor::zeros({n, 1});
  Rng rng(2025);
  auto [x_churned, sigma_hat] = churn(x, 1.0, cfg, rng);
  CHECK(sigma_hat == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));

  const double expected_var =
      (sigma_hat * sigma_hat - 1.0) * cfg.s_noise * cfg.s_noise;
  double mean = 0.0, sq = 0.0;
  for (double v : x_churned.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= n;
  const double var = sq / n - mean * mean;
  CHECK(std::fabs(var - expected_var) < 0.05 * expected_var);
}

TEST_CASE("sample: oracle denoiser recovery, determinism, output shape") {
  Rng init(3);
  Tensor x0 = randn({12, 2}, init);
  DenoiseFn oracle = [&x0](const Tensor& x, const Tensor&, double) {
    return Tensor::from_data(x.shape(), x0.values());
  };
  NoiseSchedule sched;

  Rng sample_rng(11);
  Tensor out = sample(oracle, {12, 2}, sched, no_churn(50), Tensor(), sample_rng);
  REQUIRE(out.shape() == Shape{12, 2});
  double inf = 0.0;
  for (int i = 0; i < 24; ++i) inf = std::max(inf, std::fabs(out.values()[i] - x0.values()[i]));
  CHECK(inf < 1e-2);

  SamplerConfig churny;  // defaults keep churn on
  Rng a(21), b(21);
  Tensor ra = sample(oracle, {12, 2}, sched, churny, Tensor(), a);
  Tensor rb = sample(oracle, {12, 2}, sched, churny, Tensor(), b);
  bool same = true;
  for (int i = 0; i < 24; ++i) same = same && ra.values()[i] == rb.values()[i];
  CHECK(same);

  // the x0 oracle contracts every seed onto x0, so probe seed sensitivity
  // with a denoiser whose fixed point depends on the noise path
  DenoiseFn half = [](const Tensor& x, const Tensor&, double) { return scale(x, 0.5); };
  Rng c(21), d(22);
  Tensor rc = sample(half, {12, 2}, sched, churny, Tensor(), c);
  Tensor rd = sample(half, {12, 2}, sched, churny, Tensor(), d);
  bool differs = false;
  for (int i = 0; i < 24; ++i) differs = differs || rc.values()[i] != rd.values()[i];
  CHECK(differs);
}

TEST_CASE("guided_sample: empty sensor set reproduces sample() bitwise") {
  DenoiseFn half = [](const Tensor& x, const Tensor&, double) { return scale(x, 0.5); };
  NoiseSchedule sched;
  SamplerConfig cfg;
  ObservationModel obs;  // no sensors
  Rng a(99), b(99);
  Tensor plain = sample(half, {6, 2}, sched, cfg, Tensor(), a);
  Tensor guided = guided_sample(half, {6, 2}, sched, cfg, Tensor(), obs, b);
  for (int i = 0; i < 12; ++i) CHECK(plain.values()[i] == guided.values()[i]);
}

TEST_CASE("guidance_gradient: hand-derived value for identity denoiser") {
  DenoiseFn ident = [](const Tensor& x, const Tensor&, double) { return x; };
  Tensor x = Tensor::from_data({3, 1}, {0.2, -0.4, 0.9});
  ObservationModel obs;
  obs.sensor_indices = {0};
  obs.noise_var = 0.3;
  obs.gamma_hat = 0.1;
  obs.observed_values = {0.7};
  const double sigma = 0.8;

  Tensor g = guidance_gradient(ident, x, Tensor(), sigma, obs);
  REQUIRE(g.defined());
  const double denom = obs.noise_var + sigma * sigma * obs.gamma_hat;
  CHECK(g.values()[0] == doctest::Approx((0.7 - 0.2) / denom).epsilon(1e-12));
  CHECK(g.values()[1] == 0.0);
  CHECK(g.values()[2] == 0.0);

  // observations equal to M(D) make the guidance vanish exactly
  obs.observed_values = {0.2};
  Tensor g0 = guidance_gradient(ident, x, Tensor(), sigma, obs);
  for (int i = 0; i < 3; ++i) CHECK(g0.values()[i] == 0.0);

  // a denoiser that ignores x has no pathway for guidance
  DenoiseFn blind = [](const Tensor& xin, const Tensor&, double) {
    return Tensor::zeros(xin.shape());
  };
  obs.observed_values = {0.7};
  Tensor gb = guidance_gradient(blind, x, Tensor(), sigma, obs);
  for (int i = 0; i < 3; ++i) CHECK(gb.values()[i] == 0.0);

  ObservationModel none;
  CHECK_FALSE(guidance_gradient(ident, x, Tensor(), sigma, none).defined());
}

TEST_CASE("ObservationModel: validation catches bad sensor sets") {
  MeshGraph g;
  g.num_nodes = 4;
  g.dim = 1;
  g.num_channels = 1;
  g.positions = {0.0, 1.0, 2.0, 3.0};
  g.features = {0.0, 0.0, 0.0, 0.0};
  g.boundary = {1, 0, 0, 1};

  ObservationModel ok;
  ok.sensor_indices = {1, 2};
  ok.noise_var = 0.5;
  ok.observed_values = {0.1, 0.2};
  CHECK_NOTHROW(ok.validate(g, 1));

  ObservationModel bad = ok;
  bad.sensor_indices = {0, 2};  // boundary node
  CHECK_THROWS(bad.validate(g, 1));
  bad = ok;
  bad.sensor_indices = {1, 4};  // out of range
  CHECK_THROWS(bad.validate(g, 1));
  bad = ok;
  bad.sensor_indices = {2, 2};  // duplicate
  bad.observed_values = {0.1, 0.2};
  CHECK_THROWS(bad.validate(g, 1));
  bad = ok;
  bad.noise_var = 0.0;
  CHECK_THROWS(bad.validate(g, 1));
  bad = ok;
  bad.gamma_hat = -0.1;
  CHECK_THROWS(bad.validate(g, 1));
  bad = ok;
  bad.observed_values = {0.1};  // wrong count
  CHECK_THROWS(bad.validate(g, 1));
}

TEST_CASE("guided_sample: linear-Gaussian toy matches the conjugate posterior") {
  const double S00 = 1.0, S01 = 0.6, S11 = 1.0, m0 = 0.3, m1 = -0.2;
  const double sy2 = 0.5, y = 1.1;
  DenoiseFn D = gaussian_denoiser(S00, S01, S11, m0, m1);

  // conditioning N(mu, Sigma) on y = x_0 + eta, eta ~ N(0, sy2)
  const double k = 1.0 / (S00 + sy2);
  const double pm0 = m0 + S00 * k * (y - m0);
  const double pm1 = m1 + S01 * k * (y - m0);
  const double c00 = S00 - S00 * S00 * k;
  const double c11 = S11 - S01 * S01 * k;

  NoiseSchedule sched;
  sched.sigma_min = 0.002;
  sched.sigma_max = 8.0;
  SamplerConfig cfg;
  cfg.num_steps = 64;
  cfg.s_churn = 40.0;
  cfg.s_noise = 1.0;
  cfg.s_min = 0.01;
  cfg.s_max = 4.0;

  ObservationModel obs;
  obs.sensor_indices = {0};
  obs.noise_var = sy2;
  // tuned so sigma^2*gamma_hat tracks M Sigma_post(sigma) M^T over the sigma
  // range where the posterior pull concentrates
  obs.gamma_hat = 0.45;
  obs.observed_values = {y};

  const int runs = 256;
  Rng rng(505);
  double a0 = 0.0, a1 = 0.0;
  for (int e = 0; e < runs; ++e) {
    Tensor s = guided_sample(D, {2, 1}, sched, cfg, Tensor(), obs, rng);
    a0 += s.values()[0];
    a1 += s.values()[1];
  }
  a0 /= runs;
  a1 /= runs;
  const double se0 = std::sqrt(c00 / runs);
  const double se1 = std::sqrt(c11 / runs);
  CHECK(std::fabs(a0 - pm0) < 3.0 * se0);
  CHECK(std::fabs(a1 - pm1) < 3.0 * se1);

  // determinism of the guided path
  Rng r1(31), r2(31);
  Tensor g1 = guided_sample(D, {2, 1}, sched, cfg, Tensor(), obs, r1);
  Tensor g2 = guided_sample(D, {2, 1}, sched, cfg, Tensor(), obs, r2);
  CHECK(g1.values()[0] == g2.values()[0]);
  CHECK(g1.values()[1] == g2.values()[1]);
}

TEST_CASE("guided_sample: more sensors never inflate the posterior spread") {
  const double S00 = 1.0, S01 = 0.6, S11 = 1.0, m0 = 0.3, m1 = -0.2;
  const double sy2 = 0.5;
  DenoiseFn D = gaussian_denoiser(S00, S01, S11, m0, m1);

  NoiseSchedule sched;
  sched.sigma_min = 0.002;
  sched.sigma_max = 8.0;
  SamplerConfig cfg;
  cfg.num_steps = 64;
  cfg.s_churn = 40.0;
  cfg.s_noise = 1.0;
  cfg.s_min = 0.01;
  cfg.s_max = 4.0;

  const int E = 128;
  auto trace_of = [&](const ObservationModel* obs, std::uint64_t seed) {
    Rng rng(seed);
    EnsembleForecast ens =
        sample_ensemble(D, {2, 1}, sched, cfg, Tensor(), obs, E, rng);
    REQUIRE(static_cast<int>(ens.members.size()) == E);
    REQUIRE(ens.uncertainty.size() == 2);
    double mean[2] = {0.0, 0.0}, sq[2] = {0.0, 0.0};
    for (const Tensor& m : ens.members) {
      for (int i = 0; i < 2; ++i) {
        mean[i] += m.values()[i];
        sq[i] += m.values()[i] * m.values()[i];
      }
    }
    double tr = 0.0;
    for (int i = 0; i < 2; ++i) {
      mean[i] /= E;
      tr += sq[i] / E - mean[i] * mean[i];
    }
    return tr;
  };

  ObservationModel one;
  one.sensor_indices = {0};
  one.noise_var = sy2;
  one.gamma_hat = 0.45;
  one.observed_values = {1.1};
  ObservationModel two = one;
  two.sensor_indices = {0, 1};
  two.observed_values = {1.1, 0.4};

  const double tr_none = trace_of(nullptr, 811);
  const double tr_one = trace_of(&one, 811);
  const double tr_two = trace_of(&two, 811);

  // prior trace is 2.0; each added sensor cuts it roughly in half, so a 15%
  // MC slack cannot mask a violation
  CHECK(tr_none == doctest::Approx(2.0).epsilon(0.3));
  CHECK(tr_one <= tr_none * 1.15);
  CHECK(tr_two <= tr_one * 1.15);
}

TEST_CASE("sample_ensemble: member count and uncertainty cache") {
  DenoiseFn half = [](const Tensor& x, const Tensor&, double) { return scale(x, 0.5); };
  NoiseSchedule sched;
  SamplerConfig cfg = no_churn(12);
  Rng rng(5);
  EnsembleForecast one = sample_ensemble(half, {3, 2}, sched, cfg, Tensor(), nullptr, 1, rng);
  CHECK(one.members.size() == 1);
  CHECK(one.uncertainty.empty());

  EnsembleForecast four = sample_ensemble(half, {3, 2}, sched, cfg, Tensor(), nullptr, 4, rng);
  CHECK(four.members.size() == 4);
  REQUIRE(four.uncertainty.size() == 3);

  // population std over two constant members is half the gap, averaged over channels
  Tensor ma = Tensor::from_data({2, 2}, {1.0, 3.0, 0.0, 0.0});
  Tensor mb = Tensor::from_data({2, 2}, {2.0, 1.0, 0.0, 4.0});
  std::vector<double> u = ensemble_uncertainty({ma, mb});
  REQUIRE(u.size() == 2);
  CHECK(u[0] == doctest::Approx(0.5 * (0.5 + 1.0)).epsilon(1e-12));
  CHECK(u[1] == doctest::Approx(0.5 * (0.0 + 2.0)).epsilon(1e-12));
  CHECK_THROWS(ensemble_uncertainty({ma}));
}
