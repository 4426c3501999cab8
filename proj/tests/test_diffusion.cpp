#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>

#include "splatpose/diffusion.hpp"

using namespace splatpose;

namespace {

NoiseSchedule two_level_schedule() {
  NoiseSchedule s;
  s.steps = 1;
  s.alphas = {0.8, 0.5};
  s.sigmas = {0.0, 0.0};
  s.validate();
  return s;
}

// Whole-chain Monte Carlo: run the sampler's stochastic counterpart n times,
// drawing the predictive noise fresh at each step, and accumulate the
// empirical mean/variance of x_0. The DDIM update is written out from the
// printed formula, independent of ddim_step.
struct ChainStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
};

ChainStats chain_oracle(const Eigen::VectorXd& a, const Eigen::VectorXd& b,
                        const Eigen::VectorXd& v, const NoiseSchedule& sched,
                        const Eigen::VectorXd& x_T, int runs, std::uint64_t seed) {
  const Eigen::Index d = x_T.size();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(d);
  Rng rng(seed);
  const Eigen::VectorXd sd = v.cwiseSqrt();
  for (int run = 0; run < runs; ++run) {
    Eigen::VectorXd x = x_T;
    for (int t = sched.steps; t >= 1; --t) {
      const double at = sched.alphas[t], ap = sched.alphas[t - 1], st = sched.sigmas[t];
      Eigen::VectorXd eps = a.cwiseProduct(x) + b;
      for (Eigen::Index i = 0; i < d; ++i) eps[i] += sd[i] * rng.normal();
      x = std::sqrt(ap) * (x - std::sqrt(1.0 - at) * eps) / std::sqrt(at) +
          std::sqrt(1.0 - ap - st * st) * eps;
    }
    sum += x;
    sumsq += x.cwiseProduct(x);
  }
  ChainStats out;
  out.mean = sum / double(runs);
  out.variance = sumsq / double(runs) - out.mean.cwiseProduct(out.mean);
  return out;
}

}  // namespace

TEST_CASE("ddim_step: equal alphas and zero sigma leave the state unchanged") {
  NoiseSchedule s;
  s.steps = 1;
  s.alphas = {0.7, 0.7 - 1e-15};  // alpha_{t-1} == alpha_t up to the strictness gate
  s.sigmas = {0.0, 0.0};
  LatentState state;
  state.mean = Eigen::VectorXd::LinSpaced(5, -1.0, 1.0);
  state.variance = Eigen::VectorXd::Zero(5);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Constant(5, 0.37);
  eps.variance = Eigen::VectorXd::Zero(5);
  const Eigen::VectorXd next = ddim_step(state, eps, s);
  CHECK((next - state.mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("ddim_step: zero noise prediction scales the state") {
  const NoiseSchedule s = two_level_schedule();
  LatentState state;
  state.mean = Eigen::VectorXd::Constant(3, 2.0);
  state.variance = Eigen::VectorXd::Zero(3);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Zero(3);
  eps.variance = Eigen::VectorXd::Zero(3);
  const Eigen::VectorXd next = ddim_step(state, eps, s);
  const double expect = std::sqrt(0.8 / 0.5) * 2.0;
  CHECK(next[0] == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("ddim_step scalar formula oracle") {
  const NoiseSchedule s = two_level_schedule();
  LatentState state;
  state.mean = Eigen::VectorXd::Constant(1, 1.0);
  state.variance = Eigen::VectorXd::Zero(1);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Constant(1, 1.0);
  eps.variance = Eigen::VectorXd::Zero(1);
  // independent direct evaluation of the update at x=1, eps=1
  const double expect =
      std::sqrt(0.8) * (1.0 - std::sqrt(1.0 - 0.5) * 1.0) / std::sqrt(0.5) +
      std::sqrt(1.0 - 0.8 - 0.0) * 1.0;
  CHECK(ddim_step(state, eps, s)[0] == Catch::Approx(expect).margin(1e-15));
}

TEST_CASE("ddim_step rejects a schedule-domain violation") {
  NoiseSchedule s;
  s.steps = 1;
  s.alphas = {0.8, 0.5};
  s.sigmas = {0.0, 0.6};  // 1 - 0.8 - 0.36 < 0
  LatentState state;
  state.mean = Eigen::VectorXd::Zero(2);
  state.variance = Eigen::VectorXd::Zero(2);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Zero(2);
  eps.variance = Eigen::VectorXd::Zero(2);
  CHECK_THROWS_AS(ddim_step(state, eps, s), ScheduleDomain);
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

namespace {

class ConstantPredictor final : public UncertainNoisePredictor {
 public:
  explicit ConstantPredictor(Eigen::VectorXd c) : c_(std::move(c)) {}
  NoisePrediction predict(const Eigen::VectorXd& mean, int) const override {
    return {c_, Eigen::VectorXd::Zero(mean.size())};
  }

 private:
  Eigen::VectorXd c_;
};

}  // namespace

TEST_CASE("mc_covariance of a constant predictor is exactly zero") {
  const Eigen::Index d = 6;
  LatentState state;
  state.mean = Eigen::VectorXd::LinSpaced(d, -3.0, 11.0);
  state.variance = Eigen::VectorXd::Constant(d, 0.83);
  state.t = 4;
  const ConstantPredictor pred(Eigen::VectorXd::Constant(d, 0.1));
  const Eigen::VectorXd cov = mc_covariance(state, pred, 333, 99);
  for (Eigen::Index i = 0; i < d; ++i) CHECK(cov[i] == 0.0);
}

TEST_CASE("mc_covariance with zero state variance is exactly zero") {
  const Eigen::Index d = 4;
  LatentState state;
  state.mean = Eigen::VectorXd::Constant(d, 1.5);
  state.variance = Eigen::VectorXd::Zero(d);
  state.t = 2;
  const AffinePredictor pred(Eigen::VectorXd::Constant(d, 0.7),
                             Eigen::VectorXd::Constant(d, -0.2),
                             Eigen::VectorXd::Constant(d, 0.01));
  const Eigen::VectorXd cov = mc_covariance(state, pred, 64, 5);
  for (Eigen::Index i = 0; i < d; ++i) CHECK(cov[i] == 0.0);
}

TEST_CASE("mc_covariance of an affine predictor approaches a .* Var(x)") {
  const Eigen::Index d = 8;
  Eigen::VectorXd a(d), var(d);
  Rng rng(17);
  for (Eigen::Index i = 0; i < d; ++i) {
    a[i] = rng.uniform(-1.0, 1.0);
    var[i] = rng.uniform(0.2, 2.0);
  }
  LatentState state;
  state.mean = Eigen::VectorXd::Constant(d, 0.5);
  state.variance = var;
  state.t = 3;
  const AffinePredictor pred(a, Eigen::VectorXd::Constant(d, 0.3),
                             Eigen::VectorXd::Constant(d, 0.05));
  const Eigen::VectorXd cov = mc_covariance(state, pred, 100000, 1234);
  for (Eigen::Index i = 0; i < d; ++i)
    CHECK(std::abs(cov[i] - a[i] * var[i]) <= 0.05 * std::abs(a[i] * var[i]));
}

TEST_CASE("propagate_variance: all-zero inputs give zero") {
  const NoiseSchedule s = two_level_schedule();
  LatentState state;
  state.mean = Eigen::VectorXd::Zero(3);
  state.variance = Eigen::VectorXd::Zero(3);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Zero(3);
  eps.variance = Eigen::VectorXd::Zero(3);
  const VarianceUpdate vu = propagate_variance(state, eps, Eigen::VectorXd::Zero(3), s);
  CHECK(vu.variance.cwiseAbs().maxCoeff() == 0.0);
  CHECK(vu.clamped == 0);
}

TEST_CASE("propagate_variance: single surviving term c^2 Var(eps)") {
  const NoiseSchedule s = two_level_schedule();
  LatentState state;
  state.mean = Eigen::VectorXd::Zero(2);
  state.variance = Eigen::VectorXd::Zero(2);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Zero(2);
  eps.variance = Eigen::VectorXd::Constant(2, 0.7);
  // independent evaluation of the printed coefficient
  const double c = std::sqrt(1.0 - 0.8) - std::sqrt(0.8) / 0.5 * std::sqrt(1.0 - 0.5);
  const VarianceUpdate vu = propagate_variance(state, eps, Eigen::VectorXd::Zero(2), s);
  CHECK(vu.variance[0] == Catch::Approx(c * c * 0.7).margin(1e-15));
  CHECK(vu.clamped == 0);
}

TEST_CASE("propagate_variance clamps negative results and reports the count") {
  const NoiseSchedule s = two_level_schedule();
  LatentState state;
  state.mean = Eigen::VectorXd::Zero(3);
  state.variance = Eigen::VectorXd::Zero(3);
  state.t = 1;
  NoisePrediction eps;
  eps.mean = Eigen::VectorXd::Zero(3);
  eps.variance = Eigen::VectorXd::Zero(3);
  // cross < 0, scale > 0: a negative cov makes -2*scale*cross*cov negative
  const VarianceUpdate vu =
      propagate_variance(state, eps, Eigen::VectorXd::Constant(3, -1.0), s);
  CHECK(vu.clamped == 3);
  CHECK(vu.variance.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("whole-chain oracle: propagated mean and variance track the sampled chain") {
  const int d = 6, steps = 6;
  const NoiseSchedule sched = NoiseSchedule::geometric(steps, 0.02, 0.35);
  Rng rng(21);
  Eigen::VectorXd a(d), b(d), v(d), x0(d);
  for (int i = 0; i < d; ++i) {
    a[i] = rng.uniform(-0.05, 0.05);
    b[i] = rng.uniform(-0.4, 0.4);
    v[i] = rng.uniform(0.005, 0.02);
    x0[i] = rng.uniform(-1.0, 1.0);
  }
  const AffinePredictor pred(a, b, v);
  LatentState x_T;
  x_T.mean = x0;
  x_T.variance = Eigen::VectorXd::Zero(d);
  x_T.t = steps;
  const SampleTrace trace = sample_chain(x_T, pred, sched, 4096, 777);

  // noiseless trajectory, written out independently
  Eigen::VectorXd x = x0;
  for (int t = steps; t >= 1; --t) {
    const double at = sched.alphas[t], ap = sched.alphas[t - 1];
    const Eigen::VectorXd eps = a.cwiseProduct(x) + b;
    x = std::sqrt(ap) * (x - std::sqrt(1.0 - at) * eps) / std::sqrt(at) +
        std::sqrt(1.0 - ap) * eps;
  }
  CHECK((trace.state.mean - x).cwiseAbs().maxCoeff() < 1e-9);

  const ChainStats mc = chain_oracle(a, b, v, sched, x0, 30000, 4242);
  CHECK((mc.mean - x).cwiseAbs().maxCoeff() < 0.01);
  for (int i = 0; i < d; ++i) {
    if (mc.variance[i] <= 1e-8) continue;
    CHECK(std::abs(trace.state.variance[i] - mc.variance[i]) <= 0.10 * mc.variance[i]);
  }
}

TEST_CASE("variance monotonicity under uncertainty injection") {
  const int d = 5, steps = 5;
  const NoiseSchedule sched = NoiseSchedule::geometric(steps, 0.03, 0.4);
  Rng rng(31);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd va(d), vb(d), cov(d);
  for (int i = 0; i < d; ++i) {
    va[i] = rng.uniform(0.0, 0.01);
    vb[i] = va[i] + rng.uniform(0.0, 0.01);
    cov[i] = rng.uniform(-1e-4, 1e-4);
  }
  LatentState sa{mean, Eigen::VectorXd::Zero(d), steps};
  LatentState sb{mean, Eigen::VectorXd::Zero(d), steps};
  for (int t = steps; t >= 1; --t) {
    sa.t = sb.t = t;
    NoisePrediction ea{Eigen::VectorXd::Zero(d), va}, eb{Eigen::VectorXd::Zero(d), vb};
    sa.variance = propagate_variance(sa, ea, cov, sched).variance;
    sb.variance = propagate_variance(sb, eb, cov, sched).variance;
  }
  for (int i = 0; i < d; ++i) CHECK(sa.variance[i] <= sb.variance[i] + 1e-18);
}

TEST_CASE("sampler determinism: identical seeds give bit-identical output") {
  const int d = 9, steps = 4;
  const NoiseSchedule sched = NoiseSchedule::geometric(steps, 0.05, 0.4);
  Rng rng(41);
  Eigen::VectorXd a(d), b(d), v(d);
  for (int i = 0; i < d; ++i) {
    a[i] = rng.uniform(-0.2, 0.2);
    b[i] = rng.uniform(-0.5, 0.5);
    v[i] = rng.uniform(0.001, 0.03);
  }
  const AffinePredictor pred(a, b, v);
  LatentState x_T;
  x_T.mean = Eigen::VectorXd::Constant(d, 0.25);
  x_T.variance = Eigen::VectorXd::Zero(d);
  x_T.t = steps;
  const SampleTrace t1 = sample_chain(x_T, pred, sched, 64, 909);
  const SampleTrace t2 = sample_chain(x_T, pred, sched, 64, 909);
  CHECK(std::memcmp(t1.state.mean.data(), t2.state.mean.data(), sizeof(double) * d) == 0);
  CHECK(std::memcmp(t1.state.variance.data(), t2.state.variance.data(), sizeof(double) * d) ==
        0);
}

TEST_CASE("zero uncertainty in, zero uncertainty out") {
  const int w = 4, h = 3, steps = 5;
  const NoiseSchedule sched = NoiseSchedule::geometric(steps, 0.02, 0.4);
  const Eigen::Index d = w * h * 3;
  const AffinePredictor pred(Eigen::VectorXd::Constant(d, 0.1),
                             Eigen::VectorXd::Constant(d, 0.05), Eigen::VectorXd::Zero(d));
  LatentState x_T;
  x_T.mean = Eigen::VectorXd::Constant(d, 0.4);
  x_T.variance = Eigen::VectorXd::Zero(d);
  x_T.t = steps;
  const UncertainImage img = sample_with_uncertainty(x_T, pred, sched, w, h, 16, 3);
  for (double v : img.variance.data) CHECK(v == 0.0);
  for (double c : img.rgb.data) {
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("sampler config defaults follow the reference settings") {
  const SamplerConfig cfg;
  CHECK(cfg.steps == 50);
  CHECK(cfg.samples_per_step == 20);
  CHECK(cfg.init_variance == 0.0);
  const SamplerConfig parsed = SamplerConfig::from_json(json::object());
  CHECK(parsed.steps == 50);
  CHECK(parsed.samples_per_step == 20);
}

TEST_CASE("modulate_confidence formula and clamps") {
  Image<double> conf(2, 1), var(2, 1);
  conf.at(0, 0) = 1.0;
  var.at(0, 0) = 1.0;
  conf.at(1, 0) = 0.0;
  var.at(1, 0) = 5.0;
  const Image<double> out = modulate_confidence(conf, var, 1e-2, 1e6);
  CHECK(out.at(0, 0) == Catch::Approx(std::exp(1.0)).margin(1e-12));
  CHECK(out.at(1, 0) == Catch::Approx(1.0).margin(1e-12));

  Image<double> zvar(1, 1, 0.0), c1(1, 1, 1.0);
  const Image<double> capped = modulate_confidence(c1, zvar, 1e-2, 1e6);
  CHECK(capped.at(0, 0) == 1e6);
}

TEST_CASE("uncertain image binary round trip") {
  UncertainImage img;
  img.rgb = Image3(5, 4);
  img.variance = Image<double>(5, 4);
  Rng rng(55);
  for (auto& v : img.rgb.data) v = rng.uniform();
  for (auto& v : img.variance.data) v = rng.uniform(0.0, 0.2);
  save_uncertain_image(img, "diffusion_roundtrip");
  const UncertainImage back = load_uncertain_image("diffusion_roundtrip");
  CHECK(std::memcmp(back.rgb.data.data(), img.rgb.data.data(),
                    img.rgb.data.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(back.variance.data.data(), img.variance.data.data(),
                    img.variance.data.size() * sizeof(double)) == 0);
  std::remove("diffusion_roundtrip.json");
  std::remove("diffusion_roundtrip.rgb.f64");
  std::remove("diffusion_roundtrip.var.f64");
}

TEST_CASE("noise schedule json round trip and validation") {
  const NoiseSchedule s = NoiseSchedule::linear(8, 0.9995, 0.7);
  const NoiseSchedule back = NoiseSchedule::from_json(s.to_json());
  CHECK(back.steps == 8);
  CHECK(back.alphas == s.alphas);

  NoiseSchedule bad;
  bad.steps = 1;
  bad.alphas = {0.5, 0.8};  // increasing: invalid
  bad.sigmas = {0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
