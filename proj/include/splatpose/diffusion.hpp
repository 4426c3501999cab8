#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>

#include "splatpose/common.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Noise schedule
//
// alphas holds the cumulative schedule for t = 0..T (T+1 entries), strictly
// decreasing in t; sampling runs t = T..1 so alpha increases toward 1 along
// the way. sigmas holds one entry per step t = 1..T (index 0 unused).
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  std::vector<double> alphas;  // size T+1, index by t
  std::vector<double> sigmas;  // size T+1, sigmas[0] unused
  int steps = 0;               // T

  void validate() const {
    if (int(alphas.size()) != steps + 1 || int(sigmas.size()) != steps + 1)
      throw ConfigError("noise schedule vector sizes do not match step count");
    for (int t = 0; t <= steps; ++t)
      if (!(alphas[t] > 0.0 && alphas[t] <= 1.0))
        throw ConfigError("schedule alphas must lie in (0,1]");
    for (int t = 1; t <= steps; ++t) {
      if (!(alphas[t] < alphas[t - 1]))
        throw ConfigError("schedule alphas must be strictly decreasing in t");
      if (sigmas[t] < 0.0) throw ConfigError("schedule sigmas must be non-negative");
      if (1.0 - alphas[t - 1] - sigmas[t] * sigmas[t] < 0.0)
        throw ConfigError("schedule violates 1 - alpha_{t-1} - sigma_t^2 >= 0");
    }
  }

  // Linear ramp in alpha from alpha0 (t=0 end) down to alphaT, deterministic
  // sampling (all sigmas zero).
  static NoiseSchedule linear(int steps, double alpha0, double alphaT) {
    NoiseSchedule s;
    s.steps = steps;
    s.alphas.resize(steps + 1);
    s.sigmas.assign(steps + 1, 0.0);
    for (int t = 0; t <= steps; ++t)
      s.alphas[t] = alpha0 + (alphaT - alpha0) * double(t) / double(steps);
    s.validate();
    return s;
  }

  // Geometric decay of (1 - alpha) toward the clean end:
  // alpha_t = 1 - d_max * decay^(T - t), decay in (0,1). Keeps alpha near 1
  // throughout, which is the regime where the printed variance recursion
  // tracks the sampled chain tightly.
  static NoiseSchedule geometric(int steps, double d_max, double decay) {
    NoiseSchedule s;
    s.steps = steps;
    s.alphas.resize(steps + 1);
    s.sigmas.assign(steps + 1, 0.0);
    for (int t = 0; t <= steps; ++t)
      s.alphas[t] = 1.0 - d_max * std::pow(decay, double(steps - t));
    s.validate();
    return s;
  }

  // alpha_0 = 1 exactly (the final DDIM step lands on the one-step x0
  // estimate with no residual noise term); 1 - alpha_t grows geometrically
  // with t starting from d1 at t = 1.
  static NoiseSchedule terminal(int steps, double d1, double ratio) {
    NoiseSchedule s;
    s.steps = steps;
    s.alphas.resize(steps + 1);
    s.sigmas.assign(steps + 1, 0.0);
    s.alphas[0] = 1.0;
    for (int t = 1; t <= steps; ++t) s.alphas[t] = 1.0 - d1 * std::pow(ratio, double(t - 1));
    s.validate();
    return s;
  }

  static NoiseSchedule from_json(const json& j) {
    NoiseSchedule s;
    s.alphas = j.at("alphas").get<std::vector<double>>();
    s.sigmas = j.at("sigmas").get<std::vector<double>>();
    s.steps = int(s.alphas.size()) - 1;
    s.validate();
    return s;
  }

  json to_json() const { return json{{"alphas", alphas}, {"sigmas", sigmas}}; }
};

// ---------------------------------------------------------------------------
// Latent state and noise prediction
// ---------------------------------------------------------------------------

struct LatentState {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // elementwise, >= 0
  int t = 0;

  void validate() const {
    if (mean.size() != variance.size())
      throw DimensionMismatch("latent mean/variance size mismatch");
    if (!mean.allFinite()) throw ConfigError("latent mean must be finite");
    for (Eigen::Index i = 0; i < variance.size(); ++i)
      if (!(variance[i] >= 0.0) || !std::isfinite(variance[i]))
        throw ConfigError("latent variance must be finite and non-negative");
  }
};

struct NoisePrediction {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;  // elementwise predictive variance, >= 0
};

// Predictive distribution of the denoiser at a given state: mean prediction
// plus an elementwise variance standing in for a last-layer Laplace posterior.
// Realizations must be deterministic in (mean, t) and callable concurrently.
class UncertainNoisePredictor {
 public:
  virtual ~UncertainNoisePredictor() = default;
  virtual NoisePrediction predict(const Eigen::VectorXd& mean, int t) const = 0;
};

// eps(x) = a .* x + b with a fixed parameter variance per element.
class AffinePredictor final : public UncertainNoisePredictor {
 public:
  AffinePredictor(Eigen::VectorXd a, Eigen::VectorXd b, Eigen::VectorXd var)
      : a_(std::move(a)), b_(std::move(b)), var_(std::move(var)) {}

  NoisePrediction predict(const Eigen::VectorXd& mean, int /*t*/) const override {
    return {a_.cwiseProduct(mean) + b_, var_};
  }

  const Eigen::VectorXd& gain() const { return a_; }

 private:
  Eigen::VectorXd a_, b_, var_;
};

// Drives the deterministic chain toward a fixed target: the mean prediction
// is the noise that makes the one-step x0 estimate equal the target, so with
// alpha_0 = 1 the chain lands on the target exactly. The predictive variance
// is concentrated on the final step and pre-divided by that step's recursion
// coefficient, so the propagated Var(x_0) equals target_variance exactly.
class ViewNoisePredictor final : public UncertainNoisePredictor {
 public:
  ViewNoisePredictor(Eigen::VectorXd target, Eigen::VectorXd target_variance,
                     const NoiseSchedule& sched)
      : target_(std::move(target)), sched_(&sched) {
    const double a1 = sched.alphas[1];
    const double a0 = sched.alphas[0];
    const double s1 = sched.sigmas[1];
    const double c1 = std::sqrt(std::max(0.0, 1.0 - a0 - s1 * s1)) -
                      std::sqrt(a0) / a1 * std::sqrt(1.0 - a1);
    final_step_variance_ = target_variance / (c1 * c1);
  }

  NoisePrediction predict(const Eigen::VectorXd& mean, int t) const override {
    const double at = sched_->alphas[t];
    NoisePrediction out;
    out.mean = (mean - std::sqrt(at) * target_) / std::sqrt(1.0 - at);
    out.variance = t == 1 ? final_step_variance_
                          : Eigen::VectorXd::Zero(mean.size());
    return out;
  }

 private:
  Eigen::VectorXd target_;
  Eigen::VectorXd final_step_variance_;
  const NoiseSchedule* sched_;
};

// ---------------------------------------------------------------------------
// DDIM mean update
// ---------------------------------------------------------------------------

struct StepCoeffs {
  double scale;  // sqrt(a_{t-1}) / sqrt(a_t)
  double cross;  // sqrt(1 - a_{t-1} - s_t^2) - (sqrt(a_{t-1}) / a_t) sqrt(1 - a_t)
};

inline StepCoeffs step_coeffs(const NoiseSchedule& sched, int t) {
  if (t < 1 || t > sched.steps) throw ConfigError("step index outside schedule");
  const double at = sched.alphas[t];
  const double ap = sched.alphas[t - 1];
  const double st = sched.sigmas[t];
  const double arg = 1.0 - ap - st * st;
  if (arg < 0.0) throw ScheduleDomain("1 - alpha_{t-1} - sigma_t^2 < 0");
  StepCoeffs c;
  c.scale = std::sqrt(ap) / std::sqrt(at);
  c.cross = std::sqrt(arg) - std::sqrt(ap) / at * std::sqrt(1.0 - at);
  return c;
}

// Mean of x_{t-1} from the deterministic DDIM update:
//   sqrt(a_{t-1}) (x_t - sqrt(1-a_t) eps) / sqrt(a_t) + sqrt(1 - a_{t-1} - s_t^2) eps
inline Eigen::VectorXd ddim_step(const LatentState& state, const NoisePrediction& eps,
                                 const NoiseSchedule& sched) {
  if (state.t < 1 || state.t > sched.steps)
    throw ConfigError("ddim_step requires 1 <= t <= T");
  const double at = sched.alphas[state.t];
  const double ap = sched.alphas[state.t - 1];
  const double st = sched.sigmas[state.t];
  const double arg = 1.0 - ap - st * st;
  if (arg < 0.0) throw ScheduleDomain("1 - alpha_{t-1} - sigma_t^2 < 0");
  return std::sqrt(ap) * (state.mean - std::sqrt(1.0 - at) * eps.mean) / std::sqrt(at) +
         std::sqrt(arg) * eps.mean;
}

// ---------------------------------------------------------------------------
// Monte Carlo cross-covariance Cov(x_t, eps(x_t))
//
// Samples are drawn elementwise Gaussian around state.mean with the tracked
// variance. Computed in centered form sum((x_i - xbar) .* (eps_i - eps_1))/S,
// algebraically equal to the product-of-means estimator with the empirical
// sample mean; the centering makes a constant predictor (and a zero-variance
// state) yield the exact zero vector with no floating-point residue.
// ---------------------------------------------------------------------------

inline Eigen::VectorXd mc_covariance(const LatentState& state,
                                     const UncertainNoisePredictor& predictor, int samples,
                                     std::uint64_t rng_seed) {
  if (samples < 2) throw ConfigError("mc_covariance needs at least 2 samples");
  state.validate();
  const Eigen::Index d = state.mean.size();
  if (state.variance.maxCoeff() == 0.0) return Eigen::VectorXd::Zero(d);

  Rng rng(rng_seed);
  const Eigen::VectorXd stddev = state.variance.cwiseSqrt();
  std::vector<Eigen::VectorXd> xs(samples), es(samples);
  Eigen::VectorXd xbar = Eigen::VectorXd::Zero(d);
  for (int s = 0; s < samples; ++s) {
    Eigen::VectorXd x(d);
    for (Eigen::Index i = 0; i < d; ++i) x[i] = state.mean[i] + stddev[i] * rng.normal();
    es[s] = predictor.predict(x, state.t).mean;
    xbar += x;
    xs[s] = std::move(x);
  }
  xbar /= double(samples);

  Eigen::VectorXd cov = Eigen::VectorXd::Zero(d);
  for (int s = 0; s < samples; ++s)
    cov += (xs[s] - xbar).cwiseProduct(es[s] - es[0]);
  return cov / double(samples);
}

// ---------------------------------------------------------------------------
// Variance recursion for the DDIM step, evaluated exactly as printed:
//   Var(x_{t-1}) = (a_{t-1}/a_t) Var(x_t) - 2 (sqrt(a_{t-1})/sqrt(a_t)) c Cov
//                  + c^2 Var(eps_t)
// with c = sqrt(1 - a_{t-1} - s_t^2) - (sqrt(a_{t-1})/a_t) sqrt(1 - a_t).
// Negative elementwise results (possible through the Monte Carlo cross term)
// are clamped to zero and counted.
// ---------------------------------------------------------------------------

struct VarianceUpdate {
  Eigen::VectorXd variance;
  int clamped = 0;
};

inline VarianceUpdate propagate_variance(const LatentState& state, const NoisePrediction& eps,
                                         const Eigen::VectorXd& cov,
                                         const NoiseSchedule& sched) {
  const StepCoeffs c = step_coeffs(sched, state.t);
  const double at = sched.alphas[state.t];
  const double ap = sched.alphas[state.t - 1];
  VarianceUpdate out;
  out.variance = (ap / at) * state.variance - 2.0 * c.scale * c.cross * cov +
                 c.cross * c.cross * eps.variance;
  for (Eigen::Index i = 0; i < out.variance.size(); ++i) {
    if (out.variance[i] < 0.0) {
      out.variance[i] = 0.0;
      ++out.clamped;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full sampler with uncertainty propagation
// ---------------------------------------------------------------------------

struct SamplerConfig {
  int steps = 50;            // T
  int samples_per_step = 20; // S for the covariance estimate
  double init_variance = 0.0;
  std::uint64_t rng_seed = 0;

  static SamplerConfig from_json(const json& j) {
    SamplerConfig c;
    c.steps = j.value("steps", 50);
    c.samples_per_step = j.value("samples_per_step", 20);
    c.init_variance = j.value("init_variance", 0.0);
    c.rng_seed = j.value("rng_seed", std::uint64_t(0));
    return c;
  }

  json to_json() const {
    return json{{"steps", steps},
                {"samples_per_step", samples_per_step},
                {"init_variance", init_variance},
                {"rng_seed", rng_seed}};
  }
};

struct SampleTrace {
  LatentState state;   // final t = 0 state
  int clamped = 0;     // total variance clamps across the chain
};

inline SampleTrace sample_chain(const LatentState& x_T,
                                const UncertainNoisePredictor& predictor,
                                const NoiseSchedule& sched, int samples_per_step,
                                std::uint64_t rng_seed) {
  if (x_T.t != sched.steps) throw ConfigError("initial state must sit at t = T");
  x_T.validate();
  SampleTrace trace;
  trace.state = x_T;
  for (int t = sched.steps; t >= 1; --t) {
    trace.state.t = t;
    const NoisePrediction eps = predictor.predict(trace.state.mean, t);
    const Eigen::VectorXd cov = mc_covariance(trace.state, predictor, samples_per_step,
                                              Rng::mix(rng_seed, std::uint64_t(t)));
    const Eigen::VectorXd next_mean = ddim_step(trace.state, eps, sched);
    const VarianceUpdate vu = propagate_variance(trace.state, eps, cov, sched);
    trace.state.mean = next_mean;
    trace.state.variance = vu.variance;
    trace.clamped += vu.clamped;
    trace.state.t = t - 1;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Uncertain image: the final pixel-space mean reshaped to rgb plus the
// per-pixel variance (channel mean of the three color-channel variances).
// ---------------------------------------------------------------------------

struct UncertainImage {
  Image3 rgb;             // intensities in [0,1]
  Image<double> variance; // per pixel, >= 0
};

inline UncertainImage sample_with_uncertainty(const LatentState& x_T,
                                              const UncertainNoisePredictor& predictor,
                                              const NoiseSchedule& sched, int width, int height,
                                              int samples_per_step, std::uint64_t rng_seed) {
  if (x_T.mean.size() != Eigen::Index(width) * height * 3)
    throw DimensionMismatch("latent dimension does not match width*height*3");
  const SampleTrace trace = sample_chain(x_T, predictor, sched, samples_per_step, rng_seed);
  UncertainImage img;
  img.rgb = Image3(width, height);
  img.variance = Image<double>(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Eigen::Index base = (Eigen::Index(y) * width + x) * 3;
      double var_sum = 0.0;
      for (int c = 0; c < 3; ++c) {
        img.rgb.at(x, y, c) = clamp01(trace.state.mean[base + c]);
        var_sum += trace.state.variance[base + c];
      }
      img.variance.at(x, y) = var_sum / 3.0;
    }
  return img;
}

// ---------------------------------------------------------------------------
// Confidence modulation: C = min(exp(Chat / max(Var, var_floor)), conf_cap)
// ---------------------------------------------------------------------------

inline Image<double> modulate_confidence(const Image<double>& conf, const Image<double>& var,
                                         double var_floor, double conf_cap) {
  if (!var.same_shape(conf.width, conf.height))
    throw DimensionMismatch("confidence and variance maps differ in shape");
  Image<double> out(conf.width, conf.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::max(var.data[i], var_floor);
    out.data[i] = std::min(std::exp(conf.data[i] / v), conf_cap);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary export: two flat float64 arrays plus a JSON header
// ---------------------------------------------------------------------------

inline void save_uncertain_image(const UncertainImage& img, const std::string& stem) {
  json header{{"width", img.rgb.width}, {"height", img.rgb.height}, {"channels", 3},
              {"dtype", "float64"}};
  std::ofstream h(stem + ".json");
  if (!h) throw IoError("cannot write " + stem + ".json");
  h << header.dump(2) << "\n";
  std::ofstream rgb(stem + ".rgb.f64", std::ios::binary);
  rgb.write(reinterpret_cast<const char*>(img.rgb.data.data()),
            std::streamsize(img.rgb.data.size() * sizeof(double)));
  std::ofstream var(stem + ".var.f64", std::ios::binary);
  var.write(reinterpret_cast<const char*>(img.variance.data.data()),
            std::streamsize(img.variance.data.size() * sizeof(double)));
}

inline UncertainImage load_uncertain_image(const std::string& stem) {
  std::ifstream h(stem + ".json");
  if (!h) throw IoError("cannot read " + stem + ".json");
  json header = json::parse(h);
  const int w = header.at("width").get<int>();
  const int hgt = header.at("height").get<int>();
  UncertainImage img;
  img.rgb = Image3(w, hgt);
  img.variance = Image<double>(w, hgt);
  std::ifstream rgb(stem + ".rgb.f64", std::ios::binary);
  rgb.read(reinterpret_cast<char*>(img.rgb.data.data()),
           std::streamsize(img.rgb.data.size() * sizeof(double)));
  std::ifstream var(stem + ".var.f64", std::ios::binary);
  var.read(reinterpret_cast<char*>(img.variance.data.data()),
           std::streamsize(img.variance.data.size() * sizeof(double)));
  if (!rgb || !var) throw IoError("binary image arrays truncated: " + stem);
  return img;
}

}  // namespace splatpose
