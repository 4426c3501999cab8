#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <functional>
#include <numeric>

#include "splatpose/geometry.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Isotropic Gaussian object field
// ---------------------------------------------------------------------------

struct IsotropicGaussian {
  Eigen::Vector3d position{0, 0, 0};  // object-canonical frame, meters
  double radius = 0.01;               // > 0
  Eigen::Vector3d color{0.5, 0.5, 0.5};
  double opacity = 0.9;               // (0, 1]
};

struct GaussianField {
  std::vector<IsotropicGaussian> gaussians;
  std::string frame = "object";  // canonical frame identifier

  std::size_t size() const { return gaussians.size(); }

  void validate() const {
    for (const auto& g : gaussians) {
      if (!(g.radius > 0)) throw ConfigError("gaussian radius must be positive");
      if (!(g.opacity > 0 && g.opacity <= 1)) throw ConfigError("opacity must be in (0,1]");
      for (int c = 0; c < 3; ++c)
        if (g.color[c] < 0 || g.color[c] > 1) throw ConfigError("color must be in [0,1]");
    }
  }
};

inline void save_ply(const GaussianField& field, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "ply\nformat ascii 1.0\nelement vertex " << field.size() << "\n"
    << "property double x\nproperty double y\nproperty double z\n"
    << "property double radius\nproperty double r\nproperty double g\nproperty double b\n"
    << "property double opacity\nend_header\n";
  f.precision(17);
  for (const auto& g : field.gaussians)
    f << g.position.x() << " " << g.position.y() << " " << g.position.z() << " " << g.radius
      << " " << g.color.x() << " " << g.color.y() << " " << g.color.z() << " " << g.opacity
      << "\n";
}

inline GaussianField load_field_ply(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  std::size_t count = 0;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "element") {
      std::string what;
      ss >> what >> count;
    } else if (tok == "end_header") {
      break;
    }
  }
  GaussianField field;
  field.gaussians.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(f, line)) throw IoError("ply truncated: " + path);
    std::istringstream ss(line);
    IsotropicGaussian g;
    ss >> g.position.x() >> g.position.y() >> g.position.z() >> g.radius >> g.color.x() >>
        g.color.y() >> g.color.z() >> g.opacity;
    field.gaussians.push_back(g);
  }
  field.validate();
  return field;
}

// ---------------------------------------------------------------------------
// Renderer: front-to-back alpha compositing of projected isotropic Gaussians.
//
// Per-pixel weight exp(-d^2 / (2 r_px^2)) with r_px the projected radius,
// alpha = opacity * weight (capped just under 1). Silhouette is accumulated
// alpha; depth is the alpha-weighted mean of Gaussian-center depths. Global
// front-to-back order by center depth, ties broken by index.
// ---------------------------------------------------------------------------

struct RenderOutput {
  Image3 color;
  Image<double> depth;
  Image<double> silhouette;
};

namespace detail {

constexpr double kAlphaCap = 0.9999;
constexpr double kStopTransmittance = 1e-6;
constexpr double kBboxSigmas = 3.5;
constexpr int kTile = 8;

struct Splat {
  int id = -1;          // index into the field
  Eigen::Vector3d p_cam;
  double u = 0, v = 0, z = 0, r_px = 0;
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bbox
};

struct SplatScene {
  std::vector<Splat> splats;              // depth-sorted
  std::vector<std::vector<int>> tiles;    // indices into splats, in sorted order
  int tiles_x = 0, tiles_y = 0;
  Eigen::Matrix3d rot;                    // object -> camera rotation
};

inline SplatScene prepare_splats(const GaussianField& field, const Camera& cam,
                                 const RigidTransform& t_co) {
  SplatScene scene;
  scene.rot = t_co.rotation_matrix();
  const double rho = 0.5 * (cam.fx + cam.fy);
  scene.splats.reserve(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    const auto& g = field.gaussians[i];
    Splat s;
    s.id = int(i);
    s.p_cam = scene.rot * g.position + t_co.translation;
    if (s.p_cam.z() <= 1e-9) continue;  // behind the camera
    s.z = s.p_cam.z();
    s.u = cam.fx * s.p_cam.x() / s.z + cam.cx;
    s.v = cam.fy * s.p_cam.y() / s.z + cam.cy;
    s.r_px = rho * g.radius / s.z;
    const double ext = kBboxSigmas * s.r_px;
    s.x0 = std::max(0, int(std::floor(s.u - ext)));
    s.x1 = std::min(cam.width - 1, int(std::ceil(s.u + ext)));
    s.y0 = std::max(0, int(std::floor(s.v - ext)));
    s.y1 = std::min(cam.height - 1, int(std::ceil(s.v + ext)));
    if (s.x0 > s.x1 || s.y0 > s.y1) continue;
    scene.splats.push_back(s);
  }
  std::sort(scene.splats.begin(), scene.splats.end(), [](const Splat& a, const Splat& b) {
    return a.z != b.z ? a.z < b.z : a.id < b.id;
  });
  scene.tiles_x = (cam.width + kTile - 1) / kTile;
  scene.tiles_y = (cam.height + kTile - 1) / kTile;
  scene.tiles.assign(std::size_t(scene.tiles_x) * scene.tiles_y, {});
  for (std::size_t k = 0; k < scene.splats.size(); ++k) {
    const Splat& s = scene.splats[k];
    for (int ty = s.y0 / kTile; ty <= s.y1 / kTile; ++ty)
      for (int tx = s.x0 / kTile; tx <= s.x1 / kTile; ++tx)
        scene.tiles[std::size_t(ty) * scene.tiles_x + tx].push_back(int(k));
  }
  return scene;
}

// Walks the pixel's splat list front to back, invoking fn(splat, alpha, T).
// Returns early when transmittance drops below the stop threshold.
template <typename Fn>
inline void composite_pixel(const SplatScene& scene, const GaussianField& field, int px, int py,
                            Fn&& fn) {
  const auto& list =
      scene.tiles[std::size_t(py / kTile) * scene.tiles_x + px / kTile];
  const double sx = px + 0.5, sy = py + 0.5;
  double transmittance = 1.0;
  for (int k : list) {
    const Splat& s = scene.splats[k];
    if (px < s.x0 || px > s.x1 || py < s.y0 || py > s.y1) continue;
    const double dx = sx - s.u, dy = sy - s.v;
    const double d2 = dx * dx + dy * dy;
    const double w = std::exp(-d2 / (2.0 * s.r_px * s.r_px));
    const double alpha = std::min(field.gaussians[s.id].opacity * w, kAlphaCap);
    fn(s, w, alpha, transmittance);
    transmittance *= (1.0 - alpha);
    if (transmittance < kStopTransmittance) break;
  }
}

}  // namespace detail

inline RenderOutput render(const GaussianField& field, const Camera& cam,
                           const RigidTransform& t_co,
                           const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
  cam.validate();
  RenderOutput out;
  out.color = Image3(cam.width, cam.height);
  out.depth = Image<double>(cam.width, cam.height);
  out.silhouette = Image<double>(cam.width, cam.height);
  const detail::SplatScene scene = detail::prepare_splats(field, cam, t_co);
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      double acc_a = 0.0, acc_d = 0.0;
      Eigen::Vector3d acc_c = Eigen::Vector3d::Zero();
      detail::composite_pixel(scene, field, px, py,
                              [&](const detail::Splat& s, double, double alpha, double T) {
                                const double c = alpha * T;
                                acc_a += c;
                                acc_d += c * s.z;
                                acc_c += c * field.gaussians[s.id].color;
                              });
      out.silhouette.at(px, py) = acc_a;
      out.depth.at(px, py) = acc_a > 1e-12 ? acc_d / acc_a : 0.0;
      const Eigen::Vector3d col = acc_c + (1.0 - acc_a) * background;
      for (int c = 0; c < 3; ++c) out.color.at(px, py, c) = col[c];
    }
  return out;
}

// ---------------------------------------------------------------------------
// Mapping loss
//
//   L = sum_p conf(p) [S(p) > 0.99] ( |D(p) - D_obs(p)| + 0.5 sum_c |C - I| )
//
// Pixels with invalid observed depth (non-finite or <= 0) contribute the
// color term only.
// ---------------------------------------------------------------------------

constexpr double kSilhouetteGate = 0.99;

struct MapGradients {
  double loss = 0.0;
  // per gaussian, w.r.t. the natural parameters
  std::vector<Eigen::Vector3d> d_position;
  std::vector<double> d_radius;
  std::vector<Eigen::Vector3d> d_color;
  std::vector<double> d_opacity;
};

namespace detail {

inline void check_maps(const Camera& cam, const Image3& obs_color,
                       const Image<double>& obs_depth, const Image<double>& conf) {
  if (!obs_color.same_shape(cam.width, cam.height) ||
      !obs_depth.same_shape(cam.width, cam.height) || !conf.same_shape(cam.width, cam.height))
    throw DimensionMismatch("observation maps do not match the camera resolution");
}

// Shared forward/backward walk. When grads == nullptr only the loss is
// accumulated.
inline double mapping_pass(const GaussianField& field, const Camera& cam,
                           const RigidTransform& t_co, const Image3& obs_color,
                           const Image<double>& obs_depth, const Image<double>& conf,
                           MapGradients* grads) {
  check_maps(cam, obs_color, obs_depth, conf);
  const SplatScene scene = prepare_splats(field, cam, t_co);
  const double rho = 0.5 * (cam.fx + cam.fy);
  double loss = 0.0;

  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      const double cw = conf.at(px, py);
      if (cw == 0.0) continue;
      // forward
      double acc_a = 0.0, acc_d = 0.0;
      Eigen::Vector3d acc_c = Eigen::Vector3d::Zero();
      composite_pixel(scene, field, px, py,
                      [&](const Splat& s, double, double alpha, double T) {
                        const double c = alpha * T;
                        acc_a += c;
                        acc_d += c * s.z;
                        acc_c += c * field.gaussians[s.id].color;
                      });
      if (acc_a <= kSilhouetteGate) continue;

      const double d_obs = obs_depth.at(px, py);
      const bool depth_valid = std::isfinite(d_obs) && d_obs > 0.0;
      const double depth_render = acc_d / acc_a;
      Eigen::Vector3d color_err;
      for (int c = 0; c < 3; ++c) color_err[c] = acc_c[c] - obs_color.at(px, py, c);
      double pixel_loss = 0.5 * color_err.cwiseAbs().sum();
      if (depth_valid) pixel_loss += std::abs(depth_render - d_obs);
      loss += cw * pixel_loss;
      if (!grads) continue;

      // adjoint of the accumulators
      const double gD = depth_valid ? cw * (depth_render > d_obs ? 1.0 : -1.0) : 0.0;
      const double g_acc_d = gD / acc_a;
      double g_acc_a = -gD * acc_d / (acc_a * acc_a);
      Eigen::Vector3d g_acc_c;
      for (int c = 0; c < 3; ++c) g_acc_c[c] = cw * 0.5 * (color_err[c] > 0 ? 1.0 : -1.0);

      // backward walk: suffix sums of the remaining composited quantities
      double pre_a = 0.0, pre_d = 0.0;
      Eigen::Vector3d pre_c = Eigen::Vector3d::Zero();
      composite_pixel(scene, field, px, py, [&](const Splat& s, double w, double alpha,
                                                double T) {
        const auto& g = field.gaussians[s.id];
        const double c = alpha * T;
        pre_a += c;
        pre_d += c * s.z;
        pre_c += c * g.color;
        const double suf_a = acc_a - pre_a;
        const double suf_d = acc_d - pre_d;
        const Eigen::Vector3d suf_c = acc_c - pre_c;
        const double om = 1.0 - alpha;

        double g_alpha = g_acc_a * (T - suf_a / om) + g_acc_d * (s.z * T - suf_d / om);
        for (int ch = 0; ch < 3; ++ch)
          g_alpha += g_acc_c[ch] * (g.color[ch] * T - suf_c[ch] / om);

        grads->d_color[s.id] += g_acc_c * c;
        double g_z_direct = g_acc_d * c;

        if (g.opacity * w < kAlphaCap) {  // inside the cap: alpha = o * w
          grads->d_opacity[s.id] += g_alpha * w;
          const double g_w = g_alpha * g.opacity;
          const double dx = (px + 0.5) - s.u, dy = (py + 0.5) - s.v;
          const double d2 = dx * dx + dy * dy;
          const double g_d2 = -g_w * w / (2.0 * s.r_px * s.r_px);
          const double g_rpx = g_w * w * d2 / (s.r_px * s.r_px * s.r_px);
          const double g_u = g_d2 * 2.0 * (s.u - (px + 0.5));
          const double g_v = g_d2 * 2.0 * (s.v - (py + 0.5));
          const double x = s.p_cam.x(), y = s.p_cam.y(), z = s.z;
          Eigen::Vector3d g_cam;
          g_cam.x() = g_u * cam.fx / z;
          g_cam.y() = g_v * cam.fy / z;
          g_cam.z() = -g_u * cam.fx * x / (z * z) - g_v * cam.fy * y / (z * z) -
                      g_rpx * rho * g.radius / (z * z) + g_z_direct;
          grads->d_position[s.id] += scene.rot.transpose() * g_cam;
          grads->d_radius[s.id] += g_rpx * rho / z;
        } else {
          // alpha saturated at the cap: no gradient through alpha, but the
          // center depth still moves the expected depth
          Eigen::Vector3d g_cam(0.0, 0.0, g_z_direct);
          grads->d_position[s.id] += scene.rot.transpose() * g_cam;
        }
      });
    }
  return loss;
}

}  // namespace detail

inline double mapping_loss(const GaussianField& field, const Camera& cam,
                           const RigidTransform& t_co, const Image3& obs_color,
                           const Image<double>& obs_depth, const Image<double>& conf) {
  return detail::mapping_pass(field, cam, t_co, obs_color, obs_depth, conf, nullptr);
}

inline MapGradients mapping_loss_grad(const GaussianField& field, const Camera& cam,
                                      const RigidTransform& t_co, const Image3& obs_color,
                                      const Image<double>& obs_depth,
                                      const Image<double>& conf) {
  MapGradients g;
  g.d_position.assign(field.size(), Eigen::Vector3d::Zero());
  g.d_radius.assign(field.size(), 0.0);
  g.d_color.assign(field.size(), Eigen::Vector3d::Zero());
  g.d_opacity.assign(field.size(), 0.0);
  g.loss = detail::mapping_pass(field, cam, t_co, obs_color, obs_depth, conf, &g);
  return g;
}

// ---------------------------------------------------------------------------
// Map optimization: Adam on position, log radius, color (clamped) and logit
// opacity, cycling through the frames one per iteration. Returns whichever of
// the initial and optimized fields has the lower summed loss; gaussians with
// opacity below the prune threshold are dropped from the optimized result.
// ---------------------------------------------------------------------------

struct MapFrame {
  Camera cam;
  RigidTransform t_co;  // object -> camera
  Image3 color;
  Image<double> depth;
  Image<double> conf;
};

struct MapStepSizes {
  double position = 1e-3;
  double log_radius = 5e-3;
  double color = 1e-2;
  double logit_opacity = 2e-2;
};

struct MapOptions {
  int iters = 200;
  MapStepSizes step_sizes;
  double prune_opacity = 0.01;
};

inline double total_mapping_loss(const GaussianField& field, const std::vector<MapFrame>& frames) {
  double sum = 0.0;
  for (const auto& f : frames)
    sum += mapping_loss(field, f.cam, f.t_co, f.color, f.depth, f.conf);
  return sum;
}

inline GaussianField optimize_map(const GaussianField& field, const std::vector<MapFrame>& frames,
                                  const MapOptions& opt = {}) {
  if (frames.empty()) throw ConfigError("optimize_map needs at least one frame");
  const double entry_loss = total_mapping_loss(field, frames);
  if (entry_loss == 0.0) return field;

  const std::size_t n = field.size();
  const std::size_t dim = n * 8;  // pos(3) + log_r + color(3) + logit_o
  Eigen::VectorXd params(dim), m = Eigen::VectorXd::Zero(dim), v = Eigen::VectorXd::Zero(dim);
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  auto sigmoid = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = field.gaussians[i];
    params.segment<3>(i * 8) = g.position;
    params[i * 8 + 3] = std::log(g.radius);
    params.segment<3>(i * 8 + 4) = g.color;
    params[i * 8 + 7] = logit(std::clamp(g.opacity, 1e-6, 1.0 - 1e-6));
  }
  Eigen::VectorXd lr(dim);
  for (std::size_t i = 0; i < n; ++i) {
    lr.segment<3>(i * 8).setConstant(opt.step_sizes.position);
    lr[i * 8 + 3] = opt.step_sizes.log_radius;
    lr.segment<3>(i * 8 + 4).setConstant(opt.step_sizes.color);
    lr[i * 8 + 7] = opt.step_sizes.logit_opacity;
  }

  GaussianField work = field;
  auto write_back = [&]() {
    for (std::size_t i = 0; i < n; ++i) {
      auto& g = work.gaussians[i];
      g.position = params.segment<3>(i * 8);
      g.radius = std::exp(std::clamp(params[i * 8 + 3], std::log(1e-5), std::log(10.0)));
      for (int c = 0; c < 3; ++c) g.color[c] = clamp01(params[i * 8 + 4 + c]);
      g.opacity = sigmoid(std::clamp(params[i * 8 + 7], -13.0, 9.2));
    }
  };

  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int it = 0; it < opt.iters; ++it) {
    const MapFrame& f = frames[std::size_t(it) % frames.size()];
    const MapGradients g = mapping_loss_grad(work, f.cam, f.t_co, f.color, f.depth, f.conf);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& gi = work.gaussians[i];
      grad.segment<3>(i * 8) = g.d_position[i];
      grad[i * 8 + 3] = g.d_radius[i] * gi.radius;  // d/d log r
      grad.segment<3>(i * 8 + 4) = g.d_color[i];
      grad[i * 8 + 7] = g.d_opacity[i] * gi.opacity * (1.0 - gi.opacity);
    }
    const int step = it + 1;
    m = b1 * m + (1.0 - b1) * grad;
    v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    for (std::size_t k = 0; k < dim; ++k)
      params[k] -= lr[k] * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    write_back();
  }

  // prune near-transparent gaussians, then honor the monotone-loss contract
  GaussianField pruned;
  pruned.frame = work.frame;
  for (const auto& g : work.gaussians)
    if (g.opacity >= opt.prune_opacity) pruned.gaussians.push_back(g);
  const double exit_loss = total_mapping_loss(pruned, frames);
  return exit_loss <= entry_loss ? pruned : field;
}

// ---------------------------------------------------------------------------
// Seeding from an aligned point cloud: one gaussian per point, radius from a
// rule applied to the per-point nearest-neighbor distance, opacity 0.9.
// ---------------------------------------------------------------------------

struct SeedOptions {
  std::function<double(double)> radius_rule;  // nn distance -> radius
  double radius_factor = 1.3;                 // used when radius_rule is empty
  double fallback_nn = 0.01;                  // nn distance for singleton clouds
  double opacity = 0.9;
  double min_confidence = 0.0;                // drop points below this confidence
  std::size_t max_gaussians = 0;              // 0 = unlimited
};

inline GaussianField seed_from_pointcloud(const PointCloud& cloud,
                                          const std::vector<Eigen::Vector3d>& colors,
                                          const SeedOptions& opt = {}) {
  if (cloud.empty()) throw EmptyCloud("cannot seed a gaussian field from an empty cloud");
  if (!colors.empty() && colors.size() != cloud.size())
    throw DimensionMismatch("colors size does not match cloud size");

  PointCloud pts;
  std::vector<Eigen::Vector3d> cols;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (!cloud.confidence.empty() && cloud.confidence[i] < opt.min_confidence) continue;
    pts.points.push_back(cloud.points[i]);
    cols.push_back(colors.empty() ? Eigen::Vector3d(0.5, 0.5, 0.5) : colors[i]);
  }
  if (pts.empty()) throw EmptyCloud("all points fell below the seeding confidence threshold");
  if (opt.max_gaussians && pts.size() > opt.max_gaussians) {
    const double step = double(pts.size()) / double(opt.max_gaussians);
    PointCloud sub;
    std::vector<Eigen::Vector3d> subc;
    for (std::size_t i = 0; i < opt.max_gaussians; ++i) {
      const std::size_t idx = std::size_t(double(i) * step);
      sub.points.push_back(pts.points[idx]);
      subc.push_back(cols[idx]);
    }
    pts = std::move(sub);
    cols = std::move(subc);
  }

  auto rule = opt.radius_rule ? opt.radius_rule
                              : [&](double nn) { return opt.radius_factor * nn; };

  GaussianField field;
  field.gaussians.reserve(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double nn = opt.fallback_nn;
    if (pts.size() > 1) {
      NearestHit best;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (j == i) continue;
        const double d = (pts.points[j] - pts.points[i]).squaredNorm();
        if (d < best.dist) {
          best.dist = d;
          best.index = int(j);
        }
      }
      nn = std::sqrt(best.dist);
    }
    IsotropicGaussian g;
    g.position = pts.points[i];
    g.radius = std::max(1e-6, rule(nn));
    g.color = cols[i];
    g.opacity = opt.opacity;
    field.gaussians.push_back(g);
  }
  return field;
}

}  // namespace splatpose
