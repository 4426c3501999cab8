#pragma once

#include <memory>

#include "splatpose/diffusion.hpp"
#include "splatpose/posegraph.hpp"
#include "splatpose/splatmap.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Analytic shapes: exact ray casting and signed distance, used both to render
// frames and as the geometric ground truth in tests.
// ---------------------------------------------------------------------------

constexpr double kRayMiss = std::numeric_limits<double>::infinity();

class Shape {
 public:
  virtual ~Shape() = default;
  // Smallest s > eps with o + s*d on the surface (d need not be unit); miss -> inf.
  virtual double raycast(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const = 0;
  virtual double signed_distance(const Eigen::Vector3d& p) const = 0;
  virtual double area() const = 0;
  virtual Eigen::Vector3d sample(Rng& rng) const = 0;
};

namespace detail {
constexpr double kRayEps = 1e-9;

inline double smallest_positive(double a, double b) {
  double best = kRayMiss;
  if (a > kRayEps) best = a;
  if (b > kRayEps && b < best) best = b;
  return best;
}
}  // namespace detail

class SphereShape final : public Shape {
 public:
  explicit SphereShape(double radius) : r_(radius) {}

  double raycast(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const override {
    const double a = d.dot(d), b = 2.0 * o.dot(d), c = o.dot(o) - r_ * r_;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return kRayMiss;
    const double sq = std::sqrt(disc);
    return detail::smallest_positive((-b - sq) / (2 * a), (-b + sq) / (2 * a));
  }

  double signed_distance(const Eigen::Vector3d& p) const override { return p.norm() - r_; }
  double area() const override { return 4.0 * kPi * r_ * r_; }

  Eigen::Vector3d sample(Rng& rng) const override {
    Eigen::Vector3d v(rng.normal(), rng.normal(), rng.normal());
    return r_ * v.normalized();
  }

 private:
  double r_;
};

class BoxShape final : public Shape {
 public:
  explicit BoxShape(const Eigen::Vector3d& half) : h_(half) {}

  double raycast(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const override {
    double tmin = -kRayMiss, tmax = kRayMiss;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(d[a]) < 1e-15) {
        if (std::abs(o[a]) > h_[a]) return kRayMiss;
        continue;
      }
      double t1 = (-h_[a] - o[a]) / d[a], t2 = (h_[a] - o[a]) / d[a];
      if (t1 > t2) std::swap(t1, t2);
      tmin = std::max(tmin, t1);
      tmax = std::min(tmax, t2);
      if (tmin > tmax) return kRayMiss;
    }
    return detail::smallest_positive(tmin, tmax);
  }

  double signed_distance(const Eigen::Vector3d& p) const override {
    const Eigen::Vector3d q = p.cwiseAbs() - h_;
    const double outside = q.cwiseMax(0.0).norm();
    const double inside = std::min(q.maxCoeff(), 0.0);
    return outside + inside;
  }

  double area() const override {
    return 8.0 * (h_.x() * h_.y() + h_.y() * h_.z() + h_.z() * h_.x());
  }

  Eigen::Vector3d sample(Rng& rng) const override {
    const double axy = 4 * h_.x() * h_.y(), ayz = 4 * h_.y() * h_.z(),
                 azx = 4 * h_.z() * h_.x();
    double pick = rng.uniform() * (2 * axy + 2 * ayz + 2 * azx);
    const double sx = rng.uniform(-h_.x(), h_.x());
    const double sy = rng.uniform(-h_.y(), h_.y());
    const double sz = rng.uniform(-h_.z(), h_.z());
    auto sign = [&]() { return rng.uniform() < 0.5 ? -1.0 : 1.0; };
    if ((pick -= 2 * axy) < 0) return {sx, sy, sign() * h_.z()};
    if ((pick -= 2 * ayz) < 0) return {sign() * h_.x(), sy, sz};
    return {sx, sign() * h_.y(), sz};
  }

 private:
  Eigen::Vector3d h_;
};

// Capped cylinder with arbitrary center and unit axis.
class CylinderShape final : public Shape {
 public:
  CylinderShape(const Eigen::Vector3d& center, const Eigen::Vector3d& axis, double radius,
                double half_len)
      : c_(center), v_(axis.normalized()), r_(radius), hl_(half_len) {}

  double raycast(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const override {
    const Eigen::Vector3d oc = o - c_;
    const Eigen::Vector3d oa = oc - oc.dot(v_) * v_;
    const Eigen::Vector3d da = d - d.dot(v_) * v_;
    double best = kRayMiss;
    const double a = da.dot(da);
    if (a > 1e-18) {
      const double b = 2.0 * oa.dot(da), c = oa.dot(oa) - r_ * r_;
      const double disc = b * b - 4 * a * c;
      if (disc >= 0) {
        const double sq = std::sqrt(disc);
        for (double s : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
          if (s <= detail::kRayEps || s >= best) continue;
          if (std::abs((oc + s * d).dot(v_)) <= hl_) best = s;
        }
      }
    }
    const double dv = d.dot(v_);
    if (std::abs(dv) > 1e-15) {
      for (double side : {-hl_, hl_}) {
        const double s = (side - oc.dot(v_)) / dv;
        if (s <= detail::kRayEps || s >= best) continue;
        const Eigen::Vector3d q = oc + s * d - side * v_;
        if (q.squaredNorm() <= r_ * r_) best = s;
      }
    }
    return best;
  }

  double signed_distance(const Eigen::Vector3d& p) const override {
    const Eigen::Vector3d oc = p - c_;
    const double y = oc.dot(v_);
    const double rho = (oc - y * v_).norm();
    const Eigen::Vector2d q(rho - r_, std::abs(y) - hl_);
    return std::min(q.maxCoeff(), 0.0) + q.cwiseMax(0.0).norm();
  }

  double area() const override { return 2 * kPi * r_ * (2 * hl_) + 2 * kPi * r_ * r_; }

  Eigen::Vector3d sample(Rng& rng) const override {
    // orthonormal frame around the axis
    Eigen::Vector3d u = std::abs(v_.z()) < 0.9 ? Eigen::Vector3d(0, 0, 1).cross(v_).normalized()
                                               : Eigen::Vector3d(1, 0, 0).cross(v_).normalized();
    const Eigen::Vector3d w = v_.cross(u);
    const double side_area = 2 * kPi * r_ * 2 * hl_;
    const double cap_area = kPi * r_ * r_;
    double pick = rng.uniform() * (side_area + 2 * cap_area);
    const double phi = rng.uniform(0.0, 2 * kPi);
    if (pick < side_area) {
      const double y = rng.uniform(-hl_, hl_);
      return c_ + y * v_ + r_ * (std::cos(phi) * u + std::sin(phi) * w);
    }
    const double sign = pick < side_area + cap_area ? 1.0 : -1.0;
    const double rho = r_ * std::sqrt(rng.uniform());
    return c_ + sign * hl_ * v_ + rho * (std::cos(phi) * u + std::sin(phi) * w);
  }

 private:
  Eigen::Vector3d c_, v_;
  double r_, hl_;
};

// Union of parts; sampling rejects points that fall inside another part.
class UnionShape final : public Shape {
 public:
  explicit UnionShape(std::vector<std::shared_ptr<const Shape>> parts)
      : parts_(std::move(parts)) {}

  double raycast(const Eigen::Vector3d& o, const Eigen::Vector3d& d) const override {
    double best = kRayMiss;
    for (const auto& p : parts_) best = std::min(best, p->raycast(o, d));
    return best;
  }

  double signed_distance(const Eigen::Vector3d& p) const override {
    double best = kRayMiss;
    for (const auto& s : parts_) best = std::min(best, s->signed_distance(p));
    return best;
  }

  double area() const override {
    double a = 0;
    for (const auto& p : parts_) a += p->area();
    return a;
  }

  Eigen::Vector3d sample(Rng& rng) const override {
    const double total = area();
    for (int attempt = 0; attempt < 64; ++attempt) {
      double pick = rng.uniform() * total;
      for (const auto& p : parts_) {
        if ((pick -= p->area()) < 0) {
          const Eigen::Vector3d q = p->sample(rng);
          if (signed_distance(q) > -1e-9) return q;
          break;
        }
      }
    }
    return parts_.front()->sample(rng);  // pathological rejection streak
  }

 private:
  std::vector<std::shared_ptr<const Shape>> parts_;
};

// ---------------------------------------------------------------------------
// Synthetic objects
// ---------------------------------------------------------------------------

struct SyntheticObject {
  std::string name;
  std::shared_ptr<const Shape> shape;
  PointCloud points;                        // surface samples, object frame
  std::vector<Eigen::Vector3d> colors;
  std::vector<Eigen::Vector3d> metric_points;  // fixed 2048-point subsample for ADD
  double diameter = 0.0;                    // max pairwise distance, cached
  bool symmetric = false;

  Eigen::Vector3d color_at(const Eigen::Vector3d& p) const {
    const double az = std::atan2(p.y(), p.x());
    return {0.5 + 0.28 * std::sin(34.0 * p.z() + 2.0 * az),
            0.5 + 0.28 * std::sin(29.0 * p.x() + 3.0 * az + 1.3),
            0.5 + 0.28 * std::cos(31.0 * p.y() + az + 0.7)};
  }
};

inline std::shared_ptr<const Shape> make_shape(const std::string& name) {
  if (name == "sphere") return std::make_shared<SphereShape>(0.11);
  if (name == "box")
    return std::make_shared<BoxShape>(Eigen::Vector3d(0.11, 0.08, 0.06));
  if (name == "cylinder")
    return std::make_shared<CylinderShape>(Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitZ(),
                                           0.08, 0.12);
  if (name == "thin_plate")
    return std::make_shared<BoxShape>(Eigen::Vector3d(0.09, 0.07, 0.001));
  if (name == "mug") {
    const double body_r = 0.075, body_hl = 0.1;
    std::vector<std::shared_ptr<const Shape>> parts;
    parts.push_back(std::make_shared<CylinderShape>(Eigen::Vector3d::Zero(),
                                                    Eigen::Vector3d::UnitZ(), body_r, body_hl));
    const double grip_r = 0.016;
    const double reach = body_r + 0.045;
    parts.push_back(std::make_shared<CylinderShape>(
        Eigen::Vector3d(body_r + 0.02, 0, 0.05), Eigen::Vector3d::UnitX(), grip_r, 0.028));
    parts.push_back(std::make_shared<CylinderShape>(
        Eigen::Vector3d(body_r + 0.02, 0, -0.05), Eigen::Vector3d::UnitX(), grip_r, 0.028));
    parts.push_back(std::make_shared<CylinderShape>(Eigen::Vector3d(reach, 0, 0),
                                                    Eigen::Vector3d::UnitZ(), grip_r, 0.062));
    return std::make_shared<UnionShape>(std::move(parts));
  }
  throw ConfigError("unknown object shape: " + name);
}

inline SyntheticObject make_object(const std::string& name, std::uint64_t seed,
                                   std::size_t n_points = 12000) {
  SyntheticObject obj;
  obj.name = name;
  obj.shape = make_shape(name);
  obj.symmetric = (name == "cylinder" || name == "sphere");
  Rng rng(Rng::mix(seed, std::hash<std::string>{}(name)));
  obj.points.points.reserve(n_points);
  obj.colors.reserve(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    const Eigen::Vector3d p = obj.shape->sample(rng);
    obj.points.points.push_back(p);
    obj.colors.push_back(obj.color_at(p));
  }
  // fixed metric subsample + cached diameter
  const PointCloud sub = subsample(obj.points, 2048);
  obj.metric_points = sub.points;
  double d2max = 0.0;
  for (std::size_t i = 0; i < sub.size(); ++i)
    for (std::size_t j = i + 1; j < sub.size(); ++j)
      d2max = std::max(d2max, (sub.points[i] - sub.points[j]).squaredNorm());
  obj.diameter = std::sqrt(d2max);
  return obj;
}

// ---------------------------------------------------------------------------
// Frames and trajectories
// ---------------------------------------------------------------------------

struct SyntheticFrame {
  int id = 0;
  Camera cam;
  RigidTransform t_oc;          // ground-truth camera -> object
  Image3 color;
  Image<double> depth;          // with injected Gaussian noise
  Image<double> depth_clean;
  Image<std::uint8_t> mask;
  Image<double> noise_scale;    // per-pixel true sigma
  std::uint64_t object_tag = 0; // identity of the observed object
};

// Camera convention: +x right, +y down, +z forward (into the scene).
inline RigidTransform look_at(const Eigen::Vector3d& position, const Eigen::Vector3d& target) {
  const Eigen::Vector3d f = (target - position).normalized();
  Eigen::Vector3d r = f.cross(Eigen::Vector3d::UnitZ());
  if (r.norm() < 1e-9) r = f.cross(Eigen::Vector3d::UnitY());
  r.normalize();
  const Eigen::Vector3d d = f.cross(r);
  Eigen::Matrix3d rot;
  rot.col(0) = r;
  rot.col(1) = d;
  rot.col(2) = f;
  RigidTransform t;
  t.rotation = Eigen::Quaterniond(rot).normalized();
  t.translation = position;
  return t;
}

inline SyntheticFrame render_synthetic_frame(const SyntheticObject& obj, const Camera& cam,
                                             const RigidTransform& t_oc, double depth_sigma,
                                             Rng& rng, int id = 0) {
  SyntheticFrame fr;
  fr.id = id;
  fr.cam = cam;
  fr.t_oc = t_oc;
  fr.object_tag = std::hash<std::string>{}(obj.name);
  fr.color = Image3(cam.width, cam.height);
  fr.depth = Image<double>(cam.width, cam.height);
  fr.depth_clean = Image<double>(cam.width, cam.height);
  fr.mask = Image<std::uint8_t>(cam.width, cam.height, 0);
  fr.noise_scale = Image<double>(cam.width, cam.height, 0.0);
  const Eigen::Matrix3d rot = t_oc.rotation_matrix();
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Eigen::Vector3d dir_cam((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy,
                                    1.0);
      const double s = obj.shape->raycast(t_oc.translation, rot * dir_cam);
      if (!std::isfinite(s)) continue;
      const Eigen::Vector3d hit_obj = t_oc.translation + s * (rot * dir_cam);
      const Eigen::Vector3d c = obj.color_at(hit_obj);
      for (int ch = 0; ch < 3; ++ch) fr.color.at(x, y, ch) = c[ch];
      fr.depth_clean.at(x, y) = s;
      fr.depth.at(x, y) = s + depth_sigma * rng.normal();
      fr.mask.at(x, y) = 1;
      fr.noise_scale.at(x, y) = depth_sigma;
    }
  return fr;
}

struct SceneSpec {
  std::string object = "mug";
  int width = 64, height = 48;
  double fx = 70.0, fy = 70.0;
  int ref_frames = 16;
  double ref_radius = 0.52;
  double ref_azimuth_span = 352.5;  // degrees, first to last frame
  double ref_elev_a = 14.0, ref_elev_b = 30.0;  // alternating elevations (loopy ring)
  int test_frames = 12;
  double test_radius = 0.5;
  double test_elev = 22.0;
  double test_azimuth0 = 9.0;
  double depth_sigma = 0.003;

  Camera camera() const {
    Camera c;
    c.fx = fx;
    c.fy = fy;
    c.width = width;
    c.height = height;
    c.cx = width / 2.0 - 0.5;
    c.cy = height / 2.0 - 0.5;
    return c;
  }

  static SceneSpec from_json(const json& j) {
    SceneSpec s;
    s.object = j.value("object", s.object);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.fx = j.value("fx", s.fx);
    s.fy = j.value("fy", s.fy);
    s.ref_frames = j.value("ref_frames", s.ref_frames);
    s.ref_radius = j.value("ref_radius", s.ref_radius);
    s.ref_azimuth_span = j.value("ref_azimuth_span", s.ref_azimuth_span);
    s.ref_elev_a = j.value("ref_elev_a", s.ref_elev_a);
    s.ref_elev_b = j.value("ref_elev_b", s.ref_elev_b);
    s.test_frames = j.value("test_frames", s.test_frames);
    s.test_radius = j.value("test_radius", s.test_radius);
    s.test_elev = j.value("test_elev", s.test_elev);
    s.test_azimuth0 = j.value("test_azimuth0", s.test_azimuth0);
    s.depth_sigma = j.value("depth_sigma", s.depth_sigma);
    return s;
  }

  json to_json() const {
    return json{{"object", object},       {"width", width},
                {"height", height},       {"fx", fx},
                {"fy", fy},               {"ref_frames", ref_frames},
                {"ref_radius", ref_radius}, {"ref_azimuth_span", ref_azimuth_span},
                {"ref_elev_a", ref_elev_a}, {"ref_elev_b", ref_elev_b},
                {"test_frames", test_frames}, {"test_radius", test_radius},
                {"test_elev", test_elev}, {"test_azimuth0", test_azimuth0},
                {"depth_sigma", depth_sigma}};
  }
};

inline RigidTransform ring_pose(double radius, double azimuth_deg, double elev_deg) {
  const double az = deg2rad(azimuth_deg), el = deg2rad(elev_deg);
  const Eigen::Vector3d pos(radius * std::cos(el) * std::cos(az),
                            radius * std::cos(el) * std::sin(az), radius * std::sin(el));
  return look_at(pos, Eigen::Vector3d::Zero());
}

struct Scene {
  SceneSpec spec;
  SyntheticObject object;
  std::vector<SyntheticFrame> ref;
  std::vector<SyntheticFrame> test;
};

inline Scene generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  Scene scene;
  scene.spec = spec;
  scene.object = make_object(spec.object, Rng::mix(seed, 0x0b1ec7));
  const Camera cam = spec.camera();
  cam.validate();
  Rng rng(Rng::mix(seed, 0x5ce11e));
  for (int i = 0; i < spec.ref_frames; ++i) {
    const double az = spec.ref_frames == 1
                          ? 0.0
                          : spec.ref_azimuth_span * double(i) / double(spec.ref_frames - 1);
    const double el = (i % 2 == 0) ? spec.ref_elev_a : spec.ref_elev_b;
    scene.ref.push_back(render_synthetic_frame(
        scene.object, cam, ring_pose(spec.ref_radius, az, el), spec.depth_sigma, rng, i));
  }
  for (int i = 0; i < spec.test_frames; ++i) {
    const double az = spec.test_azimuth0 + 360.0 * double(i) / double(spec.test_frames);
    scene.test.push_back(render_synthetic_frame(scene.object, cam,
                                                ring_pose(spec.test_radius, az, spec.test_elev),
                                                spec.depth_sigma, rng, 1000 + i));
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Synthetic multi-view diffusion prior
//
// Stands in for an image-to-3D diffusion model plus pointmap regression:
// k views at fixed azimuth offsets around the input view, each generated by
// actually running the uncertainty-propagating sampler toward a perturbed
// target image. Color and geometry corruption grow with angular distance to
// the input view; the reported per-pixel variance is the propagated one,
// which matches the injected noise exactly in calibrated mode.
// ---------------------------------------------------------------------------

struct PriorConfig {
  int k = 6;                      // views
  double color_noise_gain = 0.12; // peak color sigma at the back view
  double geo_noise_gain = 0.012;  // peak depth sigma (meters, pre-scale)
  double pose_noise_deg = 3.0;
  double pose_noise_m = 0.012;
  double miscalibration = 1.0;    // reported variance scale; 1 = calibrated
  int sampler_steps = 50;
  int samples_per_step = 20;
  double conf_base = 0.008;       // synthetic pointmap-confidence level
  double scale_min = 0.6, scale_max = 1.7;  // generated-frame scale range

  json to_json() const {
    return json{{"k", k},
                {"color_noise_gain", color_noise_gain},
                {"geo_noise_gain", geo_noise_gain},
                {"pose_noise_deg", pose_noise_deg},
                {"pose_noise_m", pose_noise_m},
                {"miscalibration", miscalibration},
                {"sampler_steps", sampler_steps},
                {"samples_per_step", samples_per_step},
                {"conf_base", conf_base},
                {"scale_min", scale_min},
                {"scale_max", scale_max}};
  }
  static PriorConfig from_json(const json& j) {
    PriorConfig c;
    c.k = j.value("k", c.k);
    c.color_noise_gain = j.value("color_noise_gain", c.color_noise_gain);
    c.geo_noise_gain = j.value("geo_noise_gain", c.geo_noise_gain);
    c.pose_noise_deg = j.value("pose_noise_deg", c.pose_noise_deg);
    c.pose_noise_m = j.value("pose_noise_m", c.pose_noise_m);
    c.miscalibration = j.value("miscalibration", c.miscalibration);
    c.sampler_steps = j.value("sampler_steps", c.sampler_steps);
    c.samples_per_step = j.value("samples_per_step", c.samples_per_step);
    c.conf_base = j.value("conf_base", c.conf_base);
    c.scale_min = j.value("scale_min", c.scale_min);
    c.scale_max = j.value("scale_max", c.scale_max);
    return c;
  }
};

struct PriorView {
  UncertainImage image;          // generated rgb + reported per-pixel variance
  Image3 pointmap;               // scaled, camera-frame, noisy geometry
  Image<std::uint8_t> valid;
  Image<double> conf_hat;        // synthetic regression confidence
  Image<double> depth_clean;     // exact depth at the view's true pose
  RigidTransform rel_pose;       // input camera <- this view, generated scale
  RigidTransform rel_pose_gt;    // exact relative pose (test oracle)
  double azimuth_offset_deg = 0.0;
  Image<double> true_variance;   // injected color variance (test oracle)
};

struct DiffusionPrior {
  std::vector<PriorView> views;
  double true_scale = 1.0;  // generated units -> meters is 1/true_scale
};

inline DiffusionPrior synth_diffusion_prior(const SyntheticObject& obj, const Camera& cam,
                                            const RigidTransform& input_t_oc,
                                            const PriorConfig& cfg, std::uint64_t seed) {
  DiffusionPrior prior;
  Rng rng(Rng::mix(seed, 0xd1ff));
  prior.true_scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const NoiseSchedule sched = NoiseSchedule::terminal(cfg.sampler_steps, 1e-4, 1.18);

  // input camera position in object coordinates defines the ring
  const Eigen::Vector3d pos0 = input_t_oc.translation;
  const double radius = pos0.norm();
  const double elev = std::asin(std::clamp(pos0.z() / radius, -1.0, 1.0));
  const double az0 = std::atan2(pos0.y(), pos0.x());

  for (int i = 0; i < cfg.k; ++i) {
    PriorView view;
    view.azimuth_offset_deg = 360.0 * double(i) / double(cfg.k);
    const double ang = deg2rad(view.azimuth_offset_deg);
    const double angfrac =
        std::min(view.azimuth_offset_deg, 360.0 - view.azimuth_offset_deg) / 180.0;

    const RigidTransform t_oc =
        ring_pose(radius, rad2deg(az0 + ang), rad2deg(elev));
    view.rel_pose_gt = compose(inverse(input_t_oc), t_oc);

    Rng view_rng(Rng::mix(seed, 0xabc0 + std::uint64_t(i)));
    SyntheticFrame clean = render_synthetic_frame(obj, cam, t_oc, 0.0, view_rng, i);

    // hallucination error: a smooth random field, not pixel noise, so that
    // averaging views cannot cancel it; sqrt(2) sin(w.p + phi) with a random
    // phase has unit variance pointwise across seeds, keeping the reported
    // variance calibrated
    const double wave_angle = view_rng.uniform(0.0, 2.0 * kPi);
    const double wave_len = view_rng.uniform(9.0, 22.0);  // pixels
    const double wx = std::cos(wave_angle) * 2.0 * kPi / wave_len;
    const double wy = std::sin(wave_angle) * 2.0 * kPi / wave_len;
    const double phase_c[3] = {view_rng.uniform(0.0, 2.0 * kPi),
                               view_rng.uniform(0.0, 2.0 * kPi),
                               view_rng.uniform(0.0, 2.0 * kPi)};

    const Eigen::Index d = Eigen::Index(cam.width) * cam.height * 3;
    Eigen::VectorXd target(d), target_var(d);
    Image<double> true_var(cam.width, cam.height, 0.0);
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const double rx = (x + 0.5 - cam.width / 2.0) / double(cam.width);
        const double ry = (y + 0.5 - cam.height / 2.0) / double(cam.height);
        const double profile = 0.35 + 0.65 * std::min(1.0, 2.0 * std::sqrt(rx * rx + ry * ry));
        const double sigma = cfg.color_noise_gain * angfrac * profile;
        true_var.at(x, y) = sigma * sigma;
        const Eigen::Index base = (Eigen::Index(y) * cam.width + x) * 3;
        for (int c = 0; c < 3; ++c) {
          const double err =
              sigma * std::sqrt(2.0) * std::sin(wx * x + wy * y + phase_c[c]);
          target[base + c] = clean.color.at(x, y, c) + err;
          target_var[base + c] = sigma * sigma * cfg.miscalibration;
        }
      }

    const ViewNoisePredictor predictor(target, target_var, sched);
    LatentState x_t;
    x_t.mean = Eigen::VectorXd::Zero(d);
    x_t.variance = Eigen::VectorXd::Zero(d);
    x_t.t = sched.steps;
    view.image = sample_with_uncertainty(x_t, predictor, sched, cam.width, cam.height,
                                         cfg.samples_per_step,
                                         Rng::mix(seed, 0x5a3e + std::uint64_t(i)));
    view.true_variance = true_var;

    // geometry: clean depth plus angle-growing noise, then the unknown scale
    view.pointmap = Image3(cam.width, cam.height);
    view.valid = clean.mask;
    view.depth_clean = clean.depth_clean;
    view.conf_hat = Image<double>(cam.width, cam.height, 0.0);
    const double geo_sigma = cfg.geo_noise_gain * (0.15 + 0.85 * angfrac);
    const double gphase = view_rng.uniform(0.0, 2.0 * kPi);
    const double gangle = view_rng.uniform(0.0, 2.0 * kPi);
    const double glen = view_rng.uniform(10.0, 26.0);
    const double gx = std::cos(gangle) * 2.0 * kPi / glen;
    const double gy = std::sin(gangle) * 2.0 * kPi / glen;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        if (!clean.mask.at(x, y)) continue;
        const double depth = clean.depth_clean.at(x, y) +
                             geo_sigma * std::sqrt(2.0) * std::sin(gx * x + gy * y + gphase);
        const Eigen::Vector3d p =
            unproject(cam, x + 0.5, y + 0.5, depth) * prior.true_scale;
        for (int c = 0; c < 3; ++c) view.pointmap.at(x, y, c) = p[c];
        view.conf_hat.at(x, y) = cfg.conf_base;
      }

    // reported relative pose: exact one perturbed, translation in generated scale
    Eigen::Vector3d axis(view_rng.normal(), view_rng.normal(), view_rng.normal());
    axis.normalize();
    const double rot_err = deg2rad(cfg.pose_noise_deg) * angfrac * view_rng.uniform();
    Eigen::Vector3d t_err(view_rng.normal(), view_rng.normal(), view_rng.normal());
    t_err *= cfg.pose_noise_m * angfrac;
    RigidTransform noisy = view.rel_pose_gt;
    noisy.rotation =
        (noisy.rotation * Eigen::Quaterniond(Eigen::AngleAxisd(rot_err, axis))).normalized();
    noisy.translation = (noisy.translation + t_err) * prior.true_scale;
    view.rel_pose = noisy;

    prior.views.push_back(std::move(view));
  }
  return prior;
}

// ---------------------------------------------------------------------------
// Synthetic matcher: ground-truth covisibility with injected outliers
// ---------------------------------------------------------------------------

struct MatchFrameData {
  Camera cam;
  RigidTransform t_oc;          // ground-truth pose of the frame
  const Image<double>* depth_clean = nullptr;
  const Image<std::uint8_t>* mask = nullptr;
  std::uint64_t object_tag = 0;
  // fraction of candidate matches a feature matcher would confidently keep;
  // below 1 for generated views, decaying with their hallucination level
  double reliability = 1.0;
  // frames processed jointly by the view generator (input + generated ring)
  // match each other without the wide-baseline penalty
  std::uint32_t joint_group = 0;
};

inline MatchFrameData match_data(const SyntheticFrame& f) {
  return {f.cam, f.t_oc, &f.depth_clean, &f.mask, f.object_tag, 1.0, 0};
}

struct SynthMatcherConfig {
  int inlier_count = 400;       // requested; capped by covisibility
  double outlier_fraction = 0.15;
  double vis_eps = 0.012;       // meters, occlusion test
  double baseline_jitter_px = 2.5;  // pairing imprecision at wide baselines
  int stride = 1;               // pixel sampling stride in frame a
  double subpix_gate = 1.0;     // keep pairs whose reprojection falls within
                                // this fraction of the target pixel
  double q_inlier_lo = 0.72, q_inlier_hi = 0.98;
  double q_outlier_lo = 0.05, q_outlier_hi = 0.38;

  json to_json() const {
    return json{{"inlier_count", inlier_count}, {"outlier_fraction", outlier_fraction},
                {"vis_eps", vis_eps},           {"stride", stride},
                {"baseline_jitter_px", baseline_jitter_px},
                {"subpix_gate", subpix_gate}};
  }
  static SynthMatcherConfig from_json(const json& j) {
    SynthMatcherConfig c;
    c.inlier_count = j.value("inlier_count", c.inlier_count);
    c.outlier_fraction = j.value("outlier_fraction", c.outlier_fraction);
    c.vis_eps = j.value("vis_eps", c.vis_eps);
    c.baseline_jitter_px = j.value("baseline_jitter_px", c.baseline_jitter_px);
    c.stride = j.value("stride", c.stride);
    c.subpix_gate = j.value("subpix_gate", c.subpix_gate);
    return c;
  }
};

// Confidence of a feature matcher decays with the viewpoint change between
// the two frames; wide baselines keep few reliable matches.
inline double baseline_reliability(const MatchFrameData& a, const MatchFrameData& b) {
  if (a.joint_group != 0 && a.joint_group == b.joint_group) return 1.0;
  const Eigen::Vector3d fa = a.t_oc.rotation * Eigen::Vector3d::UnitZ();
  const Eigen::Vector3d fb = b.t_oc.rotation * Eigen::Vector3d::UnitZ();
  const double angle = rad2deg(std::acos(std::clamp(fa.dot(fb), -1.0, 1.0)));
  return std::clamp(1.0 - (angle - 15.0) / 40.0, 0.0, 1.0);
}

inline MatchSet synth_matcher(const MatchFrameData& a, const MatchFrameData& b,
                              const SynthMatcherConfig& cfg, std::uint64_t seed) {
  if (a.object_tag != b.object_tag)
    throw NoCovisibility("frames observe different objects");
  const RigidTransform t_ba = compose(inverse(b.t_oc), a.t_oc);  // a cam -> b cam
  std::vector<std::pair<int, int>> covisible;
  for (int y = 0; y < a.cam.height; y += cfg.stride)
    for (int x = 0; x < a.cam.width; x += cfg.stride) {
      if (!a.mask->at(x, y)) continue;
      const Eigen::Vector3d pa = unproject(a.cam, x + 0.5, y + 0.5, a.depth_clean->at(x, y));
      const Eigen::Vector3d pb = t_ba.apply(pa);
      if (pb.z() <= 1e-9) continue;
      const double u = b.cam.fx * pb.x() / pb.z() + b.cam.cx;
      const double v = b.cam.fy * pb.y() / pb.z() + b.cam.cy;
      const int bx = int(std::lround(u - 0.5)), by = int(std::lround(v - 0.5));
      if (bx < 0 || bx >= b.cam.width || by < 0 || by >= b.cam.height) continue;
      if (!b.mask->at(bx, by)) continue;
      if (std::abs(b.depth_clean->at(bx, by) - pb.z()) > cfg.vis_eps) continue;  // occluded
      if (std::max(std::abs(u - (bx + 0.5)), std::abs(v - (by + 0.5))) >
          0.5 * cfg.subpix_gate)
        continue;
      covisible.emplace_back(y * a.cam.width + x, by * b.cam.width + bx);
    }
  if (covisible.empty()) throw NoCovisibility("frames share no visible surface");

  Rng rng(Rng::mix(seed, 0x3a7c4));
  // deterministic shuffle
  for (std::size_t i = covisible.size(); i > 1; --i)
    std::swap(covisible[i - 1], covisible[std::size_t(rng.uniform_int(int(i)))]);

  MatchSet out;
  const double baseline_rel = baseline_reliability(a, b);
  const double rel = a.reliability * b.reliability * baseline_rel;
  const int n_in =
      std::min<int>(cfg.inlier_count, int(std::floor(double(covisible.size()) * rel)));
  if (n_in == 0) throw NoCovisibility("no confident matches survive");
  const double q_scale = std::sqrt(std::clamp(rel, 0.5, 1.0));
  // wide baselines also pair less precisely; jittered pairs must still pass
  // the occlusion-consistency test so constructed inliers stay inliers
  const double jitter_sigma = cfg.baseline_jitter_px * (1.0 - baseline_rel);
  for (int i = 0; i < n_in; ++i) {
    auto [pa, pb] = covisible[std::size_t(i)];
    if (jitter_sigma > 0.0) {
      const int dx = int(std::lround(jitter_sigma * rng.normal()));
      const int dy = int(std::lround(jitter_sigma * rng.normal()));
      const int bx0 = pb % b.cam.width, by0 = pb / b.cam.width;
      const int bx = std::clamp(bx0 + dx, 0, b.cam.width - 1);
      const int by = std::clamp(by0 + dy, 0, b.cam.height - 1);
      if (b.mask->at(bx, by)) {
        const int ax = pa % a.cam.width, ay = pa / a.cam.width;
        const Eigen::Vector3d paw =
            unproject(a.cam, ax + 0.5, ay + 0.5, a.depth_clean->at(ax, ay));
        const double zb = t_ba.apply(paw).z();
        if (std::abs(b.depth_clean->at(bx, by) - zb) <= cfg.vis_eps)
          pb = by * b.cam.width + bx;
      }
    }
    out.matches.push_back({pa, pb, rng.uniform(cfg.q_inlier_lo, cfg.q_inlier_hi) * q_scale});
  }
  out.inlier_count = n_in;

  // outliers: random mask pixels paired independently, low confidence
  std::vector<int> apix, bpix;
  for (int y = 0; y < a.cam.height; ++y)
    for (int x = 0; x < a.cam.width; ++x)
      if (a.mask->at(x, y)) apix.push_back(y * a.cam.width + x);
  for (int y = 0; y < b.cam.height; ++y)
    for (int x = 0; x < b.cam.width; ++x)
      if (b.mask->at(x, y)) bpix.push_back(y * b.cam.width + x);
  const int n_out = int(std::lround(cfg.outlier_fraction / (1.0 - cfg.outlier_fraction) *
                                    double(n_in)));
  for (int i = 0; i < n_out && !apix.empty() && !bpix.empty(); ++i)
    out.matches.push_back({apix[std::size_t(rng.uniform_int(int(apix.size())))],
                           bpix[std::size_t(rng.uniform_int(int(bpix.size())))],
                           rng.uniform(cfg.q_outlier_lo, cfg.q_outlier_hi)});
  return out;
}

// ---------------------------------------------------------------------------
// Keyframe construction from harness frames
// ---------------------------------------------------------------------------

inline Keyframe keyframe_from_frame(const SyntheticFrame& f, int id, FrameKind kind,
                                    const RigidTransform& pose, double confidence = 1.0) {
  Keyframe kf;
  kf.id = id;
  kf.kind = kind;
  kf.pose = pose;
  kf.pointmap = Image3(f.cam.width, f.cam.height);
  kf.valid = f.mask;
  kf.confidence = Image<double>(f.cam.width, f.cam.height, 0.0);
  for (int y = 0; y < f.cam.height; ++y)
    for (int x = 0; x < f.cam.width; ++x) {
      if (!f.mask.at(x, y)) continue;
      const Eigen::Vector3d p = unproject(f.cam, x + 0.5, y + 0.5, f.depth.at(x, y));
      for (int c = 0; c < 3; ++c) kf.pointmap.at(x, y, c) = p[c];
      kf.confidence.at(x, y) = confidence;
    }
  kf.descriptor = compute_descriptor(f.color);
  return kf;
}

// ---------------------------------------------------------------------------
// Metrics: ADD / ADD-S AUC, chamfer, PSNR
// ---------------------------------------------------------------------------

struct PoseAccuracy {
  double add_auc = 0.0;
  double adds_auc = 0.0;
  std::vector<double> add_errors;
  std::vector<double> adds_errors;
};

// Errors for one pose pair; transforms map model points into the common
// evaluation frame (object -> camera).
inline double add_error(const RigidTransform& est, const RigidTransform& gt,
                        const std::vector<Eigen::Vector3d>& pts) {
  double sum = 0.0;
  for (const auto& x : pts) sum += (est.apply(x) - gt.apply(x)).norm();
  return sum / double(pts.size());
}

inline double adds_error(const RigidTransform& est, const RigidTransform& gt,
                         const std::vector<Eigen::Vector3d>& pts) {
  std::vector<Eigen::Vector3d> gt_pts;
  gt_pts.reserve(pts.size());
  for (const auto& x : pts) gt_pts.push_back(gt.apply(x));
  GridIndex index(gt_pts);
  double sum = 0.0;
  for (const auto& x : pts) sum += index.nearest(est.apply(x)).dist;
  return sum / double(pts.size());
}

inline double auc_of_errors(const std::vector<double>& errors, double threshold_max,
                            int bins = 100) {
  if (errors.empty()) return 0.0;
  double acc = 0.0;
  for (int i = 0; i < bins; ++i) {
    const double tau = threshold_max * (double(i) + 0.5) / double(bins);
    int hits = 0;
    for (double e : errors)
      if (e < tau) ++hits;
    acc += double(hits) / double(errors.size());
  }
  return acc / double(bins);
}

inline PoseAccuracy add_auc(const std::vector<RigidTransform>& est,
                            const std::vector<RigidTransform>& gt, const SyntheticObject& obj,
                            double threshold_max = 0.1) {
  if (est.size() != gt.size()) throw DimensionMismatch("pose lists differ in length");
  PoseAccuracy out;
  for (std::size_t i = 0; i < est.size(); ++i) {
    out.add_errors.push_back(add_error(est[i], gt[i], obj.metric_points));
    out.adds_errors.push_back(adds_error(est[i], gt[i], obj.metric_points));
  }
  out.add_auc = auc_of_errors(out.add_errors, threshold_max);
  out.adds_auc = auc_of_errors(out.adds_errors, threshold_max);
  return out;
}

// Symmetric mean nearest-neighbor distance. Brute force up to 5k target
// points, grid-accelerated above; the two paths agree to machine precision.
inline double chamfer(const PointCloud& a, const PointCloud& b) {
  if (a.empty() || b.empty()) throw EmptyCloud("chamfer of an empty cloud");
  auto side = [](const PointCloud& from, const PointCloud& to) {
    double sum = 0.0;
    if (to.size() <= 5000) {
      for (const auto& p : from.points) sum += nearest_brute(to.points, p).dist;
    } else {
      GridIndex index(to.points);
      for (const auto& p : from.points) sum += index.nearest(p).dist;
    }
    return sum / double(from.size());
  };
  return 0.5 * (side(a, b) + side(b, a));
}

// 10 log10(1 / MSE) for intensities in [0,1]; identical images -> +inf.
inline double psnr(const Image3& a, const Image3& b) {
  if (!a.same_shape(b.width, b.height)) throw DimensionMismatch("psnr image shape mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct MetricsReport {
  double add_auc = 0.0;
  double adds_auc = 0.0;
  double chamfer = 0.0;  // meters
  double psnr = 0.0;     // dB

  json to_json() const {
    json j{{"add_auc", add_auc}, {"adds_auc", adds_auc}, {"chamfer", chamfer}};
    if (std::isfinite(psnr))
      j["psnr"] = psnr;
    else
      j["psnr"] = "inf";
    return j;
  }
};

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  const double n = double(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  return sxy / std::sqrt(std::max(sxx * syy, 1e-300));
}

}  // namespace splatpose
