#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "splatpose/common.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Rigid and similarity transforms
// ---------------------------------------------------------------------------

struct RigidTransform {
  Eigen::Quaterniond rotation{1.0, 0.0, 0.0, 0.0};  // unit quaternion
  Eigen::Vector3d translation{0.0, 0.0, 0.0};       // meters

  static RigidTransform identity() { return {}; }

  static RigidTransform from_axis_angle(const Eigen::Vector3d& axis, double angle,
                                        const Eigen::Vector3d& t = Eigen::Vector3d::Zero()) {
    RigidTransform out;
    out.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(angle, axis.normalized()));
    out.translation = t;
    return out;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  Eigen::Matrix3d rotation_matrix() const { return rotation.toRotationMatrix(); }
};

inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

inline RigidTransform inverse(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.conjugate();
  out.translation = -(out.rotation * t.translation);
  return out;
}

// Rotation angle of the transform, in radians.
inline double rotation_angle(const RigidTransform& t) {
  const double w = std::min(1.0, std::abs(t.rotation.normalized().w()));
  return 2.0 * std::acos(w);
}

// Angle of the relative rotation between two transforms, in radians.
inline double rotation_distance(const RigidTransform& a, const RigidTransform& b) {
  return rotation_angle(compose(inverse(a), b));
}

inline double translation_distance(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation - b.translation).norm();
}

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

inline Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) return Eigen::Matrix3d::Identity() + skew(w);
  const Eigen::Vector3d axis = w / theta;
  return Eigen::AngleAxisd(theta, axis).toRotationMatrix();
}

// Retraction used by solvers: rotation perturbed on SO(3), translation additive.
// delta = (wx, wy, wz, tx, ty, tz).
inline RigidTransform retract(const RigidTransform& t, const Eigen::Matrix<double, 6, 1>& delta) {
  RigidTransform out;
  out.rotation = (t.rotation * Eigen::Quaterniond(so3_exp(delta.head<3>()))).normalized();
  out.translation = t.translation + t.rotation * delta.tail<3>();
  return out;
}

struct SimTransform {
  double scale = 1.0;
  RigidTransform rigid;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return scale * (rigid.rotation * p) + rigid.translation;
  }
};

inline json to_json(const RigidTransform& t, double scale = 1.0) {
  return json{{"qw", t.rotation.w()}, {"qx", t.rotation.x()}, {"qy", t.rotation.y()},
              {"qz", t.rotation.z()}, {"tx", t.translation.x()}, {"ty", t.translation.y()},
              {"tz", t.translation.z()}, {"scale", scale}};
}

inline json to_json(const SimTransform& t) { return to_json(t.rigid, t.scale); }

inline RigidTransform rigid_from_json(const json& j) {
  RigidTransform t;
  t.rotation = Eigen::Quaterniond(j.at("qw").get<double>(), j.at("qx").get<double>(),
                                  j.at("qy").get<double>(), j.at("qz").get<double>())
                   .normalized();
  t.translation = {j.at("tx").get<double>(), j.at("ty").get<double>(), j.at("tz").get<double>()};
  return t;
}

inline SimTransform sim_from_json(const json& j) {
  SimTransform t;
  t.rigid = rigid_from_json(j);
  t.scale = j.value("scale", 1.0);
  if (!(t.scale > 0.0)) throw ConfigError("sim transform scale must be positive");
  return t;
}

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;  // pixels
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal lengths must be positive");
    if (!(cx >= 0 && cx < width) || !(cy >= 0 && cy < height))
      throw ConfigError("camera principal point outside image");
  }
};

struct PixelDepth {
  double u, v, depth;
};

inline PixelDepth project(const Camera& cam, const Eigen::Vector3d& p_cam) {
  if (!(p_cam.z() > 0.0)) throw NonPositiveDepth("projected point has non-positive depth");
  return {cam.fx * p_cam.x() / p_cam.z() + cam.cx, cam.fy * p_cam.y() / p_cam.z() + cam.cy,
          p_cam.z()};
}

inline PixelDepth project(const Camera& cam, const RigidTransform& t, const Eigen::Vector3d& p) {
  return project(cam, t.apply(p));
}

inline Eigen::Vector3d unproject(const Camera& cam, double u, double v, double depth) {
  return {(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
}

// ---------------------------------------------------------------------------
// Point clouds
// ---------------------------------------------------------------------------

struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<double> confidence;  // empty, or one strictly positive entry per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) throw ConfigError("point cloud contains non-finite coordinates");
    if (!confidence.empty()) {
      if (confidence.size() != points.size())
        throw DimensionMismatch("confidence length does not match point count");
      for (double c : confidence)
        if (!(c > 0.0)) throw ConfigError("confidence entries must be strictly positive");
    }
  }

  Eigen::Vector3d centroid() const {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Eigen::Vector3d(c / double(points.size()));
  }

  PointCloud transformed(const RigidTransform& t) const {
    PointCloud out;
    out.points.reserve(points.size());
    for (const auto& p : points) out.points.push_back(t.apply(p));
    out.confidence = confidence;
    return out;
  }

  PointCloud transformed(const SimTransform& t) const {
    PointCloud out;
    out.points.reserve(points.size());
    for (const auto& p : points) out.points.push_back(t.apply(p));
    out.confidence = confidence;
    return out;
  }
};

// Deterministic stride subsample down to at most n points.
inline PointCloud subsample(const PointCloud& cloud, std::size_t n) {
  if (cloud.size() <= n || n == 0) return cloud;
  PointCloud out;
  out.points.reserve(n);
  const double step = double(cloud.size()) / double(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = std::size_t(double(i) * step);
    out.points.push_back(cloud.points[idx]);
    if (!cloud.confidence.empty()) out.confidence.push_back(cloud.confidence[idx]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ASCII PLY I/O (properties x,y,z[,confidence])
// ---------------------------------------------------------------------------

inline void save_ply(const PointCloud& cloud, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path + " for writing");
  const bool with_conf = !cloud.confidence.empty();
  f << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n"
    << "property double x\nproperty double y\nproperty double z\n";
  if (with_conf) f << "property double confidence\n";
  f << "end_header\n";
  f.precision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    f << cloud.points[i].x() << " " << cloud.points[i].y() << " " << cloud.points[i].z();
    if (with_conf) f << " " << cloud.confidence[i];
    f << "\n";
  }
}

inline PointCloud load_ply(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path);
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> props;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "element") {
      std::string what;
      ss >> what >> count;
      if (what != "vertex") throw IoError("unsupported ply element: " + what);
    } else if (tok == "property") {
      std::string type, name;
      ss >> type >> name;
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  PointCloud cloud;
  cloud.points.reserve(count);
  const bool with_conf =
      std::find(props.begin(), props.end(), "confidence") != props.end();
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(f, line)) throw IoError("ply truncated: " + path);
    std::istringstream ss(line);
    Eigen::Vector3d p;
    ss >> p.x() >> p.y() >> p.z();
    cloud.points.push_back(p);
    if (with_conf) {
      double c;
      ss >> c;
      cloud.confidence.push_back(c);
    }
  }
  cloud.validate();
  return cloud;
}

// ---------------------------------------------------------------------------
// Exact nearest neighbors: brute force, and a uniform-grid index whose ring
// search terminates only once the current best provably cannot be beaten.
// ---------------------------------------------------------------------------

struct NearestHit {
  int index = -1;
  double dist = std::numeric_limits<double>::infinity();
};

inline NearestHit nearest_brute(const std::vector<Eigen::Vector3d>& pts,
                                const Eigen::Vector3d& q) {
  NearestHit best;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = (pts[i] - q).squaredNorm();
    if (d < best.dist) {
      best.dist = d;
      best.index = int(i);
    }
  }
  best.dist = std::sqrt(best.dist);
  return best;
}

class GridIndex {
 public:
  explicit GridIndex(const std::vector<Eigen::Vector3d>& pts, double cell_hint = 0.0)
      : pts_(pts) {
    if (pts.empty()) return;
    Eigen::Vector3d lo = pts[0], hi = pts[0];
    for (const auto& p : pts) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    origin_ = lo;
    const double diag = (hi - lo).norm();
    cell_ = cell_hint > 0.0 ? cell_hint
                            : std::max(1e-9, diag / std::cbrt(double(pts.size())) );
    lo_cell_ = coords(pts[0]);
    hi_cell_ = lo_cell_;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const Eigen::Vector3i c = coords(pts[i]);
      lo_cell_ = lo_cell_.cwiseMin(c);
      hi_cell_ = hi_cell_.cwiseMax(c);
      cells_[pack(c.x(), c.y(), c.z())].push_back(int(i));
    }
  }

  // Exact nearest neighbor; optionally capped at max_dist (returns index -1 beyond).
  NearestHit nearest(const Eigen::Vector3d& q,
                     double max_dist = std::numeric_limits<double>::infinity()) const {
    NearestHit best;
    if (pts_.empty()) return best;
    const Eigen::Vector3i c0 = coords(q);
    // beyond this Chebyshev ring there are no occupied cells at all
    const int last_ring =
        std::max((lo_cell_ - c0).cwiseAbs().maxCoeff(), (hi_cell_ - c0).cwiseAbs().maxCoeff());
    for (int r = 0; r <= last_ring; ++r) {
      // Any point in a ring-r cell is at least (r-1)*cell away from q.
      const double ring_lower = double(r - 1) * cell_;
      if (best.index >= 0 && std::sqrt(best.dist) <= ring_lower) break;
      if (ring_lower > max_dist) break;
      visit_ring(c0, r, q, best);
    }
    best.dist = std::sqrt(best.dist);
    if (best.dist > max_dist) return {};
    return best;
  }

 private:
  using Key = std::uint64_t;

  Eigen::Vector3i coords(const Eigen::Vector3d& p) const {
    return {int(std::floor((p.x() - origin_.x()) / cell_)),
            int(std::floor((p.y() - origin_.y()) / cell_)),
            int(std::floor((p.z() - origin_.z()) / cell_))};
  }

  Key key(const Eigen::Vector3d& p) const {
    const Eigen::Vector3i c = coords(p);
    return pack(c.x(), c.y(), c.z());
  }

  static Key pack(int x, int y, int z) {
    const auto u = [](int v) { return std::uint64_t(std::uint32_t(v + (1 << 20))); };
    return (u(x) << 42) | (u(y) << 21) | u(z);
  }

  void visit_ring(const Eigen::Vector3i& c0, int r, const Eigen::Vector3d& q,
                  NearestHit& best) const {
    auto test_cell = [&](int x, int y, int z) {
      const auto it = cells_.find(pack(x, y, z));
      if (it == cells_.end()) return;
      for (int idx : it->second) {
        const double d = (pts_[idx] - q).squaredNorm();
        if (d < best.dist) {
          best.dist = d;
          best.index = idx;
        }
      }
    };
    if (r == 0) {
      test_cell(c0.x(), c0.y(), c0.z());
      return;
    }
    for (int dx = -r; dx <= r; ++dx)
      for (int dy = -r; dy <= r; ++dy)
        for (int dz = -r; dz <= r; ++dz) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != r) continue;
          test_cell(c0.x() + dx, c0.y() + dy, c0.z() + dz);
        }
  }

  const std::vector<Eigen::Vector3d>& pts_;
  Eigen::Vector3d origin_ = Eigen::Vector3d::Zero();
  double cell_ = 1.0;
  Eigen::Vector3i lo_cell_ = Eigen::Vector3i::Zero();
  Eigen::Vector3i hi_cell_ = Eigen::Vector3i::Zero();
  std::unordered_map<Key, std::vector<int>> cells_;
};

// ---------------------------------------------------------------------------
// PCA scale recovery
// ---------------------------------------------------------------------------

inline Eigen::Matrix3d covariance(const PointCloud& cloud) {
  const Eigen::Vector3d c = cloud.centroid();
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : cloud.points) {
    const Eigen::Vector3d d = p - c;
    cov += d * d.transpose();
  }
  return cov / double(cloud.size());
}

// Scale between clouds from the mean eigenvalues of their covariances,
// s = sqrt(mean_eig(target) / mean_eig(source)). Invariant to rotation and
// translation of either cloud.
inline double pca_scale(const PointCloud& source, const PointCloud& target) {
  if (source.size() < 4 || target.size() < 4)
    throw DegenerateCloud("pca_scale needs at least 4 points per cloud");
  const Eigen::Matrix3d cs = covariance(source);
  const Eigen::Matrix3d ct = covariance(target);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cs), et(ct);
  const Eigen::Vector3d ls = es.eigenvalues(), lt = et.eigenvalues();
  // rank check: smallest eigenvalue relative to largest
  if (ls.maxCoeff() <= 0 || lt.maxCoeff() <= 0 || ls.minCoeff() < 1e-12 * ls.maxCoeff() ||
      lt.minCoeff() < 1e-12 * lt.maxCoeff())
    throw DegenerateCloud("covariance rank < 3");
  return std::sqrt(lt.mean() / ls.mean());
}

// ---------------------------------------------------------------------------
// Point-to-point ICP with closed-form SVD rigid fit
// ---------------------------------------------------------------------------

struct IcpConfig {
  double radius = 0.05;       // correspondence gate, meters
  int max_iters = 50;
  double tol = 1e-8;          // relative residual change
  std::size_t subsample = 0;  // 0 = use all source points
};

struct IcpResult {
  RigidTransform transform;
  double residual = 0.0;               // mean nearest-neighbor distance of matched pairs
  std::vector<double> residual_history;  // residual after each accepted iteration
  int iterations = 0;
};

// Kabsch: rigid transform minimizing sum w_i |T(p_i) - q_i|^2.
inline RigidTransform fit_rigid(const std::vector<Eigen::Vector3d>& src,
                                const std::vector<Eigen::Vector3d>& dst,
                                const std::vector<double>* weights = nullptr) {
  const std::size_t n = src.size();
  double wsum = 0.0;
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    cs += w * src[i];
    cd += w * dst[i];
    wsum += w;
  }
  cs /= wsum;
  cd /= wsum;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    h += w * (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
  RigidTransform out;
  out.rotation = Eigen::Quaterniond(svd.matrixV() * d * svd.matrixU().transpose()).normalized();
  out.translation = cd - out.rotation * cs;
  return out;
}

inline IcpResult icp_refine(const PointCloud& source, const PointCloud& target,
                            const RigidTransform& init, const IcpConfig& cfg = {}) {
  const PointCloud src = cfg.subsample ? subsample(source, cfg.subsample) : source;
  GridIndex index(target.points, cfg.radius);

  auto associate = [&](const RigidTransform& t, std::vector<Eigen::Vector3d>& s,
                       std::vector<Eigen::Vector3d>& d) -> double {
    s.clear();
    d.clear();
    double sum = 0.0;
    for (const auto& p : src.points) {
      const Eigen::Vector3d tp = t.apply(p);
      const NearestHit hit = index.nearest(tp, cfg.radius);
      if (hit.index < 0) continue;
      s.push_back(tp);
      d.push_back(target.points[hit.index]);
      sum += hit.dist;
    }
    return s.empty() ? std::numeric_limits<double>::infinity() : sum / double(s.size());
  };

  IcpResult result;
  result.transform = init;
  std::vector<Eigen::Vector3d> s, d;
  double residual = associate(init, s, d);
  if (s.empty()) throw NoCorrespondences("no point pairs within the correspondence radius");
  result.residual = residual;
  result.residual_history.push_back(residual);

  for (int it = 0; it < cfg.max_iters; ++it) {
    const RigidTransform delta = fit_rigid(s, d);
    const RigidTransform candidate = compose(delta, result.transform);
    std::vector<Eigen::Vector3d> s2, d2;
    const double next = associate(candidate, s2, d2);
    if (s2.empty() || next > residual) break;  // keep the best transform seen
    result.transform = candidate;
    result.iterations = it + 1;
    result.residual_history.push_back(next);
    const double rel = (residual - next) / std::max(residual, 1e-300);
    residual = next;
    result.residual = next;
    s.swap(s2);
    d.swap(d2);
    if (rel < cfg.tol) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Generated-to-real alignment: PCA scale, centroid shift, then ICP
// ---------------------------------------------------------------------------

inline SimTransform align_generated_to_real(const PointCloud& gen, const PointCloud& real,
                                            const IcpConfig& icp_cfg = {}) {
  const double s = pca_scale(gen, real);
  PointCloud scaled;
  scaled.points.reserve(gen.size());
  for (const auto& p : gen.points) scaled.points.push_back(s * p);

  RigidTransform init;
  init.translation = real.centroid() - scaled.centroid();
  const IcpResult icp = icp_refine(scaled, real, init, icp_cfg);

  SimTransform out;
  out.scale = s;
  out.rigid = icp.transform;
  return out;
}

}  // namespace splatpose
