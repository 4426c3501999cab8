#pragma once

#include <deque>

#include "splatpose/posegraph.hpp"
#include "splatpose/splatmap.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Track state
// ---------------------------------------------------------------------------

enum class TrackStatus { Tracking, Lost };

struct FailureConfig {
  double drop_ratio = 0.3;   // lost when inliers fall below drop_ratio * window mean
  double d_max = 0.02;       // meters, geometric discrepancy gate
  std::size_t window = 8;
};

struct TrackState {
  RigidTransform pose;  // current T_OC (camera -> object canonical)
  std::deque<double> inlier_history;
  TrackStatus status = TrackStatus::Tracking;

  void push_inliers(double fraction, std::size_t window) {
    inlier_history.push_back(fraction);
    while (inlier_history.size() > window) inlier_history.pop_front();
  }

  double window_mean() const {
    if (inlier_history.empty()) return 0.0;
    double s = 0.0;
    for (double v : inlier_history) s += v;
    return s / double(inlier_history.size());
  }
};

// Lost on a sharp correspondence drop or a large geometric discrepancy.
inline TrackStatus detect_failure(const TrackState& state, double inlier_fraction,
                                  double geom_discrepancy, const FailureConfig& cfg) {
  if (state.inlier_history.empty()) throw ConfigError("detect_failure needs history");
  if (inlier_fraction < cfg.drop_ratio * state.window_mean()) return TrackStatus::Lost;
  if (geom_discrepancy > cfg.d_max) return TrackStatus::Lost;
  return TrackStatus::Tracking;
}

// ---------------------------------------------------------------------------
// Render-and-compare pose refinement
//
// Substitutes the learned refiner with silhouette-gated depth ICP: render the
// field at the current estimate, unproject rendered and observed depths
// inside the silhouette, associate by nearest neighbor in 3D and minimize the
// point-to-plane distance against normals taken from the observed depth map.
// Point-to-point association alone slides tangentially on the fuzzy splat
// surface; the plane constraint pins it. The interface (rendered RGB-D +
// observed RGB-D -> pose) stays the same so a learned refiner could be
// slotted in.
// ---------------------------------------------------------------------------

struct RefineConfig {
  int max_iters = 20;
  double icp_radius = 0.03;             // meters, nearest-neighbor pair gate
  double min_silhouette_overlap = 0.2;  // IoU against the observed mask
  double convergence_tol = 1e-6;        // pose change (rot rad + trans m)
  double depth_sil_gate = 0.5;          // rendered silhouette needed for a depth sample
};

struct RefineResult {
  RigidTransform pose;     // refined T_OC
  double fit_score = 0.0;  // mean inlier residual, meters
  double overlap = 0.0;
  int iterations = 0;
};

// Pose arguments and results are T_OC (camera frame -> object canonical).
inline RefineResult refine_pose(const GaussianField& field, const Camera& cam,
                                const Image3& /*obs_color*/, const Image<double>& obs_depth,
                                const RigidTransform& init, const RefineConfig& cfg = {}) {
  auto render_at = [&](const RigidTransform& t_oc) {
    return render(field, cam, inverse(t_oc));
  };

  // observed surface points with normals from the depth-map gradient, fixed
  // for the whole refinement
  auto valid_obs = [&](int x, int y) {
    const double d = obs_depth.at(x, y);
    return std::isfinite(d) && d > 0.0;
  };
  std::vector<Eigen::Vector3d> observed, normals;
  for (int y = 1; y < cam.height - 1; ++y)
    for (int x = 1; x < cam.width - 1; ++x) {
      if (!valid_obs(x, y)) continue;
      if (!valid_obs(x - 1, y) || !valid_obs(x + 1, y) || !valid_obs(x, y - 1) ||
          !valid_obs(x, y + 1))
        continue;
      const Eigen::Vector3d du =
          unproject(cam, x + 1.5, y + 0.5, obs_depth.at(x + 1, y)) -
          unproject(cam, x - 0.5, y + 0.5, obs_depth.at(x - 1, y));
      const Eigen::Vector3d dv =
          unproject(cam, x + 0.5, y + 1.5, obs_depth.at(x, y + 1)) -
          unproject(cam, x + 0.5, y - 0.5, obs_depth.at(x, y - 1));
      Eigen::Vector3d n = du.cross(dv);
      const double len = n.norm();
      if (len < 1e-12) continue;
      observed.push_back(unproject(cam, x + 0.5, y + 0.5, obs_depth.at(x, y)));
      normals.push_back(n / len);
    }
  if (observed.empty()) throw InsufficientOverlap("observation carries no valid depth");
  const GridIndex obs_index(observed, cfg.icp_radius);

  auto overlap_of = [&](const RenderOutput& ro) {
    int inter = 0, uni = 0;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const bool rendered = ro.silhouette.at(x, y) > cfg.depth_sil_gate;
        const bool obs = valid_obs(x, y);
        if (rendered && obs) ++inter;
        if (rendered || obs) ++uni;
      }
    return uni == 0 ? 0.0 : double(inter) / double(uni);
  };

  struct Pairing {
    std::vector<Eigen::Vector3d> src, dst, n;
    double residual = std::numeric_limits<double>::infinity();  // mean |n.(src-dst)|
  };
  auto associate = [&](const RenderOutput& ro) {
    Pairing pairs;
    double sum = 0.0;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        if (ro.silhouette.at(x, y) <= cfg.depth_sil_gate) continue;
        const Eigen::Vector3d p = unproject(cam, x + 0.5, y + 0.5, ro.depth.at(x, y));
        const NearestHit hit = obs_index.nearest(p, cfg.icp_radius);
        if (hit.index < 0) continue;
        pairs.src.push_back(p);
        pairs.dst.push_back(observed[std::size_t(hit.index)]);
        pairs.n.push_back(normals[std::size_t(hit.index)]);
        sum += std::abs(pairs.n.back().dot(p - pairs.dst.back()));
      }
    if (!pairs.src.empty()) pairs.residual = sum / double(pairs.src.size());
    return pairs;
  };

  // small-angle point-to-plane solve for the camera-frame correction that
  // moves the rendered points onto the observed surface
  auto solve_delta = [](const Pairing& pairs) {
    Eigen::Matrix<double, 6, 6> a = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> b = Eigen::Matrix<double, 6, 1>::Zero();
    for (std::size_t i = 0; i < pairs.src.size(); ++i) {
      Eigen::Matrix<double, 6, 1> row;
      row.head<3>() = pairs.src[i].cross(pairs.n[i]);
      row.tail<3>() = pairs.n[i];
      const double rhs = pairs.n[i].dot(pairs.dst[i] - pairs.src[i]);
      a += row * row.transpose();
      b += row * rhs;
    }
    const Eigen::Matrix<double, 6, 1> x =
        (a + 1e-12 * Eigen::Matrix<double, 6, 6>::Identity()).ldlt().solve(b);
    RigidTransform delta;
    delta.rotation = Eigen::Quaterniond(so3_exp(x.head<3>())).normalized();
    delta.translation = x.tail<3>();
    return delta;
  };

  RenderOutput ro = render_at(init);
  const double overlap = overlap_of(ro);
  if (overlap < cfg.min_silhouette_overlap)
    throw InsufficientOverlap("initial silhouette overlap below the configured minimum");

  Pairing pairs = associate(ro);
  if (pairs.src.empty()) throw InsufficientOverlap("no depth pairs inside the silhouette");

  RefineResult best;
  best.pose = init;
  best.overlap = overlap;
  best.fit_score = pairs.residual;

  RigidTransform current = init;
  double residual = pairs.residual;
  for (int it = 0; it < cfg.max_iters; ++it) {
    const RigidTransform delta = solve_delta(pairs);
    // observed = delta(rendered) and rendering uses inverse(pose), so the new
    // camera->object map undoes delta first
    const RigidTransform next = compose(current, inverse(delta));
    ro = render_at(next);
    pairs = associate(ro);
    if (pairs.src.empty() || pairs.residual > residual) break;
    current = next;
    residual = pairs.residual;
    if (residual < best.fit_score) {
      best.pose = current;
      best.fit_score = residual;
      best.iterations = it + 1;
    }
    const double step = rotation_angle(delta) + delta.translation.norm();
    if (step < cfg.convergence_tol) break;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Pose bootstrap from cross-frame matches (weighted Kabsch with one robust
// reweighting pass). Matches pair pixels of a posed keyframe with pixels of
// the query frame; the fit maps query-frame points into the object frame.
// ---------------------------------------------------------------------------

struct BootstrapResult {
  RigidTransform pose;        // T_OC of the query frame
  double inlier_fraction = 0.0;
  double mean_residual = 0.0;
};

inline BootstrapResult pose_from_matches(const Keyframe& kf, const Image3& query_pointmap,
                                         const Image<std::uint8_t>& query_valid,
                                         const std::vector<Match>& matches,
                                         double inlier_radius = 0.02) {
  std::vector<Eigen::Vector3d> src, dst;
  std::vector<double> weights;
  for (const auto& m : matches) {
    if (!kf.point_valid(m.pixel_i)) continue;
    if (!query_valid.data[std::size_t(m.pixel_j)]) continue;
    const int x = m.pixel_j % query_pointmap.width, y = m.pixel_j / query_pointmap.width;
    src.emplace_back(query_pointmap.at(x, y, 0), query_pointmap.at(x, y, 1),
                     query_pointmap.at(x, y, 2));
    dst.push_back(kf.pose.apply(kf.point(m.pixel_i)));
    weights.push_back(m.q);
  }
  if (src.size() < 3) throw NoCorrespondences("too few valid matches for a pose fit");

  RigidTransform fit = fit_rigid(src, dst, &weights);
  for (int pass = 0; pass < 3; ++pass) {
    std::vector<double> rw(weights);
    for (std::size_t i = 0; i < src.size(); ++i) {
      const double r = (fit.apply(src[i]) - dst[i]).norm();
      rw[i] = weights[i] * (r <= inlier_radius ? 1.0 : inlier_radius / r);
    }
    fit = fit_rigid(src, dst, &rw);
  }

  BootstrapResult out;
  out.pose = fit;
  int inliers = 0;
  double res_sum = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double r = (fit.apply(src[i]) - dst[i]).norm();
    if (r <= inlier_radius) {
      ++inliers;
      res_sum += r;
    }
  }
  out.inlier_fraction = double(inliers) / double(src.size());
  out.mean_residual = inliers ? res_sum / double(inliers) : std::numeric_limits<double>::infinity();
  return out;
}

// Robust mean 3D disagreement of the matches under a hypothesised query pose;
// the common currency for arbitrating between pose candidates.
inline double match_discrepancy(const Keyframe& kf, const Image3& query_pointmap,
                                const Image<std::uint8_t>& query_valid,
                                const std::vector<Match>& matches, const RigidTransform& pose,
                                double q_min = 0.5, double cap = 0.2) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : matches) {
    if (m.q < q_min) continue;
    if (!kf.point_valid(m.pixel_i) || !query_valid.data[std::size_t(m.pixel_j)]) continue;
    const int x = m.pixel_j % query_pointmap.width, y = m.pixel_j / query_pointmap.width;
    const Eigen::Vector3d q(query_pointmap.at(x, y, 0), query_pointmap.at(x, y, 1),
                            query_pointmap.at(x, y, 2));
    sum += std::min((kf.pose.apply(kf.point(m.pixel_i)) - pose.apply(q)).norm(), cap);
    ++n;
  }
  return n ? sum / double(n) : std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// Relocalization: retrieve top-k candidates, solve the query pose against all
// of them jointly with graph poses held fixed, accept through the failure
// detector's discrepancy gate.
// ---------------------------------------------------------------------------

struct RelocalizeConfig {
  int top_k = 3;
  double accept_discrepancy = 0.02;  // meters; reuse of the d_max gate
  SolverConfig solver;
};

struct RelocalizeOutcome {
  bool success = false;
  RigidTransform pose;
  double discrepancy = std::numeric_limits<double>::infinity();
};

inline RelocalizeOutcome relocalize(const PoseGraph& graph, const Retriever& retriever,
                                    const Image3& query_color, const Image3& query_pointmap,
                                    const Image<std::uint8_t>& query_valid,
                                    const Image<double>& query_conf, const MatcherFn& matcher,
                                    const RelocalizeConfig& cfg) {
  RelocalizeOutcome out;
  const Eigen::VectorXd desc = compute_descriptor(query_color);
  const auto candidates = retriever.query(desc, cfg.top_k);
  if (candidates.empty()) return out;

  // temporary local graph: fixed candidate nodes + the free query node
  PoseGraph local;
  Keyframe query;
  query.id = -1;
  query.kind = FrameKind::Real;
  query.pointmap = query_pointmap;
  query.valid = query_valid;
  query.confidence = query_conf;
  query.descriptor = desc;

  // collect edges first; bootstrap from the candidate with the most matches
  std::size_t best_matches = 0;
  bool bootstrapped = false;
  for (const auto& [cand_id, sim] : candidates) {
    const Keyframe* cand = graph.find(cand_id);
    if (!cand) continue;
    MatchSet ms;
    try {
      ms = matcher(*cand, query);
    } catch (const NoCovisibility&) {
      continue;
    }
    if (ms.matches.empty()) continue;
    if (ms.matches.size() > best_matches) {
      try {
        query.pose = pose_from_matches(*cand, query_pointmap, query_valid, ms.matches).pose;
        best_matches = ms.matches.size();
        bootstrapped = true;
      } catch (const NoCorrespondences&) {
      }
    }
    Keyframe anchor = *cand;
    anchor.kind = FrameKind::Diffusion;  // pin the candidate pose in the local solve
    GraphEdge edge;
    edge.i = anchor.id;
    edge.j = query.id;
    edge.matches = ms.matches;
    local.nodes.push_back(std::move(anchor));
    local.edges.push_back(std::move(edge));
  }
  if (!bootstrapped || local.edges.empty()) return out;
  local.nodes.push_back(query);
  optimize(local, cfg.solver);

  const Keyframe* solved = local.find(-1);
  double res_sum = 0.0;
  std::size_t res_count = 0;
  for (const auto& edge : local.edges) {
    const Keyframe* ki = local.find(edge.i);
    for (const auto& m : edge.matches) {
      if (!ki->point_valid(m.pixel_i) || !solved->point_valid(m.pixel_j)) continue;
      if (m.q < cfg.solver.q_min) continue;
      const double r =
          (ki->pose.apply(ki->point(m.pixel_i)) - solved->pose.apply(solved->point(m.pixel_j)))
              .norm();
      res_sum += std::min(r, 10.0 * cfg.accept_discrepancy);  // robust mean
      ++res_count;
    }
  }
  if (res_count == 0) return out;
  out.discrepancy = res_sum / double(res_count);
  out.pose = solved->pose;
  out.success = out.discrepancy <= cfg.accept_discrepancy;
  return out;
}

}  // namespace splatpose
