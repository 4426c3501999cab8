#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <functional>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "splatpose/geometry.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Keyframes, matches, edges
// ---------------------------------------------------------------------------

enum class FrameKind { Real, Diffusion };

struct Keyframe {
  int id = -1;
  FrameKind kind = FrameKind::Real;
  RigidTransform pose;              // frame -> object canonical
  Image3 pointmap;                  // per-pixel 3D point in the frame's own camera frame
  Image<std::uint8_t> valid;        // pointmap validity mask
  Image<double> confidence;        // cap-normalized confidence in [0,1]
  Eigen::VectorXd descriptor;       // retrieval descriptor

  Eigen::Vector3d point(int pixel) const {
    const int x = pixel % pointmap.width, y = pixel / pointmap.width;
    return {pointmap.at(x, y, 0), pointmap.at(x, y, 1), pointmap.at(x, y, 2)};
  }
  bool point_valid(int pixel) const { return valid.data[std::size_t(pixel)] != 0; }
  double conf_at(int pixel) const { return confidence.data[std::size_t(pixel)]; }
};

struct Match {
  int pixel_i = 0;
  int pixel_j = 0;
  double q = 1.0;  // match confidence in [0,1]
};

struct GraphEdge {
  int i = -1, j = -1;
  std::vector<Match> matches;
};

struct MatchSet {
  std::vector<Match> matches;
  int inlier_count = 0;
};

struct PoseGraph {
  std::vector<Keyframe> nodes;
  std::vector<GraphEdge> edges;

  const Keyframe* find(int id) const {
    for (const auto& n : nodes)
      if (n.id == id) return &n;
    return nullptr;
  }
  Keyframe* find(int id) { return const_cast<Keyframe*>(std::as_const(*this).find(id)); }

  bool connected(int a, int b) const {
    for (const auto& e : edges)
      if ((e.i == a && e.j == b) || (e.i == b && e.j == a)) return true;
    return false;
  }
};

// ---------------------------------------------------------------------------
// Solver configuration and per-match weighting
// ---------------------------------------------------------------------------

struct SolverConfig {
  double sigma_g_sq = 2.5e-5;  // geometric noise scale, meters^2
  double q_min = 0.5;
  double c_min = 0.3;
  double huber_delta = 3.0 * std::sqrt(2.5e-5);
  double lm_lambda0 = 1e-6;
  double lm_factor = 10.0;
  int max_iters = 50;
  double rel_tol = 1e-12;

  static SolverConfig from_json(const json& j) {
    SolverConfig c;
    c.sigma_g_sq = j.value("sigma_g_sq", c.sigma_g_sq);
    c.q_min = j.value("q_min", c.q_min);
    c.c_min = j.value("c_min", c.c_min);
    c.huber_delta = j.value("huber_delta", 3.0 * std::sqrt(c.sigma_g_sq));
    c.lm_lambda0 = j.value("lm_lambda0", c.lm_lambda0);
    c.lm_factor = j.value("lm_factor", c.lm_factor);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.rel_tol = j.value("rel_tol", c.rel_tol);
    return c;
  }

  json to_json() const {
    return json{{"sigma_g_sq", sigma_g_sq}, {"q_min", q_min},           {"c_min", c_min},
                {"huber_delta", huber_delta}, {"lm_lambda0", lm_lambda0}, {"lm_factor", lm_factor},
                {"max_iters", max_iters},   {"rel_tol", rel_tol}};
  }
};

// sigma^2 / q when both gates pass; empty (the match is excluded) otherwise.
inline std::optional<double> match_weight(double q, double c, const SolverConfig& cfg) {
  if (q < cfg.q_min || c < cfg.c_min) return std::nullopt;
  return cfg.sigma_g_sq / q;
}

// Huber penalty: x^2 inside delta, linear tail outside (C1 continuous).
inline double huber_cost(double x, double delta) {
  return x <= delta ? x * x : delta * (2.0 * x - delta);
}

// IRLS weight so that Gauss-Newton on sqrt(k) r matches the Huber objective.
inline double huber_irls(double x, double delta) { return x <= delta ? 1.0 : delta / x; }

struct WeightedResidual {
  Eigen::Vector3d r;       // (X_i - T_ij X_j) / w
  double inv_w = 0.0;
  double huber_weight = 1.0;
  int match_index = -1;
};

inline std::vector<WeightedResidual> edge_residuals(const Keyframe& ki, const Keyframe& kj,
                                                    const GraphEdge& edge,
                                                    const SolverConfig& cfg) {
  const RigidTransform t_ij = compose(inverse(ki.pose), kj.pose);
  std::vector<WeightedResidual> out;
  out.reserve(edge.matches.size());
  for (std::size_t m = 0; m < edge.matches.size(); ++m) {
    const Match& match = edge.matches[m];
    if (!ki.point_valid(match.pixel_i) || !kj.point_valid(match.pixel_j)) continue;
    const double c = std::min(ki.conf_at(match.pixel_i), kj.conf_at(match.pixel_j));
    const auto w = match_weight(match.q, c, cfg);
    if (!w) continue;
    WeightedResidual wr;
    wr.inv_w = 1.0 / *w;
    wr.r = (ki.point(match.pixel_i) - t_ij.apply(kj.point(match.pixel_j))) * wr.inv_w;
    wr.huber_weight = huber_irls(wr.r.norm(), cfg.huber_delta);
    wr.match_index = int(m);
    out.push_back(wr);
  }
  return out;
}

inline double graph_cost(const PoseGraph& graph, const SolverConfig& cfg) {
  double cost = 0.0;
  for (const auto& edge : graph.edges) {
    const Keyframe* ki = graph.find(edge.i);
    const Keyframe* kj = graph.find(edge.j);
    if (!ki || !kj) throw ConfigError("edge references a missing node");
    for (const auto& wr : edge_residuals(*ki, *kj, edge, cfg))
      cost += huber_cost(wr.r.norm(), cfg.huber_delta);
  }
  return cost;
}

// ---------------------------------------------------------------------------
// Gauss-Newton with sparse Cholesky and Levenberg damping
//
// Diffusion-node poses are never touched. When the graph holds no diffusion
// node, the lowest-id Real node is anchored to remove the gauge.
// ---------------------------------------------------------------------------

struct NormalSystem {
  Eigen::SparseMatrix<double> h;
  Eigen::VectorXd g;              // sum k J^T r
  double cost = 0.0;
  std::vector<int> free_nodes;    // node array indices, one 6-dof block each
  std::size_t active_matches = 0;
};

namespace detail {

inline std::unordered_set<int> grounded_free_nodes(const PoseGraph& graph) {
  // union-find over edges
  std::unordered_map<int, int> parent;
  std::function<int(int)> find = [&](int x) {
    auto it = parent.find(x);
    if (it == parent.end() || it->second == x) return x;
    return it->second = find(it->second);
  };
  for (const auto& e : graph.edges) {
    parent.emplace(e.i, e.i);
    parent.emplace(e.j, e.j);
    parent[find(e.i)] = find(e.j);
  }
  bool any_diffusion = false;
  for (const auto& n : graph.nodes)
    if (n.kind == FrameKind::Diffusion) any_diffusion = true;
  std::optional<int> anchor;
  if (!any_diffusion) {
    for (const auto& n : graph.nodes)
      if (n.kind == FrameKind::Real && (!anchor || n.id < *anchor)) anchor = n.id;
  }
  std::unordered_set<int> grounded_roots;
  for (const auto& n : graph.nodes) {
    if (parent.find(n.id) == parent.end()) continue;
    if (n.kind == FrameKind::Diffusion || (anchor && n.id == *anchor))
      grounded_roots.insert(find(n.id));
  }
  std::unordered_set<int> free;
  for (const auto& n : graph.nodes) {
    if (n.kind != FrameKind::Real || (anchor && n.id == *anchor)) continue;
    const auto it = parent.find(n.id);
    if (it == parent.end()) continue;  // isolated node, not part of the system
    if (!grounded_roots.count(find(n.id)))
      throw DisconnectedGraph("component without a fixed or anchored node");
    free.insert(n.id);
  }
  return free;
}

}  // namespace detail

inline NormalSystem assemble_normal_system(const PoseGraph& graph, const SolverConfig& cfg) {
  NormalSystem sys;
  const std::unordered_set<int> free_ids = detail::grounded_free_nodes(graph);
  std::unordered_map<int, int> block;  // node id -> block index
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    if (free_ids.count(graph.nodes[i].id)) {
      block[graph.nodes[i].id] = int(sys.free_nodes.size());
      sys.free_nodes.push_back(int(i));
    }
  }
  const int dim = int(sys.free_nodes.size()) * 6;
  sys.g = Eigen::VectorXd::Zero(dim);
  std::vector<Eigen::Triplet<double>> trips;

  for (const auto& edge : graph.edges) {
    const Keyframe* ki = graph.find(edge.i);
    const Keyframe* kj = graph.find(edge.j);
    if (!ki || !kj) throw ConfigError("edge references a missing node");
    const RigidTransform t_ij = compose(inverse(ki->pose), kj->pose);
    const Eigen::Matrix3d r_ij = t_ij.rotation_matrix();
    const auto bi = block.find(edge.i);
    const auto bj = block.find(edge.j);

    Eigen::Matrix<double, 6, 6> hii = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 6> hjj = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 6> hij = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> gi = Eigen::Matrix<double, 6, 1>::Zero();
    Eigen::Matrix<double, 6, 1> gj = Eigen::Matrix<double, 6, 1>::Zero();

    for (std::size_t m = 0; m < edge.matches.size(); ++m) {
      const Match& match = edge.matches[m];
      if (!ki->point_valid(match.pixel_i) || !kj->point_valid(match.pixel_j)) continue;
      const double c = std::min(ki->conf_at(match.pixel_i), kj->conf_at(match.pixel_j));
      const auto w = match_weight(match.q, c, cfg);
      if (!w) continue;
      const double inv_w = 1.0 / *w;
      const Eigen::Vector3d xj = kj->point(match.pixel_j);
      const Eigen::Vector3d y = t_ij.apply(xj);
      const Eigen::Vector3d r = (ki->point(match.pixel_i) - y) * inv_w;
      const double k = huber_irls(r.norm(), cfg.huber_delta);
      sys.cost += huber_cost(r.norm(), cfg.huber_delta);
      ++sys.active_matches;

      Eigen::Matrix<double, 3, 6> ji, jj;
      ji.leftCols<3>() = -skew(y) * inv_w;
      ji.rightCols<3>() = Eigen::Matrix3d::Identity() * inv_w;
      jj.leftCols<3>() = r_ij * skew(xj) * inv_w;
      jj.rightCols<3>() = -r_ij * inv_w;

      if (bi != block.end()) {
        hii += k * ji.transpose() * ji;
        gi += k * ji.transpose() * r;
      }
      if (bj != block.end()) {
        hjj += k * jj.transpose() * jj;
        gj += k * jj.transpose() * r;
      }
      if (bi != block.end() && bj != block.end()) hij += k * ji.transpose() * jj;
    }

    auto add_block = [&](int bi6, int bj6, const Eigen::Matrix<double, 6, 6>& blk) {
      for (int a = 0; a < 6; ++a)
        for (int b = 0; b < 6; ++b)
          if (blk(a, b) != 0.0) trips.emplace_back(bi6 + a, bj6 + b, blk(a, b));
    };
    if (bi != block.end()) {
      add_block(bi->second * 6, bi->second * 6, hii);
      sys.g.segment<6>(bi->second * 6) += gi;
    }
    if (bj != block.end()) {
      add_block(bj->second * 6, bj->second * 6, hjj);
      sys.g.segment<6>(bj->second * 6) += gj;
    }
    if (bi != block.end() && bj != block.end()) {
      add_block(bi->second * 6, bj->second * 6, hij);
      add_block(bj->second * 6, bi->second * 6, hij.transpose());
    }
  }

  sys.h.resize(dim, dim);
  sys.h.setFromTriplets(trips.begin(), trips.end());
  return sys;
}

struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double lambda = 0.0;
  bool accepted = false;
};

struct OptimizeResult {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  std::vector<IterationRecord> history;
};

inline OptimizeResult optimize(PoseGraph& graph, const SolverConfig& cfg) {
  OptimizeResult result;
  NormalSystem sys = assemble_normal_system(graph, cfg);
  result.initial_cost = sys.cost;
  result.final_cost = sys.cost;
  if (sys.active_matches == 0 || sys.free_nodes.empty()) return result;  // fully gated: no-op

  double lambda = cfg.lm_lambda0;
  const double lambda_max = 1e12;
  double cost = sys.cost;

  for (int it = 0; it < cfg.max_iters; ++it) {
    const double iteration_start_cost = cost;
    bool accepted = false;
    bool stationary = false;
    while (true) {
      Eigen::SparseMatrix<double> damped = sys.h;
      for (int k = 0; k < damped.rows(); ++k) {
        const double d = std::max(sys.h.coeff(k, k), 1e-12);
        damped.coeffRef(k, k) = d * (1.0 + lambda);
      }
      Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> chol(damped);
      if (chol.info() != Eigen::Success) {
        lambda *= cfg.lm_factor;
        if (lambda > lambda_max)
          throw SingularSystem("damped normal matrix not positive definite");
        continue;
      }
      const Eigen::VectorXd delta = chol.solve(-sys.g);
      if (delta.cwiseAbs().maxCoeff() < 1e-14) {
        stationary = true;  // already at a minimum to machine precision
        break;
      }
      // trial update
      std::vector<RigidTransform> saved;
      saved.reserve(sys.free_nodes.size());
      for (std::size_t b = 0; b < sys.free_nodes.size(); ++b) {
        Keyframe& node = graph.nodes[std::size_t(sys.free_nodes[b])];
        saved.push_back(node.pose);
        node.pose = retract(node.pose, delta.segment<6>(Eigen::Index(b) * 6));
      }
      const double new_cost = graph_cost(graph, cfg);
      if (new_cost < cost) {
        accepted = true;
        result.history.push_back({it, new_cost, lambda, true});
        cost = new_cost;
        lambda = std::max(lambda / cfg.lm_factor, 1e-12);
        break;
      }
      for (std::size_t b = 0; b < sys.free_nodes.size(); ++b)
        graph.nodes[std::size_t(sys.free_nodes[b])].pose = saved[b];
      result.history.push_back({it, cost, lambda, false});
      lambda *= cfg.lm_factor;
      if (lambda > lambda_max) break;  // cannot improve further
    }
    result.iterations = it + 1;
    if (stationary || !accepted) break;
    sys = assemble_normal_system(graph, cfg);
    if (iteration_start_cost - cost < cfg.rel_tol * std::max(iteration_start_cost, 1e-300))
      break;
  }
  result.final_cost = cost;
  return result;
}

// ---------------------------------------------------------------------------
// Retrieval: 8x8 downsampled grayscale descriptor with cosine similarity
// ---------------------------------------------------------------------------

inline Eigen::VectorXd compute_descriptor(const Image3& color) {
  Eigen::VectorXd desc = Eigen::VectorXd::Zero(64);
  for (int cy = 0; cy < 8; ++cy)
    for (int cx = 0; cx < 8; ++cx) {
      const int x0 = cx * color.width / 8, x1 = std::max(x0 + 1, (cx + 1) * color.width / 8);
      const int y0 = cy * color.height / 8, y1 = std::max(y0 + 1, (cy + 1) * color.height / 8);
      double sum = 0.0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          sum += (color.at(x, y, 0) + color.at(x, y, 1) + color.at(x, y, 2)) / 3.0;
      desc[cy * 8 + cx] = sum / double((x1 - x0) * (y1 - y0));
    }
  const double n = desc.norm();
  if (n > 1e-12) desc /= n;
  return desc;
}

class Retriever {
 public:
  void add(int id, const Eigen::VectorXd& desc) { entries_.emplace_back(id, desc); }

  // ids ranked by cosine similarity, most similar first
  std::vector<std::pair<int, double>> query(const Eigen::VectorXd& desc, int top_k,
                                            const std::unordered_set<int>* exclude =
                                                nullptr) const {
    std::vector<std::pair<int, double>> scored;
    for (const auto& [id, d] : entries_) {
      if (exclude && exclude->count(id)) continue;
      scored.emplace_back(id, d.dot(desc));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (int(scored.size()) > top_k) scored.resize(std::size_t(top_k));
    return scored;
  }

  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<int, Eigen::VectorXd>> entries_;
};

// ---------------------------------------------------------------------------
// Keyframe bookkeeping
// ---------------------------------------------------------------------------

struct InsertDecision {
  bool inserted = false;
  int keyframe_id = -1;
};

// Inserts when the match-inlier count against the nearest keyframe drops
// below the threshold; the very first frame is inserted unconditionally.
inline InsertDecision try_insert_keyframe(PoseGraph& graph, Retriever& retriever,
                                          Keyframe frame, int nearest_id,
                                          const MatchSet& match_result, int inlier_threshold) {
  InsertDecision out;
  if (!graph.nodes.empty() && match_result.inlier_count >= inlier_threshold) return out;
  const int new_id = frame.id;
  if (!graph.nodes.empty()) {
    GraphEdge edge;
    edge.i = nearest_id;
    edge.j = new_id;
    edge.matches = match_result.matches;
    if (!edge.matches.empty()) graph.edges.push_back(std::move(edge));
  }
  retriever.add(new_id, frame.descriptor);
  graph.nodes.push_back(std::move(frame));
  out.inserted = true;
  out.keyframe_id = new_id;
  return out;
}

using MatcherFn = std::function<MatchSet(const Keyframe&, const Keyframe&)>;

inline std::vector<GraphEdge> detect_loop_closures(PoseGraph& graph, int new_id,
                                                   const Retriever& retriever,
                                                   const MatcherFn& matcher, int top_k,
                                                   int accept_threshold) {
  std::vector<GraphEdge> added;
  const Keyframe* kf = graph.find(new_id);
  if (!kf) throw ConfigError("unknown keyframe id");
  std::unordered_set<int> exclude{new_id};
  for (const auto& e : graph.edges) {
    if (e.i == new_id) exclude.insert(e.j);
    if (e.j == new_id) exclude.insert(e.i);
  }
  for (const auto& [cand_id, sim] : retriever.query(kf->descriptor, top_k, &exclude)) {
    const Keyframe* cand = graph.find(cand_id);
    if (!cand) continue;
    MatchSet ms;
    try {
      ms = matcher(*cand, *kf);
    } catch (const NoCovisibility&) {
      continue;
    }
    if (ms.inlier_count < accept_threshold || ms.matches.empty()) continue;
    GraphEdge edge;
    edge.i = cand_id;
    edge.j = new_id;
    edge.matches = ms.matches;
    graph.edges.push_back(edge);
    added.push_back(std::move(edge));
  }
  return added;
}

// ---------------------------------------------------------------------------
// Graph serialization (poses and matches; pixel payloads stay external)
// ---------------------------------------------------------------------------

inline json graph_to_json(const PoseGraph& graph) {
  json nodes = json::array();
  for (const auto& n : graph.nodes)
    nodes.push_back(json{{"id", n.id},
                         {"kind", n.kind == FrameKind::Real ? "real" : "diffusion"},
                         {"pose", to_json(n.pose)}});
  json edges = json::array();
  for (const auto& e : graph.edges) {
    json matches = json::array();
    for (const auto& m : e.matches) matches.push_back(json::array({m.pixel_i, m.pixel_j, m.q}));
    edges.push_back(json{{"i", e.i}, {"j", e.j}, {"matches", matches}});
  }
  return json{{"nodes", nodes}, {"edges", edges}};
}

inline PoseGraph graph_from_json(const json& j) {
  PoseGraph graph;
  for (const auto& n : j.at("nodes")) {
    Keyframe kf;
    kf.id = n.at("id").get<int>();
    kf.kind = n.at("kind").get<std::string>() == "real" ? FrameKind::Real : FrameKind::Diffusion;
    kf.pose = rigid_from_json(n.at("pose"));
    graph.nodes.push_back(std::move(kf));
  }
  for (const auto& e : j.at("edges")) {
    GraphEdge edge;
    edge.i = e.at("i").get<int>();
    edge.j = e.at("j").get<int>();
    for (const auto& m : e.at("matches"))
      edge.matches.push_back({m.at(0).get<int>(), m.at(1).get<int>(), m.at(2).get<double>()});
    graph.edges.push_back(std::move(edge));
  }
  return graph;
}

}  // namespace splatpose
