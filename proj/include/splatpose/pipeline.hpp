#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <unordered_map>

#include "splatpose/imageio.hpp"
#include "splatpose/simharness.hpp"
#include "splatpose/tracking.hpp"

namespace splatpose {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct AblationToggles {
  bool uncertainty_on = true;
  bool bundle_adjust_on = true;
  bool diffusion_frames_in_graph = true;

  std::string label() const {
    if (uncertainty_on && bundle_adjust_on && diffusion_frames_in_graph) return "full";
    std::string s;
    if (!uncertainty_on) s += "+no_uncertainty";
    if (!bundle_adjust_on) s += "+no_bundle_adjust";
    if (!diffusion_frames_in_graph) s += "+no_diffusion_frames";
    return s.substr(1);
  }

  json to_json() const {
    return json{{"uncertainty_on", uncertainty_on},
                {"bundle_adjust_on", bundle_adjust_on},
                {"diffusion_frames_in_graph", diffusion_frames_in_graph}};
  }
  static AblationToggles from_json(const json& j) {
    AblationToggles t;
    t.uncertainty_on = j.value("uncertainty_on", true);
    t.bundle_adjust_on = j.value("bundle_adjust_on", true);
    t.diffusion_frames_in_graph = j.value("diffusion_frames_in_graph", true);
    return t;
  }
};

struct RunConfig {
  SceneSpec scene;
  std::vector<int> view_counts{1, 8, 16};
  PriorConfig prior;
  SolverConfig solver;
  SynthMatcherConfig matcher;
  RefineConfig refine;
  FailureConfig failure;
  AblationToggles ablations;
  std::uint64_t seed = 0;
  std::string out_dir;

  int keyframe_inlier_threshold = 320;
  int closure_top_k = 3;
  int closure_accept = 150;
  int reloc_top_k = 3;
  MapStepSizes map_steps;
  int map_iters_init = 150;
  int map_iters_incremental = 18;
  int map_iters_final = 120;
  std::size_t max_gaussians = 900;
  std::size_t align_subsample = 2500;
  double conf_var_floor = 1e-4;
  double conf_cap = 1e6;
  double add_threshold = 0.1;

  json to_json() const {
    return json{{"scene", scene.to_json()},
                {"view_counts", view_counts},
                {"prior", prior.to_json()},
                {"solver", solver.to_json()},
                {"matcher", matcher.to_json()},
                {"ablations", ablations.to_json()},
                {"seed", seed},
                {"out_dir", out_dir},
                {"keyframe_inlier_threshold", keyframe_inlier_threshold},
                {"closure_top_k", closure_top_k},
                {"closure_accept", closure_accept},
                {"reloc_top_k", reloc_top_k},
                {"map_iters_init", map_iters_init},
                {"map_iters_incremental", map_iters_incremental},
                {"map_iters_final", map_iters_final},
                {"max_gaussians", max_gaussians},
                {"align_subsample", align_subsample},
                {"conf_var_floor", conf_var_floor},
                {"conf_cap", conf_cap},
                {"add_threshold", add_threshold}};
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    if (j.contains("scene")) c.scene = SceneSpec::from_json(j.at("scene"));
    c.view_counts = j.value("view_counts", c.view_counts);
    if (j.contains("prior")) c.prior = PriorConfig::from_json(j.at("prior"));
    if (j.contains("solver")) c.solver = SolverConfig::from_json(j.at("solver"));
    if (j.contains("matcher")) c.matcher = SynthMatcherConfig::from_json(j.at("matcher"));
    if (j.contains("ablations")) c.ablations = AblationToggles::from_json(j.at("ablations"));
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.keyframe_inlier_threshold =
        j.value("keyframe_inlier_threshold", c.keyframe_inlier_threshold);
    c.closure_top_k = j.value("closure_top_k", c.closure_top_k);
    c.closure_accept = j.value("closure_accept", c.closure_accept);
    c.reloc_top_k = j.value("reloc_top_k", c.reloc_top_k);
    c.map_iters_init = j.value("map_iters_init", c.map_iters_init);
    c.map_iters_incremental = j.value("map_iters_incremental", c.map_iters_incremental);
    c.map_iters_final = j.value("map_iters_final", c.map_iters_final);
    c.max_gaussians = j.value("max_gaussians", c.max_gaussians);
    c.align_subsample = j.value("align_subsample", c.align_subsample);
    c.conf_var_floor = j.value("conf_var_floor", c.conf_var_floor);
    c.conf_cap = j.value("conf_cap", c.conf_cap);
    c.add_threshold = j.value("add_threshold", c.add_threshold);
    for (int v : c.view_counts)
      if (v < 1) throw ConfigError("view counts must be >= 1");
    return c;
  }
};

// ---------------------------------------------------------------------------
// Pipeline state and result types
// ---------------------------------------------------------------------------

struct PoseTraceRow {
  int frame_id = 0;
  int views = 0;
  RigidTransform pose;  // frame -> object canonical
  double fit_score = 0.0;
  std::string status;
};

struct RunRow {
  std::string object;
  int views = 0;
  std::string ablation;
  std::uint64_t seed = 0;
  MetricsReport metrics;
  int lost_frames = 0;
};

struct StageTiming {
  std::string stage;
  int views = 0;
  double seconds = 0.0;
};

struct ViewRunOutput {
  RunRow row;
  std::vector<PoseTraceRow> trace;
  GaussianField field;
  PoseGraph graph;
};

struct RunResult {
  std::vector<RunRow> rows;
  std::vector<PoseTraceRow> trace;
  std::vector<StageTiming> timings;
  GaussianField final_field;  // from the largest view count
  PoseGraph final_graph;
};

namespace detail {

class StageClock {
 public:
  StageClock(std::vector<StageTiming>& sink, std::string stage, int views)
      : sink_(sink), stage_(std::move(stage)), views_(views),
        start_(std::chrono::steady_clock::now()) {}
  ~StageClock() {
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    sink_.push_back({stage_, views_, s});
  }

 private:
  std::vector<StageTiming>& sink_;
  std::string stage_;
  int views_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// One pipeline run at a fixed view count
// ---------------------------------------------------------------------------

inline ViewRunOutput run_view_count(const RunConfig& cfg, const Scene& scene, int views,
                                    std::vector<StageTiming>& timings) {
  ViewRunOutput out;
  const Camera cam = scene.spec.camera();
  // consecutive prefix: fewer reference views means a shorter observed arc,
  // leaving the remainder of the object to the diffusion prior
  std::vector<int> ref_idx;
  for (int i = 0; i < std::min<int>(views, int(scene.ref.size())); ++i) ref_idx.push_back(i);
  const SyntheticFrame& f0 = scene.ref[std::size_t(ref_idx[0])];

  PoseGraph graph;
  Retriever retriever;
  GaussianField field;
  std::unordered_map<int, MatchFrameData> frame_data;       // keyframe id -> gt matcher data
  std::unordered_map<int, int> kf_scene_index;              // Real keyframe id -> scene index
  // every tracked frame feeds the map; its pose rides on an anchor keyframe
  // so later graph refinements propagate to the stored observation
  struct MapObs {
    int anchor_id;
    RigidTransform rel;  // frame pose = anchor pose o rel
    Image3 color;
    Image<double> depth;
    Image<double> conf;
  };
  std::vector<MapObs> observations;
  DiffusionPrior prior;

  auto conf_or_uniform = [&](const Image<double>& modulated, const Image<std::uint8_t>& mask) {
    Image<double> conf(mask.width, mask.height, 0.0);
    for (std::size_t i = 0; i < conf.size(); ++i)
      if (mask.data[i]) conf.data[i] = cfg.ablations.uncertainty_on ? modulated.data[i] : 1.0;
    return conf;
  };

  auto frames_for_mapping = [&]() {
    std::vector<MapFrame> frames;
    for (const auto& obs : observations) {
      const Keyframe* kf = graph.find(obs.anchor_id);
      frames.push_back(
          {cam, inverse(compose(kf->pose, obs.rel)), obs.color, obs.depth, obs.conf});
    }
    return frames;
  };

  auto nearest_kf_by_pose = [&](const RigidTransform& pose) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& node : graph.nodes) {
      const double d = rotation_distance(pose, node.pose) +
                       2.0 * (pose.translation - node.pose.translation).norm();
      if (d < best_d) {
        best_d = d;
        best = node.id;
      }
    }
    return best;
  };

  auto matcher_fn = [&](const Keyframe& a, const Keyframe& b) {
    return synth_matcher(frame_data.at(a.id), frame_data.at(b.id), cfg.matcher,
                         Rng::mix(cfg.seed, 0x77c0 + std::uint64_t(a.id) * 1315 +
                                                std::uint64_t(b.id)));
  };

  // ---- initialization: diffusion prior, alignment, seeding --------------
  {
    detail::StageClock clock(timings, "initialize", views);
    prior = synth_diffusion_prior(scene.object, cam, f0.t_oc, cfg.prior,
                                  Rng::mix(cfg.seed, 0xd1f));

    // real cloud from the input frame
    PointCloud real_cloud;
    std::vector<Eigen::Vector3d> real_colors;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        if (!f0.mask.at(x, y)) continue;
        real_cloud.points.push_back(unproject(cam, x + 0.5, y + 0.5, f0.depth.at(x, y)));
        real_colors.push_back(
            {f0.color.at(x, y, 0), f0.color.at(x, y, 1), f0.color.at(x, y, 2)});
      }

    // the generated copy of the input view: same viewpoint as the real
    // cloud, so the covariance-eigenvalue scale match is well posed
    PointCloud gen_cloud;
    const PriorView& v0 = prior.views.front();
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        if (!v0.valid.at(x, y)) continue;
        gen_cloud.points.push_back(v0.rel_pose.apply(Eigen::Vector3d(
            v0.pointmap.at(x, y, 0), v0.pointmap.at(x, y, 1), v0.pointmap.at(x, y, 2))));
      }

    IcpConfig icp_cfg;
    icp_cfg.subsample = cfg.align_subsample;
    const SimTransform sim = align_generated_to_real(subsample(gen_cloud, cfg.align_subsample),
                                                     subsample(real_cloud, cfg.align_subsample),
                                                     icp_cfg);

    // canonical frame: the input camera frame shifted to the object centroid
    RigidTransform t_o_c0;
    t_o_c0.translation = -real_cloud.centroid();
    const RigidTransform pose0 = t_o_c0;

    // input keyframe
    Keyframe kf0 = keyframe_from_frame(f0, 0, FrameKind::Real, pose0);
    retriever.add(kf0.id, kf0.descriptor);
    MatchFrameData f0_data = match_data(f0);
    f0_data.joint_group = 1;  // co-processed with the generated ring
    frame_data.emplace(0, f0_data);
    kf_scene_index.emplace(0, ref_idx[0]);
    observations.push_back({0, RigidTransform::identity(), f0.color, f0.depth,
                            conf_or_uniform(kf0.confidence, f0.mask)});
    graph.nodes.push_back(std::move(kf0));

    // diffusion keyframes (skip view 0: it coincides with the input frame)
    for (std::size_t vi = 1; vi < prior.views.size(); ++vi) {
      const PriorView& view = prior.views[vi];
      const int id = 100 + int(vi);
      Keyframe kf;
      kf.id = id;
      kf.kind = FrameKind::Diffusion;
      // metric pose: canonical <- generated view frame through the alignment
      RigidTransform rel_metric;
      rel_metric.rotation = (sim.rigid.rotation * view.rel_pose.rotation).normalized();
      rel_metric.translation =
          sim.scale * (sim.rigid.rotation * view.rel_pose.translation) +
          sim.rigid.translation;
      kf.pose = compose(pose0, rel_metric);
      kf.pointmap = Image3(cam.width, cam.height);
      kf.valid = view.valid;
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
          if (!view.valid.at(x, y)) continue;
          for (int c = 0; c < 3; ++c)
            kf.pointmap.at(x, y, c) = sim.scale * view.pointmap.at(x, y, c);
        }
      const Image<double> modulated =
          modulate_confidence(view.conf_hat, view.image.variance, cfg.conf_var_floor,
                              cfg.conf_cap);
      Image<double> normalized = modulated;
      for (auto& v : normalized.data) v /= cfg.conf_cap;
      kf.confidence = conf_or_uniform(normalized, view.valid);
      kf.descriptor = compute_descriptor(view.image.rgb);

      // matcher ground truth for this virtual camera
      MatchFrameData md;
      md.cam = cam;
      md.t_oc = compose(f0.t_oc, view.rel_pose_gt);
      md.depth_clean = &prior.views[vi].depth_clean;
      md.mask = &prior.views[vi].valid;
      md.object_tag = f0.object_tag;
      md.joint_group = 1;
      const double angfrac =
          std::min(view.azimuth_offset_deg, 360.0 - view.azimuth_offset_deg) / 180.0;
      md.reliability = 0.55 * (1.0 - 0.85 * angfrac);

      // depth map for mapping supervision comes from the scaled pointmap
      Image<double> depth(cam.width, cam.height, 0.0);
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
          if (view.valid.at(x, y)) depth.at(x, y) = kf.pointmap.at(x, y, 2);

      if (cfg.ablations.diffusion_frames_in_graph) {
        frame_data.emplace(id, md);
        retriever.add(id, kf.descriptor);
        GraphEdge edge;
        edge.i = 0;
        edge.j = id;
        try {
          edge.matches = synth_matcher(frame_data.at(0), md, cfg.matcher,
                                       Rng::mix(cfg.seed, 0xedbe + vi))
                             .matches;
        } catch (const NoCovisibility&) {
        }
        observations.push_back({id, RigidTransform::identity(), view.image.rgb, depth,
                                kf.confidence});
        graph.nodes.push_back(std::move(kf));
        if (!edge.matches.empty()) graph.edges.push_back(std::move(edge));
      } else {
        // outside the graph the generated views still supervise the map,
        // riding the input keyframe at their aligned relative pose
        observations.push_back({0, rel_metric, view.image.rgb, depth, kf.confidence});
      }
    }

    // initial pose-graph refinement: the aligned diffusion poses are solved
    // against the input frame (and each other) before being frozen
    if (cfg.ablations.diffusion_frames_in_graph && cfg.ablations.bundle_adjust_on &&
        !graph.edges.empty()) {
      PoseGraph init_graph;
      for (const auto& node : graph.nodes) {
        Keyframe kf;
        kf.id = node.id;
        kf.kind = FrameKind::Real;  // all free; the lowest id (input frame) anchors
        kf.pose = node.pose;
        kf.pointmap = node.pointmap;
        kf.valid = node.valid;
        kf.confidence = node.confidence;
        init_graph.nodes.push_back(std::move(kf));
      }
      // chain edges between consecutive diffusion views close the init ring
      std::vector<GraphEdge> init_edges = graph.edges;
      for (std::size_t vi = 1; vi + 1 < prior.views.size(); ++vi) {
        const int ia = 100 + int(vi), ib = 100 + int(vi + 1);
        if (!frame_data.count(ia) || !frame_data.count(ib)) continue;
        try {
          GraphEdge e;
          e.i = ia;
          e.j = ib;
          e.matches = synth_matcher(frame_data.at(ia), frame_data.at(ib), cfg.matcher,
                                    Rng::mix(cfg.seed, 0xc4a1 + vi))
                          .matches;
          if (!e.matches.empty()) init_edges.push_back(std::move(e));
        } catch (const NoCovisibility&) {
        }
      }
      init_graph.edges = init_edges;
      optimize(init_graph, cfg.solver);
      for (auto& node : graph.nodes)
        node.pose = init_graph.find(node.id)->pose;
      graph.edges = std::move(init_edges);
    }

    // seed the field from the union of keyframe clouds in the canonical frame
    PointCloud seed_cloud;
    std::vector<Eigen::Vector3d> seed_colors;
    for (std::size_t i = 0; i < real_cloud.size(); ++i) {
      seed_cloud.points.push_back(graph.find(0)->pose.apply(real_cloud.points[i]));
      seed_cloud.confidence.push_back(1.0);
      seed_colors.push_back(real_colors[i]);
    }
    // prior views always contribute to seeding, graph membership or not
    {
      for (std::size_t vi = 1; vi < prior.views.size(); ++vi) {
        const PriorView& view = prior.views[vi];
        const RigidTransform pose =
            graph.find(100 + int(vi))
                ? graph.find(100 + int(vi))->pose
                : compose(pose0, RigidTransform{(sim.rigid.rotation * view.rel_pose.rotation)
                                                    .normalized(),
                                                sim.scale * (sim.rigid.rotation *
                                                             view.rel_pose.translation) +
                                                    sim.rigid.translation});
        const Image<double> modulated = modulate_confidence(
            view.conf_hat, view.image.variance, cfg.conf_var_floor, cfg.conf_cap);
        for (int y = 0; y < cam.height; ++y)
          for (int x = 0; x < cam.width; ++x) {
            if (!view.valid.at(x, y)) continue;
            const Eigen::Vector3d p(sim.scale * view.pointmap.at(x, y, 0),
                                    sim.scale * view.pointmap.at(x, y, 1),
                                    sim.scale * view.pointmap.at(x, y, 2));
            seed_cloud.points.push_back(pose.apply(p));
            seed_cloud.confidence.push_back(
                cfg.ablations.uncertainty_on ? modulated.at(x, y) / cfg.conf_cap : 1.0);
            seed_colors.push_back({view.image.rgb.at(x, y, 0), view.image.rgb.at(x, y, 1),
                                   view.image.rgb.at(x, y, 2)});
          }
      }
    }
    SeedOptions seed_opt;
    seed_opt.max_gaussians = cfg.max_gaussians;
    seed_opt.min_confidence = cfg.ablations.uncertainty_on ? 1e-4 : 0.0;
    field = seed_from_pointcloud(seed_cloud, seed_colors, seed_opt);
  }

  {
    detail::StageClock clock(timings, "map_init", views);
    MapOptions opt;
    opt.iters = cfg.map_iters_init;
    opt.step_sizes = cfg.map_steps;
    field = optimize_map(field, frames_for_mapping(), opt);
  }

  // ---- incremental tracking over the remaining reference frames ----------
  TrackState state;
  state.pose = graph.find(0)->pose;
  state.push_inliers(1.0, cfg.failure.window);
  int lost_frames = 0;
  int next_kf_id = 1;

  {
    detail::StageClock clock(timings, "track", views);
    for (std::size_t fi = 1; fi < ref_idx.size(); ++fi) {
      const SyntheticFrame& frame = scene.ref[std::size_t(ref_idx[fi])];
      const Keyframe query_like =
          keyframe_from_frame(frame, -1, FrameKind::Real, RigidTransform::identity());

      // nearest keyframe in pose space under the motion prediction
      const int nearest_id = nearest_kf_by_pose(state.pose);
      MatchSet ms;
      bool matched = true;
      try {
        ms = synth_matcher(frame_data.at(nearest_id), match_data(frame), cfg.matcher,
                           Rng::mix(cfg.seed, 0x4a11 + std::uint64_t(frame.id)));
      } catch (const NoCovisibility&) {
        matched = false;
      }

      RigidTransform pose = state.pose;
      double inlier_fraction = 0.0;
      double fit = std::numeric_limits<double>::infinity();
      if (matched) {
        try {
          const BootstrapResult boot = pose_from_matches(
              *graph.find(nearest_id), query_like.pointmap, query_like.valid, ms.matches);
          pose = boot.pose;
          inlier_fraction = boot.inlier_fraction;
        } catch (const NoCorrespondences&) {
          matched = false;
        }
      }

      // render-and-compare refinement; kept only when it does not disagree
      // with the keyframe matches more than the initialization does
      try {
        const RefineResult refined =
            refine_pose(field, cam, frame.color, frame.depth, pose, cfg.refine);
        fit = refined.fit_score;
        if (matched) {
          const Keyframe& nkf = *graph.find(nearest_id);
          const double d_init = match_discrepancy(nkf, query_like.pointmap, query_like.valid,
                                                  ms.matches, pose, cfg.solver.q_min);
          const double d_ref = match_discrepancy(nkf, query_like.pointmap, query_like.valid,
                                                 ms.matches, refined.pose, cfg.solver.q_min);
          if (d_ref <= d_init) pose = refined.pose;
        } else {
          pose = refined.pose;
        }
      } catch (const InsufficientOverlap&) {
        fit = std::numeric_limits<double>::infinity();
      }

      TrackStatus status = detect_failure(state, inlier_fraction, fit, cfg.failure);
      if (status == TrackStatus::Lost) {
        RelocalizeConfig rcfg;
        rcfg.top_k = cfg.reloc_top_k;
        rcfg.accept_discrepancy = cfg.failure.d_max;
        rcfg.solver = cfg.solver;
        const auto reloc = relocalize(
            graph, retriever, frame.color, query_like.pointmap, query_like.valid,
            query_like.confidence,
            [&](const Keyframe& cand, const Keyframe&) {
              return synth_matcher(frame_data.at(cand.id), match_data(frame), cfg.matcher,
                                   Rng::mix(cfg.seed, 0x5e10 + std::uint64_t(cand.id) * 97 +
                                                          std::uint64_t(frame.id)));
            },
            rcfg);
        if (reloc.success) {
          pose = reloc.pose;
          status = TrackStatus::Tracking;
          try {
            const RefineResult refined =
                refine_pose(field, cam, frame.color, frame.depth, pose, cfg.refine);
            fit = refined.fit_score;
          } catch (const InsufficientOverlap&) {
          }
        } else {
          ++lost_frames;
        }
      }
      state.status = status;
      if (status == TrackStatus::Tracking) state.pose = pose;
      state.push_inliers(inlier_fraction, cfg.failure.window);

      out.trace.push_back({frame.id, views, pose, fit, status == TrackStatus::Tracking
                                                           ? "tracking"
                                                           : "lost"});
      if (status != TrackStatus::Tracking) continue;

      // keyframe bookkeeping, then fold the frame into the map
      Keyframe kf = keyframe_from_frame(frame, next_kf_id, FrameKind::Real, pose);
      const InsertDecision ins = try_insert_keyframe(graph, retriever, std::move(kf),
                                                     nearest_id, ms,
                                                     cfg.keyframe_inlier_threshold);
      int anchor_id = nearest_id;
      RigidTransform rel;
      if (ins.inserted) {
        anchor_id = ins.keyframe_id;
        frame_data.emplace(ins.keyframe_id, match_data(frame));
        kf_scene_index.emplace(ins.keyframe_id, ref_idx[fi]);
        ++next_kf_id;
        detect_loop_closures(graph, ins.keyframe_id, retriever, matcher_fn, cfg.closure_top_k,
                             cfg.closure_accept);
        if (cfg.ablations.bundle_adjust_on && !graph.edges.empty())
          optimize(graph, cfg.solver);
        state.pose = graph.find(ins.keyframe_id)->pose;
      } else {
        rel = compose(inverse(graph.find(anchor_id)->pose), pose);
      }
      observations.push_back({anchor_id, rel, frame.color, frame.depth,
                              conf_or_uniform(query_like.confidence, frame.mask)});
      MapOptions opt;
      opt.iters = cfg.map_iters_incremental;
      opt.step_sizes = cfg.map_steps;
      field = optimize_map(field, frames_for_mapping(), opt);
    }
  }

  {
    detail::StageClock clock(timings, "map_final", views);
    MapOptions opt;
    opt.iters = cfg.map_iters_final;
    opt.step_sizes = cfg.map_steps;
    field = optimize_map(field, frames_for_mapping(), opt);
  }

  // ---- evaluation on the held-out trajectory ------------------------------
  {
    detail::StageClock clock(timings, "evaluate", views);
    // gauge: object frame -> canonical frame, anchored at the input keyframe
    const RigidTransform gauge = compose(graph.find(0)->pose, inverse(f0.t_oc));
    const RigidTransform gauge_inv = inverse(gauge);

    std::vector<RigidTransform> est, gt;
    for (const auto& frame : scene.test) {
      const Keyframe query_like =
          keyframe_from_frame(frame, -1, FrameKind::Real, RigidTransform::identity());
      // retrieval + joint match solve against the graph, as in relocalization
      RelocalizeConfig rcfg;
      rcfg.top_k = cfg.reloc_top_k;
      rcfg.accept_discrepancy = std::numeric_limits<double>::infinity();  // best effort
      rcfg.solver = cfg.solver;
      const auto reloc = relocalize(
          graph, retriever, frame.color, query_like.pointmap, query_like.valid,
          query_like.confidence,
          [&](const Keyframe& cand, const Keyframe&) {
            return synth_matcher(frame_data.at(cand.id), match_data(frame), cfg.matcher,
                                 Rng::mix(cfg.seed, 0xe7a1 + std::uint64_t(cand.id) * 131 +
                                                        std::uint64_t(frame.id)));
          },
          rcfg);
      RigidTransform pose = reloc.success ? reloc.pose : state.pose;
      double fit = std::numeric_limits<double>::infinity();
      try {
        const RefineResult refined =
            refine_pose(field, cam, frame.color, frame.depth, pose, cfg.refine);
        fit = refined.fit_score;
        const int near_id = nearest_kf_by_pose(pose);
        MatchSet ms = synth_matcher(frame_data.at(near_id), match_data(frame), cfg.matcher,
                                    Rng::mix(cfg.seed, 0xbeef + std::uint64_t(frame.id)));
        const Keyframe& nkf = *graph.find(near_id);
        const double d_init = match_discrepancy(nkf, query_like.pointmap, query_like.valid,
                                                ms.matches, pose, cfg.solver.q_min);
        const double d_ref = match_discrepancy(nkf, query_like.pointmap, query_like.valid,
                                               ms.matches, refined.pose, cfg.solver.q_min);
        if (d_ref <= d_init) pose = refined.pose;
      } catch (const Error&) {
      }
      out.trace.push_back({frame.id, views, pose, fit, "eval"});
      est.push_back(compose(inverse(pose), gauge));  // object -> camera
      gt.push_back(inverse(frame.t_oc));
    }
    const PoseAccuracy acc = add_auc(est, gt, scene.object, cfg.add_threshold);

    // reconstruction: fused real-keyframe clouds under estimated vs true poses
    PointCloud est_cloud, gt_cloud;
    for (const auto& node : graph.nodes) {
      if (node.kind != FrameKind::Real) continue;
      const RigidTransform est_pose = compose(gauge_inv, node.pose);
      const RigidTransform gt_pose = scene.ref[std::size_t(kf_scene_index.at(node.id))].t_oc;
      for (int y = 0; y < cam.height; y += 2)
        for (int x = 0; x < cam.width; x += 2) {
          if (!node.valid.at(x, y)) continue;
          const Eigen::Vector3d p(node.pointmap.at(x, y, 0), node.pointmap.at(x, y, 1),
                                  node.pointmap.at(x, y, 2));
          est_cloud.points.push_back(est_pose.apply(p));
          gt_cloud.points.push_back(gt_pose.apply(p));
        }
    }
    const double cd = chamfer(subsample(est_cloud, 4000), subsample(gt_cloud, 4000));

    // appearance: pooled MSE over the held-out views rendered from the field
    double mse_sum = 0.0;
    std::size_t mse_count = 0;
    for (const auto& frame : scene.test) {
      const RigidTransform cam_to_canon = compose(gauge, frame.t_oc);
      const RenderOutput ro = render(field, cam, inverse(cam_to_canon));
      for (std::size_t i = 0; i < ro.color.data.size(); ++i) {
        const double d = ro.color.data[i] - frame.color.data[i];
        mse_sum += d * d;
        ++mse_count;
      }
    }
    const double mse = mse_sum / double(mse_count);
    out.row.metrics.psnr = mse == 0.0 ? std::numeric_limits<double>::infinity()
                                      : 10.0 * std::log10(1.0 / mse);
    out.row.metrics.add_auc = acc.add_auc;
    out.row.metrics.adds_auc = acc.adds_auc;
    out.row.metrics.chamfer = cd;
  }

  out.row.object = scene.spec.object;
  out.row.views = views;
  out.row.ablation = cfg.ablations.label();
  out.row.seed = cfg.seed;
  out.row.lost_frames = lost_frames;
  out.field = std::move(field);
  out.graph = std::move(graph);
  return out;
}

// ---------------------------------------------------------------------------
// Full run over the configured view counts, with artifact output
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace detail

inline std::string metrics_csv(const std::vector<RunRow>& rows) {
  std::string csv = "object,views,ablation,seed,add_auc,adds_auc,chamfer,psnr,lost_frames\n";
  for (const auto& r : rows) {
    csv += r.object + "," + std::to_string(r.views) + "," + r.ablation + "," +
           std::to_string(r.seed) + "," + detail::format_double(r.metrics.add_auc) + "," +
           detail::format_double(r.metrics.adds_auc) + "," +
           detail::format_double(r.metrics.chamfer) + "," +
           detail::format_double(r.metrics.psnr) + "," + std::to_string(r.lost_frames) + "\n";
  }
  return csv;
}

inline std::string poses_csv(const std::vector<PoseTraceRow>& trace) {
  std::string csv = "frame_id,views,qw,qx,qy,qz,tx,ty,tz,fit_score,status\n";
  for (const auto& r : trace) {
    csv += std::to_string(r.frame_id) + "," + std::to_string(r.views) + "," +
           detail::format_double(r.pose.rotation.w()) + "," +
           detail::format_double(r.pose.rotation.x()) + "," +
           detail::format_double(r.pose.rotation.y()) + "," +
           detail::format_double(r.pose.rotation.z()) + "," +
           detail::format_double(r.pose.translation.x()) + "," +
           detail::format_double(r.pose.translation.y()) + "," +
           detail::format_double(r.pose.translation.z()) + "," +
           detail::format_double(r.fit_score) + "," + r.status + "\n";
  }
  return csv;
}

inline RunResult run_pipeline(const RunConfig& cfg) {
  RunResult result;
  const Scene scene = generate_scene(cfg.scene, cfg.seed);
  int largest = 0;
  for (int v : cfg.view_counts) {
    ViewRunOutput view_out = run_view_count(cfg, scene, v, result.timings);
    result.rows.push_back(view_out.row);
    result.trace.insert(result.trace.end(), view_out.trace.begin(), view_out.trace.end());
    if (v >= largest) {
      largest = v;
      result.final_field = std::move(view_out.field);
      result.final_graph = std::move(view_out.graph);
    }
  }

  if (!cfg.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);
    const fs::path dir(cfg.out_dir);
    std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << "\n";
    std::ofstream(dir / "metrics.csv") << metrics_csv(result.rows);
    std::ofstream(dir / "poses.csv") << poses_csv(result.trace);
    save_ply(result.final_field, (dir / "object.ply").string());
    std::ofstream(dir / "graph.json") << graph_to_json(result.final_graph).dump(2) << "\n";
    std::string timings = "stage,views,seconds\n";
    for (const auto& t : result.timings)
      timings += t.stage + "," + std::to_string(t.views) + "," +
                 detail::format_double(t.seconds) + "\n";
    std::ofstream(dir / "timings.csv") << timings;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Report: aggregate per-seed metrics into median +- IQR tables
// ---------------------------------------------------------------------------

struct ReportRow {
  std::string object;
  int views = 0;
  std::string ablation;
  int seeds = 0;
  double add_auc_median = 0, add_auc_iqr = 0;
  double adds_auc_median = 0, adds_auc_iqr = 0;
  double chamfer_median = 0, chamfer_iqr = 0;
  double psnr_median = 0, psnr_iqr = 0;
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double iqr_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto quantile = [&](double q) {
    const double pos = q * double(v.size() - 1);
    const std::size_t lo = std::size_t(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
  };
  return quantile(0.75) - quantile(0.25);
}

}  // namespace detail

inline std::vector<RunRow> load_metrics_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<RunRow> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 9) throw IoError("malformed metrics row: " + line);
    RunRow r;
    r.object = cells[0];
    r.views = std::stoi(cells[1]);
    r.ablation = cells[2];
    r.seed = std::stoull(cells[3]);
    r.metrics.add_auc = std::stod(cells[4]);
    r.metrics.adds_auc = std::stod(cells[5]);
    r.metrics.chamfer = std::stod(cells[6]);
    r.metrics.psnr = cells[7] == "inf" ? std::numeric_limits<double>::infinity()
                                       : std::stod(cells[7]);
    r.lost_frames = std::stoi(cells[8]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<ReportRow> aggregate_report(const std::vector<RunRow>& rows) {
  if (rows.empty()) throw MissingRuns("no metrics rows to aggregate");
  std::map<std::tuple<std::string, int, std::string>, std::vector<RunRow>> groups;
  for (const auto& r : rows) groups[{r.object, r.views, r.ablation}].push_back(r);
  std::vector<ReportRow> report;
  for (const auto& [key, members] : groups) {
    ReportRow row;
    row.object = std::get<0>(key);
    row.views = std::get<1>(key);
    row.ablation = std::get<2>(key);
    row.seeds = int(members.size());
    std::vector<double> a, s, c, p;
    for (const auto& m : members) {
      a.push_back(m.metrics.add_auc);
      s.push_back(m.metrics.adds_auc);
      c.push_back(m.metrics.chamfer);
      p.push_back(m.metrics.psnr);
    }
    row.add_auc_median = detail::median_of(a);
    row.add_auc_iqr = detail::iqr_of(a);
    row.adds_auc_median = detail::median_of(s);
    row.adds_auc_iqr = detail::iqr_of(s);
    row.chamfer_median = detail::median_of(c);
    row.chamfer_iqr = detail::iqr_of(c);
    row.psnr_median = detail::median_of(p);
    row.psnr_iqr = detail::iqr_of(p);
    report.push_back(std::move(row));
  }
  return report;
}

inline std::string report_markdown(const std::vector<ReportRow>& report) {
  std::string md =
      "| object | views | ablation | seeds | ADD AUC | ADD-S AUC | chamfer [m] | PSNR [dB] "
      "|\n|---|---|---|---|---|---|---|---|\n";
  auto cell = [](double median, double iqr) {
    return detail::format_double(median) + " ± " + detail::format_double(iqr);
  };
  for (const auto& r : report)
    md += "| " + r.object + " | " + std::to_string(r.views) + " | " + r.ablation + " | " +
          std::to_string(r.seeds) + " | " + cell(r.add_auc_median, r.add_auc_iqr) + " | " +
          cell(r.adds_auc_median, r.adds_auc_iqr) + " | " +
          cell(r.chamfer_median, r.chamfer_iqr) + " | " + cell(r.psnr_median, r.psnr_iqr) +
          " |\n";
  return md;
}

inline std::string report_csv(const std::vector<ReportRow>& report) {
  std::string csv =
      "object,views,ablation,seeds,add_auc_median,add_auc_iqr,adds_auc_median,adds_auc_iqr,"
      "chamfer_median,chamfer_iqr,psnr_median,psnr_iqr\n";
  for (const auto& r : report)
    csv += r.object + "," + std::to_string(r.views) + "," + r.ablation + "," +
           std::to_string(r.seeds) + "," + detail::format_double(r.add_auc_median) + "," +
           detail::format_double(r.add_auc_iqr) + "," +
           detail::format_double(r.adds_auc_median) + "," +
           detail::format_double(r.adds_auc_iqr) + "," +
           detail::format_double(r.chamfer_median) + "," +
           detail::format_double(r.chamfer_iqr) + "," +
           detail::format_double(r.psnr_median) + "," + detail::format_double(r.psnr_iqr) +
           "\n";
  return csv;
}

// Aggregates every metrics.csv found under the directory tree.
inline std::vector<ReportRow> report_from_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir)) throw MissingRuns("run directory does not exist: " + dir);
  std::vector<RunRow> rows;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().filename() == "metrics.csv")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto file_rows = load_metrics_csv(f.string());
    rows.insert(rows.end(), file_rows.begin(), file_rows.end());
  }
  if (rows.empty()) throw MissingRuns("no metrics.csv under " + dir);
  return aggregate_report(rows);
}

}  // namespace splatpose
