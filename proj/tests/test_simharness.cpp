#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "splatpose/simharness.hpp"

using namespace splatpose;

TEST_CASE("noiseless frame depths land exactly on the analytic surface") {
  for (const std::string name : {"sphere", "box", "cylinder", "mug"}) {
    const SyntheticObject obj = make_object(name, 3);
    const Camera cam = SceneSpec{}.camera();
    const RigidTransform t_oc = ring_pose(0.5, 33.0, 18.0);
    Rng rng(4);
    const SyntheticFrame fr = render_synthetic_frame(obj, cam, t_oc, 0.0, rng);
    int hits = 0;
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        if (!fr.mask.at(x, y)) {
          CHECK(fr.depth.at(x, y) == 0.0);
          continue;
        }
        ++hits;
        // surface membership of the unprojected hit point, checked through
        // the signed distance rather than the raycaster
        const Eigen::Vector3d p_obj =
            t_oc.apply(unproject(cam, x + 0.5, y + 0.5, fr.depth.at(x, y)));
        CHECK(std::abs(obj.shape->signed_distance(p_obj)) < 1e-9);
      }
    CHECK(hits > 200);
  }
}

TEST_CASE("scene generation is deterministic per seed") {
  SceneSpec spec;
  spec.ref_frames = 4;
  spec.test_frames = 2;
  const Scene a = generate_scene(spec, 42);
  const Scene b = generate_scene(spec, 42);
  REQUIRE(a.ref.size() == b.ref.size());
  for (std::size_t i = 0; i < a.ref.size(); ++i) {
    CHECK(std::memcmp(a.ref[i].depth.data.data(), b.ref[i].depth.data.data(),
                      a.ref[i].depth.data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(a.ref[i].color.data.data(), b.ref[i].color.data.data(),
                      a.ref[i].color.data.size() * sizeof(double)) == 0);
  }
  const Scene c = generate_scene(spec, 43);
  CHECK(std::memcmp(a.ref[0].depth.data.data(), c.ref[0].depth.data.data(),
                    a.ref[0].depth.data.size() * sizeof(double)) != 0);
}

TEST_CASE("a 16-frame ring covers at least 350 degrees of azimuth") {
  SceneSpec spec;
  spec.ref_frames = 16;
  spec.test_frames = 0;
  const Scene scene = generate_scene(spec, 7);
  double lo = 1e9, hi = -1e9;
  for (const auto& fr : scene.ref) {
    double az = rad2deg(std::atan2(fr.t_oc.translation.y(), fr.t_oc.translation.x()));
    if (az < 0) az += 360.0;
    lo = std::min(lo, az);
    hi = std::max(hi, az);
  }
  CHECK(hi - lo >= 350.0);
}

TEST_CASE("prior view at zero offset carries near-zero variance") {
  SceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.ref_frames = 1;
  spec.test_frames = 0;
  const Scene scene = generate_scene(spec, 11);
  PriorConfig cfg;
  CHECK(cfg.k == 6);  // reference default
  cfg.sampler_steps = 12;
  const DiffusionPrior prior =
      synth_diffusion_prior(scene.object, scene.ref[0].cam, scene.ref[0].t_oc, cfg, 11);
  REQUIRE(int(prior.views.size()) == cfg.k);
  const PriorView& v0 = prior.views[0];
  CHECK(v0.azimuth_offset_deg == 0.0);
  double vmax = 0.0;
  for (double v : v0.image.variance.data) vmax = std::max(vmax, v);
  CHECK(vmax < 1e-6);
  CHECK(rotation_angle(v0.rel_pose_gt) < 1e-9);

  // later views: variance grows with angular distance
  double mean_mid = 0.0, mean_back = 0.0;
  for (double v : prior.views[1].image.variance.data) mean_mid += v;
  for (double v : prior.views[3].image.variance.data) mean_back += v;
  CHECK(mean_back > mean_mid);
}

TEST_CASE("reported variance is calibrated against realized squared error") {
  SceneSpec spec;
  spec.width = 24;
  spec.height = 18;
  spec.ref_frames = 1;
  spec.test_frames = 0;
  const Scene scene = generate_scene(spec, 201);
  PriorConfig cfg;
  cfg.sampler_steps = 10;

  const int seeds = 100;
  // per object pixel of every non-input view: reported variance and the
  // squared error realized over repeated generations (the background sits at
  // intensity zero, where clamping to [0,1] halves the realized error)
  std::vector<std::vector<double>> sq_err;
  std::vector<double> reported;
  bool first = true;
  for (int s = 0; s < seeds; ++s) {
    const DiffusionPrior prior = synth_diffusion_prior(scene.object, scene.ref[0].cam,
                                                       scene.ref[0].t_oc, cfg, 1000 + s);
    std::size_t slot = 0;
    for (int vi = 1; vi < cfg.k; ++vi) {
      const PriorView& view = prior.views[std::size_t(vi)];
      Rng tmp(0);
      const SyntheticFrame clean = render_synthetic_frame(
          scene.object, scene.ref[0].cam,
          compose(scene.ref[0].t_oc, view.rel_pose_gt), 0.0, tmp);
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          if (!clean.mask.at(x, y)) continue;
          double e2 = 0.0;
          for (int c = 0; c < 3; ++c) {
            const double d = view.image.rgb.at(x, y, c) - clean.color.at(x, y, c);
            e2 += d * d;
          }
          e2 /= 3.0;
          if (first) {
            reported.push_back(view.image.variance.at(x, y));
            sq_err.emplace_back();
          }
          sq_err[slot].push_back(e2);
          ++slot;
        }
    }
    first = false;
  }

  std::vector<double> mean_err(reported.size());
  for (std::size_t i = 0; i < reported.size(); ++i) {
    double m = 0.0;
    for (double e : sq_err[i]) m += e;
    mean_err[i] = m / double(seeds);
  }
  // least-squares slope of mean squared error against reported variance
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(reported.size());
  for (std::size_t i = 0; i < reported.size(); ++i) {
    sx += reported[i];
    sy += mean_err[i];
    sxx += reported[i] * reported[i];
    sxy += reported[i] * mean_err[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  CHECK(slope == Catch::Approx(1.0).margin(0.1));
  CHECK(pearson(reported, mean_err) >= 0.9);
}

TEST_CASE("matcher: identical frames self-match") {
  SceneSpec spec;
  spec.ref_frames = 1;
  spec.test_frames = 0;
  const Scene scene = generate_scene(spec, 21);
  SynthMatcherConfig cfg;
  cfg.outlier_fraction = 0.0;
  const MatchSet ms =
      synth_matcher(match_data(scene.ref[0]), match_data(scene.ref[0]), cfg, 5);
  REQUIRE(ms.inlier_count > 20);
  for (const auto& m : ms.matches) CHECK(m.pixel_i == m.pixel_j);
}

TEST_CASE("matcher: zero outlier fraction gives geometrically consistent pairs") {
  SceneSpec spec;
  spec.ref_frames = 8;
  spec.test_frames = 0;
  const Scene scene = generate_scene(spec, 23);
  SynthMatcherConfig cfg;
  cfg.outlier_fraction = 0.0;
  const SyntheticFrame& a = scene.ref[0];
  const SyntheticFrame& b = scene.ref[1];
  const MatchSet ms = synth_matcher(match_data(a), match_data(b), cfg, 9);
  REQUIRE(!ms.matches.empty());
  const RigidTransform t_ba = compose(inverse(b.t_oc), a.t_oc);
  for (const auto& m : ms.matches) {
    const int ax = m.pixel_i % a.cam.width, ay = m.pixel_i / a.cam.width;
    const int bx = m.pixel_j % b.cam.width, by = m.pixel_j / b.cam.width;
    const Eigen::Vector3d pa =
        unproject(a.cam, ax + 0.5, ay + 0.5, a.depth_clean.at(ax, ay));
    const Eigen::Vector3d pb = t_ba.apply(pa);
    CHECK(std::abs(b.depth_clean.at(bx, by) - pb.z()) <= cfg.vis_eps);
    CHECK(m.q >= cfg.q_inlier_lo);
  }
}

TEST_CASE("matcher: opposite faces of a thin plate share no surface") {
  const SyntheticObject plate = make_object("thin_plate", 29);
  const Camera cam = SceneSpec{}.camera();
  Rng rng(31);
  const SyntheticFrame top =
      render_synthetic_frame(plate, cam, ring_pose(0.5, 0.0, 84.0), 0.0, rng);
  const SyntheticFrame bottom =
      render_synthetic_frame(plate, cam, ring_pose(0.5, 0.0, -84.0), 0.0, rng);
  const auto coverage = [](const SyntheticFrame& f) {
    int n = 0;
    for (auto m : f.mask.data) n += m;
    return n;
  };
  REQUIRE(coverage(top) > 100);
  REQUIRE(coverage(bottom) > 100);
  SynthMatcherConfig cfg;
  cfg.vis_eps = 0.0008;
  CHECK_THROWS_AS(synth_matcher(match_data(top), match_data(bottom), cfg, 3),
                  NoCovisibility);
}

TEST_CASE("add metrics: exact and translated poses") {
  const SyntheticObject obj = make_object("box", 37);
  std::vector<RigidTransform> gt;
  Rng rng(41);
  for (int i = 0; i < 5; ++i) {
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    gt.push_back(RigidTransform::from_axis_angle(axis, rng.uniform(-2.0, 2.0),
                                                 {rng.uniform(-1, 1), rng.uniform(-1, 1),
                                                  rng.uniform(1, 2)}));
  }
  const PoseAccuracy exact = add_auc(gt, gt, obj);
  CHECK(exact.add_auc == 1.0);
  CHECK(exact.adds_auc == 1.0);
  for (double e : exact.add_errors) CHECK(e == 0.0);

  const Eigen::Vector3d t(0.03, -0.04, 0.12);  // |t| = 0.13
  std::vector<RigidTransform> est = gt;
  for (auto& p : est) p.translation += t;
  const PoseAccuracy shifted = add_auc(est, gt, obj);
  for (double e : shifted.add_errors) CHECK(e == Catch::Approx(t.norm()).margin(1e-12));
}

TEST_CASE("adds stays near zero for a symmetric cylinder under a half turn") {
  const SyntheticObject cyl = make_object("cylinder", 43);
  REQUIRE(cyl.symmetric);
  RigidTransform gt;
  gt.translation = {0, 0, 0.6};
  RigidTransform est = gt;
  est.rotation = Eigen::Quaterniond(Eigen::AngleAxisd(kPi, Eigen::Vector3d::UnitZ()));

  const double add = add_error(est, gt, cyl.metric_points);
  const double adds = adds_error(est, gt, cyl.metric_points);
  CHECK(add > 0.05);
  CHECK(adds < 2.0 * 0.003);

  // exhaustive brute-force oracle over the 2048-point metric set
  std::vector<Eigen::Vector3d> gt_pts;
  for (const auto& x : cyl.metric_points) gt_pts.push_back(gt.apply(x));
  double brute = 0.0;
  for (const auto& x : cyl.metric_points) {
    const Eigen::Vector3d ex = est.apply(x);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gt_pts) best = std::min(best, (ex - g).norm());
    brute += best;
  }
  brute /= double(cyl.metric_points.size());
  CHECK(adds == Catch::Approx(brute).margin(1e-9));
}

TEST_CASE("adds never exceeds add") {
  const SyntheticObject obj = make_object("mug", 47);
  Rng rng(53);
  for (int i = 0; i < 30; ++i) {
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const RigidTransform gt = RigidTransform::from_axis_angle(
        axis, rng.uniform(-2.0, 2.0), {rng.uniform(-1, 1), rng.uniform(-1, 1), 1.0});
    Eigen::Vector3d axis2(rng.normal(), rng.normal(), rng.normal());
    axis2.normalize();
    const RigidTransform est = compose(
        RigidTransform::from_axis_angle(axis2, rng.uniform(-0.5, 0.5),
                                        {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                                         rng.uniform(-0.1, 0.1)}),
        gt);
    CHECK(adds_error(est, gt, obj.metric_points) <=
          add_error(est, gt, obj.metric_points) + 1e-12);
  }
}

TEST_CASE("auc is monotone in the threshold ceiling") {
  Rng rng(59);
  std::vector<double> errors;
  for (int i = 0; i < 50; ++i) errors.push_back(rng.uniform(0.0, 0.2));
  double prev = 0.0;
  bool nondecreasing = true;
  for (double tau : {0.01, 0.05, 0.1, 0.2, 0.5}) {
    const double auc = auc_of_errors(errors, tau);
    if (auc < prev - 1e-12) nondecreasing = false;
    prev = auc;
  }
  CHECK(nondecreasing);
}

TEST_CASE("chamfer basics") {
  const SyntheticObject obj = make_object("sphere", 61, 2000);
  CHECK(chamfer(obj.points, obj.points) == 0.0);

  PointCloud a, b;
  a.points = {{0, 0, 0}};
  b.points = {{1, 0, 0}};
  CHECK(chamfer(a, b) == Catch::Approx(1.0).margin(1e-15));
  CHECK_THROWS_AS(chamfer(PointCloud{}, a), EmptyCloud);
}

TEST_CASE("accelerated chamfer equals brute force") {
  Rng rng(67);
  for (int trial = 0; trial < 100; ++trial) {
    PointCloud small, large;
    const int ns = 40 + rng.uniform_int(60);
    for (int i = 0; i < ns; ++i)
      small.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    const int nl = 5200 + rng.uniform_int(400);  // forces the grid path
    for (int i = 0; i < nl; ++i)
      large.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});

    const double accel = chamfer(small, large);
    // independent brute force
    auto brute_side = [](const PointCloud& from, const PointCloud& to) {
      double sum = 0.0;
      for (const auto& p : from.points) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to.points) best = std::min(best, (p - q).squaredNorm());
        sum += std::sqrt(best);
      }
      return sum / double(from.size());
    };
    const double brute = 0.5 * (brute_side(small, large) + brute_side(large, small));
    CHECK(accel == Catch::Approx(brute).margin(1e-9));
  }
}

TEST_CASE("chamfer is symmetric") {
  Rng rng(71);
  PointCloud a, b;
  for (int i = 0; i < 300; ++i) {
    a.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    b.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
  }
  CHECK(chamfer(a, b) == Catch::Approx(chamfer(b, a)).margin(1e-15));
}

TEST_CASE("psnr formula, sentinel and extremes") {
  Image3 a(10, 10, 0.5), b(10, 10, 0.5);
  CHECK(std::isinf(psnr(a, b)));

  // uniform squared error of 0.01
  Image3 c = a;
  for (auto& v : c.data) v += 0.1;
  CHECK(psnr(a, c) == Catch::Approx(20.0).margin(1e-9));

  Image3 zeros(10, 10, 0.0), ones(10, 10, 1.0);
  CHECK(psnr(zeros, ones) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("object diameter is cached and plausible") {
  const SyntheticObject sphere = make_object("sphere", 73);
  CHECK(sphere.diameter == Catch::Approx(0.22).margin(0.005));
  const SyntheticObject mug = make_object("mug", 79);
  CHECK(mug.diameter > 0.2);
  CHECK(mug.points.size() >= 10000);
}
