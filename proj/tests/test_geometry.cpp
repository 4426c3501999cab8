#include <catch2/catch_amalgamated.hpp>

#include <cstdio>

#include "splatpose/geometry.hpp"
#include "splatpose/simharness.hpp"

using namespace splatpose;

namespace {

PointCloud random_blob(Rng& rng, std::size_t n, double extent = 0.2) {
  PointCloud c;
  c.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    c.points.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                        rng.uniform(-extent, extent)});
  return c;
}

RigidTransform random_rigid(Rng& rng, double max_angle, double max_trans) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return RigidTransform::from_axis_angle(
      axis, rng.uniform(-max_angle, max_angle),
      {rng.uniform(-max_trans, max_trans), rng.uniform(-max_trans, max_trans),
       rng.uniform(-max_trans, max_trans)});
}

}  // namespace

TEST_CASE("compose identity and inverse") {
  const RigidTransform id;
  const RigidTransform ii = compose(id, id);
  CHECK(rotation_angle(ii) < 1e-12);
  CHECK(ii.translation.norm() < 1e-12);

  Rng rng(7);
  for (int i = 0; i < 20; ++i) {
    const RigidTransform t = random_rigid(rng, kPi, 2.0);
    const RigidTransform r = compose(t, inverse(t));
    CHECK(rotation_angle(r) < 1e-9);
    CHECK(r.translation.norm() < 1e-9);
    CHECK(std::abs(t.rotation.norm() - 1.0) < 1e-9);
  }
}

TEST_CASE("compose matches hand rotation product") {
  // Rz(90) * Rz(90) = Rz(180): (1,0,0) -> (-1,0,0)
  const RigidTransform rz90 = RigidTransform::from_axis_angle({0, 0, 1}, kPi / 2);
  const Eigen::Vector3d p = compose(rz90, rz90).apply({1, 0, 0});
  CHECK(p.x() == Catch::Approx(-1.0).margin(1e-12));
  CHECK(p.y() == Catch::Approx(0.0).margin(1e-12));
  CHECK(p.z() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("compose associativity on points") {
  Rng rng(11);
  for (int i = 0; i < 30; ++i) {
    const RigidTransform a = random_rigid(rng, kPi, 1.0);
    const RigidTransform b = random_rigid(rng, kPi, 1.0);
    const Eigen::Vector3d p(rng.normal(), rng.normal(), rng.normal());
    CHECK((compose(a, b).apply(p) - a.apply(b.apply(p))).norm() < 1e-12);
  }
}

TEST_CASE("project examples") {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = cam.height = 100;

  const PixelDepth axis = project(cam, {0, 0, 2});
  CHECK(axis.u == Catch::Approx(50.0));
  CHECK(axis.v == Catch::Approx(50.0));
  CHECK(axis.depth == Catch::Approx(2.0));

  const PixelDepth off = project(cam, {0.5, 0, 1});
  CHECK(off.u == Catch::Approx(100.0));

  CHECK_THROWS_AS(project(cam, {0.0, 0.0, -1.0}), NonPositiveDepth);
  CHECK_THROWS_AS(project(cam, {0.0, 0.0, 0.0}), NonPositiveDepth);
}

TEST_CASE("project unproject identity") {
  Camera cam;
  cam.fx = 85;
  cam.fy = 92;
  cam.cx = 31.5;
  cam.cy = 23.5;
  cam.width = 64;
  cam.height = 48;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double u = rng.uniform(0, 64), v = rng.uniform(0, 48), d = rng.uniform(0.1, 5.0);
    const Eigen::Vector3d p = unproject(cam, u, v, d);
    const PixelDepth pd = project(cam, p);
    CHECK(std::abs(pd.u - u) < 1e-9);
    CHECK(std::abs(pd.v - v) < 1e-9);
    CHECK(std::abs(pd.depth - d) < 1e-9);
  }
}

TEST_CASE("pca_scale recovers pure scaling") {
  Rng rng(5);
  const PointCloud src = random_blob(rng, 300);
  PointCloud doubled;
  for (const auto& p : src.points) doubled.points.push_back(2.0 * p);
  CHECK(pca_scale(src, doubled) == Catch::Approx(2.0).margin(1e-9));
  CHECK(pca_scale(src, src) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("pca_scale invariant to rigid motion of either cloud") {
  Rng rng(6);
  const PointCloud src = random_blob(rng, 400);
  const RigidTransform t = random_rigid(rng, kPi, 3.0);
  PointCloud moved;
  for (const auto& p : src.points) moved.points.push_back(t.apply(0.5 * p));
  CHECK(pca_scale(src, moved) == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("pca_scale property over scale sweep") {
  Rng rng(8);
  const PointCloud src = random_blob(rng, 256);
  for (double alpha : {0.1, 0.5, 1.0, 2.0, 10.0}) {
    PointCloud scaled;
    for (const auto& p : src.points) scaled.points.push_back(alpha * p);
    CHECK(pca_scale(src, scaled) == Catch::Approx(alpha).margin(1e-6 * alpha));
  }
}

TEST_CASE("pca_scale rejects degenerate clouds") {
  PointCloud flat;
  Rng rng(9);
  for (int i = 0; i < 50; ++i)
    flat.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), 0.0});
  PointCloud ok = random_blob(rng, 50);
  CHECK_THROWS_AS(pca_scale(flat, ok), DegenerateCloud);
  CHECK_THROWS_AS(pca_scale(ok, flat), DegenerateCloud);
  PointCloud tiny;
  tiny.points = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  CHECK_THROWS_AS(pca_scale(tiny, ok), DegenerateCloud);
}

TEST_CASE("icp identity fixed point") {
  Rng rng(12);
  const auto obj = make_object("box", 77, 2000);
  const IcpResult r = icp_refine(obj.points, obj.points, RigidTransform::identity());
  CHECK(r.residual < 1e-12);
  CHECK(rotation_angle(r.transform) < 1e-12);
  CHECK(r.transform.translation.norm() < 1e-12);
}

TEST_CASE("icp recovers a known transform") {
  const auto obj = make_object("mug", 13, 3000);
  const RigidTransform t_true = RigidTransform::from_axis_angle(
      Eigen::Vector3d(0.3, 1.0, -0.2).normalized(), deg2rad(5.0), {0.01, -0.004, 0.006});
  PointCloud target;
  for (const auto& p : obj.points.points) target.points.push_back(t_true.apply(p));

  const IcpResult r = icp_refine(obj.points, target, RigidTransform::identity());
  CHECK(rotation_distance(r.transform, t_true) < deg2rad(0.05));
  CHECK((r.transform.translation - t_true.translation).norm() < 1e-4);

  // residual history is non-increasing
  for (std::size_t i = 1; i < r.residual_history.size(); ++i)
    CHECK(r.residual_history[i] <= r.residual_history[i - 1] + 1e-15);
}

TEST_CASE("icp throws without correspondences") {
  Rng rng(14);
  const PointCloud a = random_blob(rng, 100, 0.1);
  PointCloud b;
  for (const auto& p : a.points) b.points.push_back(p + Eigen::Vector3d(10, 0, 0));
  IcpConfig cfg;
  cfg.radius = 0.1;
  CHECK_THROWS_AS(icp_refine(a, b, RigidTransform::identity(), cfg), NoCorrespondences);
}

TEST_CASE("alignment: pure scaling") {
  const auto obj = make_object("sphere", 15, 2500);
  PointCloud real;
  for (const auto& p : obj.points.points) real.points.push_back(3.0 * p);
  const SimTransform sim = align_generated_to_real(obj.points, real);
  CHECK(sim.scale == Catch::Approx(3.0).margin(1e-6));
  CHECK(rotation_angle(sim.rigid) < deg2rad(0.2));
  CHECK(sim.rigid.translation.norm() < 1e-4);
}

TEST_CASE("alignment: identity") {
  const auto obj = make_object("box", 16, 2000);
  const SimTransform sim = align_generated_to_real(obj.points, obj.points);
  CHECK(sim.scale == Catch::Approx(1.0).margin(1e-9));
  CHECK(rotation_angle(sim.rigid) < 1e-6);
  CHECK(sim.rigid.translation.norm() < 1e-9);
}

TEST_CASE("alignment recovers known sim transform under noise") {
  const auto obj = make_object("mug", 17, 4000);
  Rng rng(18);
  for (int trial = 0; trial < 3; ++trial) {
    const double s = rng.uniform(0.5, 2.0);
    Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
    axis.normalize();
    const RigidTransform rigid = RigidTransform::from_axis_angle(
        axis, rng.uniform(-deg2rad(12.0), deg2rad(12.0)),
        {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)});
    PointCloud real;
    for (const auto& p : obj.points.points)
      real.points.push_back(rigid.apply(s * p) +
                            Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 1e-3);
    const SimTransform sim = align_generated_to_real(obj.points, real);
    CHECK(std::abs(sim.scale - s) / s < 0.02);
    CHECK(rotation_distance(sim.rigid, rigid) < deg2rad(1.0));
    CHECK((sim.rigid.translation - rigid.translation).norm() < 5e-3);
  }
}

TEST_CASE("alignment never increases chamfer distance") {
  Rng rng(19);
  const auto obj = make_object("cylinder", 20, 1500);
  for (int trial = 0; trial < 4; ++trial) {
    const double s = rng.uniform(0.7, 1.5);
    const RigidTransform rigid = random_rigid(rng, deg2rad(10.0), 0.2);
    PointCloud real;
    for (const auto& p : obj.points.points)
      real.points.push_back(rigid.apply(s * p) +
                            Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal()) * 5e-4);
    const SimTransform sim = align_generated_to_real(obj.points, real);
    const double before = chamfer(obj.points, real);
    const double after = chamfer(obj.points.transformed(sim), real);
    CHECK(after <= before);
  }
}

TEST_CASE("point cloud ply round trip") {
  Rng rng(21);
  PointCloud cloud = random_blob(rng, 64);
  cloud.confidence.resize(64);
  for (auto& c : cloud.confidence) c = rng.uniform(0.1, 1.0);
  const std::string path = "geometry_roundtrip.ply";
  save_ply(cloud, path);
  const PointCloud back = load_ply(path);
  REQUIRE(back.size() == cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    CHECK((back.points[i] - cloud.points[i]).norm() == 0.0);
    CHECK(back.confidence[i] == cloud.confidence[i]);
  }
  std::remove(path.c_str());
}

TEST_CASE("transform json round trip") {
  Rng rng(22);
  const RigidTransform t = random_rigid(rng, kPi, 2.0);
  const RigidTransform back = rigid_from_json(to_json(t));
  CHECK(rotation_distance(t, back) < 1e-12);
  CHECK((t.translation - back.translation).norm() < 1e-12);

  SimTransform sim;
  sim.scale = 2.5;
  sim.rigid = t;
  const SimTransform sback = sim_from_json(to_json(sim));
  CHECK(sback.scale == 2.5);

  // missing scale defaults to 1
  json j = to_json(t);
  j.erase("scale");
  CHECK(sim_from_json(j).scale == 1.0);
}

TEST_CASE("grid nearest neighbor matches brute force") {
  Rng rng(23);
  const PointCloud cloud = random_blob(rng, 1200, 0.4);
  GridIndex index(cloud.points);
  for (int i = 0; i < 300; ++i) {
    const Eigen::Vector3d q(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                            rng.uniform(-0.5, 0.5));
    const NearestHit g = index.nearest(q);
    const NearestHit b = nearest_brute(cloud.points, q);
    CHECK(g.dist == Catch::Approx(b.dist).margin(1e-12));
  }
}
