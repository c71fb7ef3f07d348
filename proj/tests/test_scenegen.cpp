#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pidg/common/error.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/physics/residual.hpp"
#include "pidg/scenegen/scenegen.hpp"

using namespace pidg;
using scenegen::MotionKind;
using scenegen::SceneSpec;

namespace {

SceneSpec small_spec(MotionKind kind) {
  SceneSpec s;
  s.width = 40;
  s.height = 40;
  s.focal = 45;
  s.frames = 3;
  s.particles = 40;
  s.init_points = 20;
  s.motion.kind = kind;
  switch (kind) {
    case MotionKind::kRigid:
      s.motion.velocity = {0.3, -0.1, 0.2};
      s.motion.omega = {0.1, 0.4, -0.2};
      s.motion.center = {0.05, 0, 0};
      break;
    case MotionKind::kShear:
      s.motion.gamma = 0.5;
      break;
    case MotionKind::kElasticWave:
      s.motion.amplitude = 0.3;
      s.motion.wavenumber = 2.0;
      s.motion.law = {2.0, 1.0};
      break;
    case MotionKind::kAdvect:
      s.motion.velocity = {-0.2, 0.1, 0.3};
      break;
  }
  return s;
}

Eigen::Vector3d world_at(const render::Camera& c, int x, int y, double d) {
  return c.rotation.transpose() * (flow::backproject({x, y}, d, c.intrinsics()) - c.translation);
}

}  // namespace

TEST_CASE("scenegen: spec validation") {
  SceneSpec s = small_spec(MotionKind::kRigid);
  s.frames = 1;
  CHECK_THROWS_AS(scenegen::generate(s), ConfigError);
  s = small_spec(MotionKind::kRigid);
  s.particles = 0;
  CHECK_THROWS_AS(scenegen::generate(s), ConfigError);
  s = small_spec(MotionKind::kRigid);
  s.orbit.radius = 0;
  CHECK_THROWS_AS(scenegen::generate(s), ConfigError);
  CHECK_THROWS_AS(scenegen::spec_from_json(nlohmann::json{{"motion", {{"type", "smoke"}}}}), ConfigError);
}

TEST_CASE("scenegen: spec json round trip") {
  const SceneSpec s = small_spec(MotionKind::kElasticWave);
  const SceneSpec r = scenegen::spec_from_json(scenegen::spec_to_json(s));
  CHECK(scenegen::spec_to_json(r) == scenegen::spec_to_json(s));
  CHECK(r.motion.kind == MotionKind::kElasticWave);
}

TEST_CASE("scenegen: motion maps invert") {
  for (auto kind : {MotionKind::kRigid, MotionKind::kShear, MotionKind::kElasticWave, MotionKind::kAdvect}) {
    const scenegen::Motion m(small_spec(kind).motion);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int i = 0; i < 20; ++i) {
      const Eigen::Vector3d x0(u(rng), u(rng), u(rng));
      const double t = 0.5 * (u(rng) + 1);
      CHECK((m.position(x0, 0.0) - x0).norm() < 1e-12);
      CHECK((m.inverse(m.position(x0, t), t) - x0).norm() < 1e-10);
      // velocity is the time derivative of the trajectory
      const double h = 1e-6;
      const Eigen::Vector3d fd = (m.position(x0, t + h) - m.position(x0, t - h)) / (2 * h);
      CHECK((fd - m.velocity(x0, t)).norm() < 1e-7);
      // and matches the Eulerian field at the current position; the wave field
      // is linearized about the reference configuration
      if (m.linearized()) continue;
      const Eigen::Vector3d x = m.position(x0, t);
      CHECK((m.field().velocity({x.x(), x.y(), x.z(), t}) - m.velocity(x0, t)).norm() < 1e-9);
    }
  }
}

TEST_CASE("scenegen: rigid rotation speed is omega r") {
  SceneSpec s = small_spec(MotionKind::kRigid);
  s.particles = 100;
  s.motion.velocity.setZero();
  s.motion.omega = {0, 0, 0.7};
  s.motion.center = {0.1, -0.2, 0};
  const auto scene = scenegen::generate(s);
  const auto truth = scenegen::analytic_truth(scene, 0.35);
  REQUIRE(truth.size() == 100);
  for (const auto& p : truth) {
    const Eigen::Vector3d r = p.position - s.motion.center;
    const double radius = std::hypot(r.x(), r.y());
    CHECK(std::abs(p.velocity.norm() - 0.7 * radius) < 1e-12);
    CHECK(p.strain.norm() == 0.0);
  }
  CHECK_THROWS_AS(scenegen::analytic_truth(scene, 1.5), DomainError);
}

TEST_CASE("scenegen: shear velocity is divergence free") {
  const scenegen::Motion m(small_spec(MotionKind::kShear).motion);
  ad::Tape tape;
  ad::Binder bind(tape);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  ad::Tensor pts({50, 4});
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t k = 0; k < 4; ++k) pts.at(i, k) = k == 3 ? 0.5 * (u(rng) + 1) : u(rng);
  const std::vector<std::int64_t> ids(50, 0);
  const auto jet = m.field().evaluate(bind, pts, ids);
  for (std::size_t i = 0; i < 50; ++i) {
    double div = 0;
    for (int k = 0; k < 3; ++k) div += jet.velocity.tangent(static_cast<std::size_t>(k)).value().at(i, static_cast<std::size_t>(k));
    CHECK(div == 0.0);
  }
}

TEST_CASE("scenegen: elastic wave truth") {
  SceneSpec s = small_spec(MotionKind::kElasticWave);
  SUBCASE("zero amplitude is at rest") {
    s.motion.amplitude = 0;
    const auto scene = scenegen::generate(s);
    for (const auto& p : scenegen::analytic_truth(scene, 0.6)) {
      CHECK(p.velocity.norm() == 0.0);
      CHECK(p.stress.norm() == 0.0);
    }
  }
  SUBCASE("stress follows the linear elastic law and balances momentum") {
    const auto scene = scenegen::generate(s);
    const scenegen::Motion m(s.motion);
    CHECK(m.linearized());
    const double lam = s.motion.law.lambda, mu = s.motion.law.mu;
    for (const auto& p : scenegen::analytic_truth(scene, 0.4)) {
      const Eigen::Matrix3d expect = lam * p.strain.trace() * Eigen::Matrix3d::Identity() + 2 * mu * p.strain;
      CHECK((p.stress - expect).norm() < 1e-12);
      physics::ResidualOptions opts;
      opts.density = s.motion.density;
      opts.advection = false;
      const Eigen::Vector3d r = physics::momentum_residual(
          m.field(), {p.position.x(), p.position.y(), p.position.z(), 0.4}, 0, opts);
      CHECK(r.cwiseAbs().maxCoeff() < 1e-8);
    }
  }
}

TEST_CASE("scenegen: rigid translation under a static camera") {
  SceneSpec s = small_spec(MotionKind::kRigid);
  s.orbit.arc_degrees = 0;
  s.motion.omega.setZero();
  s.motion.velocity = {0.4, 0, 0};
  s.blob_radius = 0.3;
  const auto scene = scenegen::generate(s);
  const auto& cam = scene.cameras[1];
  const auto& fb = scene.backward[0];
  const double dt = scene.times[1] - scene.times[0];
  std::size_t covered = 0;
  double lo = 1e9, hi = -1e9;
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      const double d = scene.depths[1].at(x, y);
      if (!(d > 0)) {
        CHECK_FALSE(fb.is_valid(x, y));
        continue;
      }
      REQUIRE(fb.is_valid(x, y));
      ++covered;
      // camera x axis is world +x when looking down +z with up = -y
      const Eigen::Vector2d f = fb.at(x, y);
      const Eigen::Vector3d axis = cam.rotation * Eigen::Vector3d(0.4 * dt, 0, 0);
      CHECK(std::abs(axis.z()) < 1e-12);
      CHECK(std::abs(f.x() + cam.fx * axis.x() / d) < 1e-9);
      CHECK(std::abs(f.y() + cam.fy * axis.y() / d) < 1e-9);
      lo = std::min(lo, f.x());
      hi = std::max(hi, f.x());
    }
  }
  CHECK(covered > 50);
  // Constant over the object up to its depth spread.
  CHECK(hi - lo < 0.25 * std::abs(lo));
}

TEST_CASE("scenegen: decomposition recovers the analytic object flow") {
  for (auto kind : {MotionKind::kRigid, MotionKind::kShear, MotionKind::kElasticWave, MotionKind::kAdvect}) {
    CAPTURE(static_cast<int>(kind));
    const auto scene = scenegen::generate(small_spec(kind));
    const scenegen::Motion m(scene.spec.motion);
    for (int f = 0; f + 1 < scene.spec.frames; ++f) {
      const auto& ct = scene.cameras[f];
      const auto& cn = scene.cameras[f + 1];
      const auto dec = flow::decompose_backward(scene.backward[f], scene.depths[f + 1], ct, cn);
      std::size_t checked = 0;
      double worst = 0;
      for (int y = 0; y < scene.spec.height; ++y) {
        for (int x = 0; x < scene.spec.width; ++x) {
          if (!dec.motion.is_valid(x, y)) continue;
          const Eigen::Vector3d now = world_at(cn, x, y, scene.depths[f + 1].at(x, y));
          const Eigen::Vector3d before = m.position(m.inverse(now, scene.times[f + 1]), scene.times[f]);
          const Eigen::Vector2d expect = ct.project(ct.to_camera(now)) - ct.project(ct.to_camera(before));
          worst = std::max(worst, (dec.motion.at(x, y) - expect).norm());
          ++checked;
        }
      }
      CHECK(checked > 50);
      CHECK(worst < 1e-6);
    }
  }
}

TEST_CASE("scenegen: static scene gives no motion under an orbit") {
  SceneSpec s = small_spec(MotionKind::kAdvect);
  s.motion.velocity.setZero();
  s.orbit.arc_degrees = 40;
  s.orbit.height = 0.7;
  const auto scene = scenegen::generate(s);
  for (int f = 0; f + 1 < s.frames; ++f) {
    const auto dec = flow::decompose_backward(scene.backward[f], scene.depths[f + 1], scene.cameras[f], scene.cameras[f + 1]);
    CHECK(dec.motion.valid_count() > 50);
    for (std::size_t i = 0; i < dec.motion.uv.size(); ++i) CHECK(std::abs(dec.motion.uv[i]) < 1e-6);
    for (auto b : scene.masks[f].bits) CHECK(b == 0);
  }
}

TEST_CASE("scenegen: depth at a particle center is its camera z") {
  SceneSpec s = small_spec(MotionKind::kAdvect);
  s.particles = 1;
  s.opacity_min = 0.9;
  s.opacity_max = 0.95;
  s.frames = 2;
  const auto scene = scenegen::generate(s);
  for (int f = 0; f < 2; ++f) {
    const auto posed = scenegen::posed_cloud(scene, scene.times[f]);
    const auto& cam = scene.cameras[f];
    const Eigen::Vector3d c = cam.to_camera(posed.particle(0).position);
    const Eigen::Vector2d p = cam.project(c);
    // Nudge the particle so its center lands on a pixel center.
    const Eigen::Vector2d snap(std::round(p.x()), std::round(p.y()));
    const Eigen::Vector3d shifted = flow::backproject(snap, c.z(), cam.intrinsics());
    scene::GaussianCloud one(0);
    auto part = posed.particle(0);
    part.position = cam.rotation.transpose() * (shifted - cam.translation);
    one.add(part);
    DepthMap d;
    scenegen::render_cloud(one, cam, &d);
    CHECK(std::abs(d.at(static_cast<int>(snap.x()), static_cast<int>(snap.y())) - c.z()) < 1e-9);
  }
}

TEST_CASE("scenegen: masks flag moving pixels") {
  const auto scene = scenegen::generate(small_spec(MotionKind::kAdvect));
  REQUIRE(scene.masks.size() == 3);
  for (const auto& m : scene.masks) {
    std::size_t on = 0;
    for (auto b : m.bits) on += b;
    CHECK(on > 50);
  }
  const auto& mask = scene.masks[0];
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      CHECK(mask.at(x, y) == (scene.motion[0].is_valid(x, y) && scene.motion[0].at(x, y).norm() > 0.1));
}

TEST_CASE("scenegen: bounds contain every trajectory") {
  const auto scene = scenegen::generate(small_spec(MotionKind::kRigid));
  for (double t : {0.0, 0.13, 0.5, 0.77, 1.0})
    for (const auto& p : scenegen::analytic_truth(scene, t)) {
      CHECK((p.position.array() >= scene.bounds.lo.array()).all());
      CHECK((p.position.array() <= scene.bounds.hi.array()).all());
    }
  CHECK(scene.init_points.size() == 20);
}

TEST_CASE("scenegen: write and read back") {
  const auto dir = std::filesystem::temp_directory_path() / "pidg_scenegen_rt";
  std::filesystem::remove_all(dir);
  SceneSpec s = small_spec(MotionKind::kShear);
  s.frames = 2;
  const auto scene = scenegen::generate(s);
  scenegen::write_scene(scene, dir);
  CHECK(std::filesystem::exists(dir / scenegen::frame_name(1)));
  CHECK(std::filesystem::exists(dir / scenegen::backward_name(1)));
  CHECK_FALSE(std::filesystem::exists(dir / scenegen::backward_name(0)));
  const auto back = scenegen::read_scene(dir);
  CHECK(back.times == scene.times);
  const auto a = back.cloud.means().value.values();
  const auto b = scene.cloud.means().value.values();
  CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  CHECK(back.cloud.ids() == scene.cloud.ids());
  CHECK(back.depths[1].depth == scene.depths[1].depth);
  CHECK(back.backward[0].uv == [&] {
    std::vector<double> v;
    for (double x : scene.backward[0].uv) v.push_back(static_cast<float>(x));
    return v;
  }());
  CHECK(back.masks[0].bits == scene.masks[0].bits);
  CHECK(back.cameras[1].rotation == scene.cameras[1].rotation);
  CHECK(back.bounds.lo == scene.bounds.lo);
  // regeneration is deterministic
  const auto again = scenegen::generate(s);
  CHECK(again.frames[1].rgb == scene.frames[1].rgb);
  std::filesystem::remove_all(dir);
}
