#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "criteria.hpp"
#include "pidg/ad/ops.hpp"
#include "pidg/common/parallel.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/flow/gaussian_flow.hpp"
#include "pidg/geometry/quaternion.hpp"
#include "pidg/grid/hash_grid.hpp"
#include "pidg/physics/analytic_fields.hpp"
#include "pidg/physics/residual.hpp"
#include "pidg/render/rasterize.hpp"
#include "pidg/scenegen/scenegen.hpp"
#include "support/fd.hpp"
#include "support/render_ref.hpp"

namespace pidg::acceptance {
namespace {

Eigen::Matrix3d sym(double xx, double yy, double zz, double xy, double xz, double yz) {
  Eigen::Matrix3d m;
  m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
  return m;
}

render::Camera camera_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, int size, double focal) {
  return render::Camera::look_at(eye, target, {0, -1, 0}, size, size, focal);
}

Eigen::Vector3d to_world(const render::Camera& c, const Eigen::Vector3d& cam) {
  return c.rotation.transpose() * (cam - c.translation);
}

struct FlowStats {
  double worst = 0;
  std::size_t valid = 0;
};

// Every surface point seen at t+1 came from `before(now)` at t. Builds the
// backward flow by exact reprojection and compares the recovered motion flow
// with the analytic one.
template <class Before>
void decomposition_trial(const render::Camera& ct, const render::Camera& cn, Before before, std::mt19937_64& rng,
                         FlowStats& stats) {
  const int n = cn.width;
  std::uniform_real_distribution<double> depth(2.5, 4.5);
  flow::FlowField fb(n, n), truth(n, n);
  DepthMap d(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      d.at(x, y) = depth(rng);
      const Eigen::Vector3d now = to_world(cn, flow::backproject({x, y}, d.at(x, y), cn.intrinsics()));
      const Eigen::Vector2d p1 = ct.project(ct.to_camera(before(now)));
      fb.set(x, y, p1 - Eigen::Vector2d(x, y));
      truth.set(x, y, ct.project(ct.to_camera(now)) - p1);
    }
  }
  const flow::FlowDecomposition r = flow::decompose_backward(fb, d, ct, cn);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (!r.motion.is_valid(x, y)) continue;
      ++stats.valid;
      stats.worst = std::max(stats.worst, (r.motion.at(x, y) - truth.at(x, y)).norm());
    }
  }
}

Eigen::Vector3d world_at(const render::Camera& c, int x, int y, double d) {
  return to_world(c, flow::backproject({x, y}, d, c.intrinsics()));
}

// Decomposes every frame pair of a generated scene; `max_motion` reports the
// largest recovered motion magnitude, `stats` the error against the motion map.
void scene_trial(const scenegen::SceneSpec& spec, FlowStats& stats, double* max_motion) {
  const auto scene = scenegen::generate(spec);
  const scenegen::Motion m(scene.spec.motion);
  for (int f = 0; f + 1 < spec.frames; ++f) {
    const auto& ct = scene.cameras[f];
    const auto& cn = scene.cameras[f + 1];
    const auto dec = flow::decompose_backward(scene.backward[f], scene.depths[f + 1], ct, cn);
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        if (!dec.motion.is_valid(x, y)) continue;
        ++stats.valid;
        if (max_motion) *max_motion = std::max(*max_motion, dec.motion.at(x, y).norm());
        const Eigen::Vector3d now = world_at(cn, x, y, scene.depths[f + 1].at(x, y));
        const Eigen::Vector3d before = m.position(m.inverse(now, scene.times[f + 1]), scene.times[f]);
        const Eigen::Vector2d expect = ct.project(ct.to_camera(now)) - ct.project(ct.to_camera(before));
        stats.worst = std::max(stats.worst, (dec.motion.at(x, y) - expect).norm());
      }
    }
  }
}

}  // namespace

Outcome constitutive_oracles() {
  Stopwatch clock;
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  const double rho = 1.7;
  const physics::Elastic law{1.3, 0.6};
  physics::ConstantAdvection advect({0.3, -1.2, 0.8}, sym(2, -1, 0.5, 0.3, -0.2, 0.1));
  physics::ShearFlow shear(1.7, sym(-1, -1, -1, 0.4, 0, 0));
  physics::Hydrostatic pressure(5.0);
  physics::RigidRotation spin({0.3, -0.5, 1.1}, {0.1, 0.2, -0.3}, {0.4, 0, -0.2}, rho);
  physics::ElasticWave wave(0.05, 2.0, law, rho);
  physics::Hydrostatic slope(0.0, {1, 0, 0});
  physics::ResidualOptions full, linear;
  full.density = linear.density = rho;
  linear.advection = false;

  double worst = 0, hydro = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Eigen::Vector4d p(u(rng), u(rng), u(rng), u(rng));
    for (physics::JetField* f : std::initializer_list<physics::JetField*>{&advect, &shear, &pressure, &spin})
      worst = std::max(worst, physics::momentum_residual(*f, p, 0, full).cwiseAbs().maxCoeff());
    worst = std::max(worst, physics::momentum_residual(wave, p, 0, linear).cwiseAbs().maxCoeff());
    hydro = std::max(hydro, (physics::momentum_residual(slope, p, 0) - Eigen::Vector3d(1, 0, 0)).cwiseAbs().maxCoeff());
  }
  const double speed_err = std::abs(wave.wave_speed() * wave.wave_speed() - (law.lambda + 2 * law.mu) / rho);
  const double elapsed = clock.seconds();
  const bool pass = worst < 1e-8 && hydro <= 1e-10 && speed_err < 1e-12 && elapsed < 30.0;
  return {pass, fmt("max residual %.1e", worst) + fmt(", p=x error %.1e", hydro) + fmt(", c^2 error %.1e", speed_err)};
}

Outcome flow_decomposition() {
  Stopwatch clock;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  FlowStats moving, still;

  // Per-pixel surfaces under random rigid object motion and camera motion.
  for (int trial = 0; trial < 20; ++trial) {
    const render::Camera ct = camera_at({0.5 * u(rng), 0.5 * u(rng), -3.5}, {0.1 * u(rng), 0.1 * u(rng), 0}, 32, 40);
    const render::Camera cn = camera_at({0.5 * u(rng), 0.5 * u(rng), -3.5 + 0.3 * u(rng)}, {0.1 * u(rng), 0, 0}, 32, 40);
    const Eigen::Matrix3d rot = geometry::rotation_matrix(geometry::axis_angle(Eigen::Vector3d(u(rng), u(rng), u(rng)), 0.1 * u(rng)));
    const Eigen::Vector3d shift(0.1 * u(rng), 0.1 * u(rng), 0.05 * u(rng)), center(0, 0, 0.5);
    decomposition_trial(ct, cn, [&](const Eigen::Vector3d& x) { return rot.transpose() * (x - shift - center) + center; },
                        rng, moving);
    decomposition_trial(ct, cn, [](const Eigen::Vector3d& x) { return x; }, rng, still);
  }

  // Rendered rigid scenes on an orbiting camera.
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    scenegen::SceneSpec s;
    s.width = s.height = 40;
    s.focal = 45;
    s.frames = 4;
    s.particles = 60;
    s.init_points = 10;
    s.seed = seed;
    s.orbit.arc_degrees = 30;
    s.orbit.height = 0.3 * static_cast<double>(seed);
    s.motion.kind = scenegen::MotionKind::kRigid;
    s.motion.velocity = {0.3, -0.1, 0.2};
    s.motion.omega = {0.1, 0.4 * static_cast<double>(seed), -0.2};
    s.motion.center = {0.05, 0, 0};
    scene_trial(s, moving, nullptr);
    s.motion.velocity.setZero();
    s.motion.omega.setZero();
    s.orbit.arc_degrees = 60;
    double largest = 0;
    FlowStats ignored;
    scene_trial(s, ignored, &largest);
    still.worst = std::max(still.worst, largest);
    still.valid += ignored.valid;
  }
  const double elapsed = clock.seconds();
  const bool pass = moving.worst < 1e-6 && still.worst < 1e-6 && moving.valid > 0 && still.valid > 0 && elapsed < 30.0;
  return {pass, fmt("moving err %.1e px", moving.worst) + fmt(" on %.0f px", static_cast<double>(moving.valid)) +
                    fmt(", static max %.1e px", still.worst) + fmt(" on %.0f px", static_cast<double>(still.valid))};
}

Outcome gaussian_flow_exactness() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  double worst = 0;
  std::size_t covered = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const render::Camera cam = camera_at({0.3 * u(rng), 0.3 * u(rng), -4}, {0, 0, 0}, 48, 60);
    ad::Tape tape;
    const ad::Tensor mean({1, 3}, {0.2 * u(rng), 0.2 * u(rng), 0.2 * u(rng)});
    const Eigen::Vector4d q = geometry::normalized(Eigen::Vector4d(u(rng), u(rng), u(rng), u(rng)));
    const ad::Tensor quat({1, 4}, {q[0], q[1], q[2], q[3]});
    const ad::Tensor scale({1, 3}, {std::log(0.1 + 0.2 * (u(rng) + 1)), std::log(0.1 + 0.1 * (u(rng) + 1)), std::log(0.15)});
    const render::Projection at_t = render::project(cam, tape.constant(mean), tape.constant(quat), tape.constant(scale));
    const std::int64_t ids[] = {0};
    const auto out = render::rasterize(cam, at_t, tape.constant(ad::Tensor({1, 3}, {1, 1, 1})),
                                       tape.constant(ad::Tensor({1, 1}, {0.9})), ids);
    const Eigen::Vector2d shift(3 * u(rng), 3 * u(rng));
    const ad::Var moved = ad::add_row(at_t.means2d, tape.constant(ad::Tensor({1, 2}, {shift.x(), shift.y()})));
    const auto f = flow::gaussian_flow(out.topk, at_t.means2d, at_t.cov2d, moved, at_t.cov2d);
    for (std::size_t px = 0; px < f.valid.size(); ++px) {
      if (out.topk.count[px] == 0) continue;
      if (!f.valid[px]) {
        worst = INFINITY;
        continue;
      }
      ++covered;
      worst = std::max(worst, (Eigen::Vector2d(f.flow.value().at(px, 0), f.flow.value().at(px, 1)) - shift).norm());
    }
  }

  // Mean (0,0) -> (1,0), Lambda diag(1,1) -> diag(4,1), pixel one unit right of
  // the mean: mapped to (3,0).
  render::TopK tk;
  tk.width = 3;
  tk.height = 1;
  tk.k = 1;
  tk.index.assign(3, 0);
  tk.weight.assign(3, 1.0);
  tk.count.assign(3, 1);
  ad::Tape tape;
  const auto hand = flow::gaussian_flow(tk, tape.constant(ad::Tensor({1, 2}, {0, 0})),
                                        tape.constant(ad::Tensor({1, 3}, {1, 0, 1})),
                                        tape.constant(ad::Tensor({1, 2}, {1, 0})),
                                        tape.constant(ad::Tensor({1, 3}, {4, 0, 1})));
  const double hx = hand.flow.value().at(1, 0), hy = hand.flow.value().at(1, 1);
  const bool pass = covered > 0 && worst < 1e-9 && hx == 2.0 && hy == 0.0;
  return {pass, fmt("translation err %.1e px", worst) + fmt(" on %.0f px", static_cast<double>(covered)) +
                    fmt(", hand case (%g,", hx) + fmt(" %g)", hy)};
}

Outcome compositing_oracle() {
  double worst = 0;
  bool identical = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 50);
    const std::size_t n = 10 + seed * 4;  // 10..46
    const test::Blobs b = test::random_blobs(n, rng);
    const render::Camera cam = test::test_camera(37, 29, 30);
    const auto ref = test::brute_force(cam, b);
    ad::Tensor first_color, first_depth, first_grad;
    for (std::size_t threads : {1, 2, 3, 5, 8}) {
      set_thread_count(threads);
      ad::Tape t;
      const ad::Var means = t.leaf(b.means);
      const render::Projection p = render::project(cam, means, t.constant(b.quats), t.constant(b.scales));
      const render::RenderOutput out = render::rasterize(cam, p, t.constant(b.colors), t.constant(b.opacity), b.ids);
      const ad::Var in[] = {means};
      const ad::Tensor grad = t.gradients(ad::sum(ad::square(out.color)), in)[0];
      for (std::size_t px = 0; px < ref.size() / 4; ++px) {
        for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(out.color.value()[px * 3 + c] - ref[px * 4 + c]));
        worst = std::max(worst, std::abs(out.depth.value()[px] - ref[px * 4 + 3]));
      }
      if (threads == 1) {
        first_color = out.color.value();
        first_depth = out.depth.value();
        first_grad = grad;
      } else {
        identical = identical && test::bit_identical(first_color, out.color.value()) &&
                    test::bit_identical(first_depth, out.depth.value()) && test::bit_identical(first_grad, grad);
      }
    }
  }
  set_thread_count(0);
  return {worst < 1e-10 && identical,
          fmt("max |tiled - reference| %.1e", worst) + (identical ? ", bit-identical over 1,2,3,5,8 threads" : ", thread counts differ")};
}

Outcome block_sampled_cmr() {
  std::mt19937_64 rng(6);
  physics::ElasticWave wave(0.3, 3.0, physics::Elastic{1.0, 1.0});  // nonzero residual with advection
  physics::CmrSamples samples{ad::Tensor({64, 4}), {}};
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (double& v : samples.points.values()) v = u(rng);
  for (std::int64_t i = 0; i < 64; ++i) samples.ids.push_back(i % 16);
  const double full = physics::cmr_loss(wave, samples);

  physics::BlockCmrOptions one;
  one.block_size = 64;
  const physics::BlockCmrResult r1 = physics::block_sampled_cmr(wave, samples, one);
  const bool bitwise = r1.blocks == 1 && std::memcmp(&r1.loss, &full, sizeof(double)) == 0;

  double multi = 0;
  for (std::size_t block : {32, 10, 7, 1}) {
    physics::BlockCmrOptions o;
    o.block_size = block;
    multi = std::max(multi, std::abs(physics::block_sampled_cmr(wave, samples, o).loss - full));
  }

  physics::BlockCmrOptions half;
  half.block_size = 8;
  half.sample_fraction = 0.5;
  double acc = 0;
  const int draws = 10000;
  for (int seed = 0; seed < draws; ++seed) {
    std::mt19937_64 draw(static_cast<std::uint64_t>(seed));
    acc += physics::block_sampled_cmr(wave, samples, half, &draw).loss;
  }
  const double bias = std::abs(acc / draws - full) / full;
  const bool pass = full > 0 && bitwise && multi < 1e-12 && bias < 0.02;
  return {pass, std::string(bitwise ? "one block bit-identical" : "one block differs") +
                    fmt(", multi-block err %.1e", multi) + fmt(", subsample mean off by %.2f%%", 100 * bias)};
}

Outcome memory_decomposition() {
  bool pass = true;
  std::string detail;
  const std::size_t d = 2;
  for (std::size_t n : {8, 16, 32}) {
    const std::size_t ours = grid::decomposed_entry_count(n) * d, mono = grid::monolithic_entry_count(n) * d;
    // Dense single-level grids built at that resolution hold exactly these entries.
    std::mt19937_64 rng(n);
    grid::GridConfig c3;
    c3.dims = 3;
    c3.levels = 1;
    c3.base_resolution.assign(3, static_cast<double>(n));
    c3.max_resolution.assign(3, static_cast<double>(n));
    c3.table_size_log2 = 20;
    c3.feature_dim = d;
    grid::GridConfig c4 = c3;
    c4.dims = 4;
    c4.base_resolution.assign(4, static_cast<double>(n));
    c4.max_resolution.assign(4, static_cast<double>(n));
    const grid::MultiResGrid g3("g3", c3, rng), g4("g4", c4, rng);
    const std::size_t built3 = 4 * g3.table().value.size(), built4 = g4.table().value.size();
    const bool ok = ours == 4 * n * n * n * d && mono == n * n * n * n * d && built3 == ours && built4 == mono;
    pass = pass && ok;
    detail += (detail.empty() ? "" : ", ") + std::string("n=") + std::to_string(n) + ": " + std::to_string(ours) +
              " vs " + std::to_string(mono);
  }
  return {pass, detail};
}

}  // namespace pidg::acceptance
