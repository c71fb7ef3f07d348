#include "pidg/scenegen/scenegen.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/geometry/quaternion.hpp"
#include "pidg/io/formats.hpp"
#include "pidg/render/rasterize.hpp"

namespace pidg::scenegen {
namespace {

constexpr double kShC0 = 0.28209479177387814;

Eigen::Vector3d vec3(const nlohmann::json& j, const char* key, const Eigen::Vector3d& fallback) {
  if (!j.contains(key)) return fallback;
  const auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 3) throw ConfigError(std::string(key) + " needs three components");
  return {v[0], v[1], v[2]};
}

std::vector<double> list(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

const char* kind_name(MotionKind k) {
  switch (k) {
    case MotionKind::kRigid: return "rigid";
    case MotionKind::kShear: return "shear";
    case MotionKind::kElasticWave: return "elastic-wave";
    case MotionKind::kAdvect: return "advect";
  }
  return "rigid";
}

MotionKind kind_from(const std::string& s) {
  if (s == "rigid") return MotionKind::kRigid;
  if (s == "shear") return MotionKind::kShear;
  if (s == "elastic-wave") return MotionKind::kElasticWave;
  if (s == "advect") return MotionKind::kAdvect;
  throw ConfigError("unknown motion type '" + s + "'");
}

void validate(const SceneSpec& s) {
  std::vector<std::string> errors;
  if (s.frames < 2) errors.push_back("frames must be at least 2");
  if (s.particles < 1) errors.push_back("particles must be at least 1");
  if (s.width < 1 || s.height < 1) errors.push_back("image size must be positive");
  if (!(s.focal > 0)) errors.push_back("focal must be positive");
  if (!(s.orbit.radius > 0)) errors.push_back("camera orbit has zero radius");
  if (!(s.scale_min > 0) || s.scale_max < s.scale_min) errors.push_back("scale range must satisfy 0 < min <= max");
  if (!(s.opacity_min > 0) || s.opacity_max >= 1 || s.opacity_max < s.opacity_min) {
    errors.push_back("opacity range must lie in (0,1)");
  }
  if (!(s.blob_radius > 0)) errors.push_back("blob_radius must be positive");
  if (s.motion.kind == MotionKind::kElasticWave && (s.motion.wavenumber == 0 || !(s.motion.density > 0))) {
    errors.push_back("elastic wave needs a nonzero wavenumber and positive density");
  }
  if (!errors.empty()) {
    std::string msg = "invalid scene spec:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

Eigen::Vector3d world_point(const render::Camera& cam, const Eigen::Vector2d& p, double depth) {
  return cam.rotation.transpose() * (flow::backproject(p, depth, cam.intrinsics()) - cam.translation);
}

}  // namespace

SceneSpec spec_from_json(const nlohmann::json& j) {
  try {
    SceneSpec s;
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.focal = j.value("focal", s.focal);
    s.frames = j.value("frames", s.frames);
    s.seed = j.value("seed", s.seed);
    s.particles = j.value("particles", s.particles);
    s.blob_radius = j.value("blob_radius", s.blob_radius);
    s.scale_min = j.value("scale_min", s.scale_min);
    s.scale_max = j.value("scale_max", s.scale_max);
    s.opacity_min = j.value("opacity_min", s.opacity_min);
    s.opacity_max = j.value("opacity_max", s.opacity_max);
    s.init_points = j.value("init_points", s.init_points);
    s.init_jitter = j.value("init_jitter", s.init_jitter);
    if (j.contains("orbit")) {
      const auto& o = j.at("orbit");
      s.orbit.target = vec3(o, "target", s.orbit.target);
      s.orbit.radius = o.value("radius", s.orbit.radius);
      s.orbit.height = o.value("height", s.orbit.height);
      s.orbit.arc_degrees = o.value("arc_degrees", s.orbit.arc_degrees);
    }
    if (j.contains("motion")) {
      const auto& m = j.at("motion");
      s.motion.kind = kind_from(m.value("type", std::string("rigid")));
      s.motion.velocity = vec3(m, "velocity", s.motion.velocity);
      s.motion.omega = vec3(m, "omega", s.motion.omega);
      s.motion.center = vec3(m, "center", s.motion.center);
      s.motion.gamma = m.value("gamma", s.motion.gamma);
      s.motion.amplitude = m.value("amplitude", s.motion.amplitude);
      s.motion.wavenumber = m.value("wavenumber", s.motion.wavenumber);
      s.motion.law.lambda = m.value("lambda", s.motion.law.lambda);
      s.motion.law.mu = m.value("mu", s.motion.law.mu);
      s.motion.density = m.value("density", s.motion.density);
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene spec: ") + e.what());
  }
}

nlohmann::json spec_to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["width"] = s.width;
  j["height"] = s.height;
  j["focal"] = s.focal;
  j["frames"] = s.frames;
  j["seed"] = s.seed;
  j["particles"] = s.particles;
  j["blob_radius"] = s.blob_radius;
  j["scale_min"] = s.scale_min;
  j["scale_max"] = s.scale_max;
  j["opacity_min"] = s.opacity_min;
  j["opacity_max"] = s.opacity_max;
  j["init_points"] = s.init_points;
  j["init_jitter"] = s.init_jitter;
  j["orbit"] = {{"target", list(s.orbit.target)},
                {"radius", s.orbit.radius},
                {"height", s.orbit.height},
                {"arc_degrees", s.orbit.arc_degrees}};
  j["motion"] = {{"type", kind_name(s.motion.kind)}, {"velocity", list(s.motion.velocity)},
                 {"omega", list(s.motion.omega)},    {"center", list(s.motion.center)},
                 {"gamma", s.motion.gamma},          {"amplitude", s.motion.amplitude},
                 {"wavenumber", s.motion.wavenumber}, {"lambda", s.motion.law.lambda},
                 {"mu", s.motion.law.mu},            {"density", s.motion.density}};
  return j;
}

Motion::Motion(const MotionSpec& spec) : spec_(spec) {
  switch (spec_.kind) {
    case MotionKind::kRigid:
      field_ = std::make_unique<physics::RigidRotation>(spec_.omega, spec_.center, spec_.velocity, spec_.density);
      break;
    case MotionKind::kShear:
      field_ = std::make_unique<physics::ShearFlow>(spec_.gamma, Eigen::Matrix3d::Zero());
      break;
    case MotionKind::kElasticWave:
      field_ = std::make_unique<physics::ElasticWave>(spec_.amplitude, spec_.wavenumber, spec_.law, spec_.density);
      break;
    case MotionKind::kAdvect:
      field_ = std::make_unique<physics::ConstantAdvection>(spec_.velocity, Eigen::Matrix3d::Zero());
      break;
  }
}

Eigen::Quaterniond Motion::rotation(double t) const {
  if (spec_.kind != MotionKind::kRigid || spec_.omega.norm() == 0.0) return Eigen::Quaterniond::Identity();
  return Eigen::Quaterniond(Eigen::AngleAxisd(spec_.omega.norm() * t, spec_.omega.normalized()));
}

namespace {

// Reference (unstrained) x of the elastic wave whose displaced position at t is x.
double wave_reference(const physics::ElasticWave& w, double x, double t) {
  double X = x;
  for (int it = 0; it < 50; ++it) {
    const double u = w.displacement({X, 0, 0, t}).x();
    // d u / d X = strain, bounded by A / c.
    const double du = -w.velocity({X, 0, 0, t}).x() / w.wave_speed();
    const double step = (X + u - x) / (1.0 + du);
    X -= step;
    if (std::abs(step) < 1e-15 * (1.0 + std::abs(X))) break;
  }
  return X;
}

}  // namespace

Eigen::Vector3d Motion::position(const Eigen::Vector3d& x0, double t) const {
  switch (spec_.kind) {
    case MotionKind::kRigid:
      return rotation(t) * (x0 - spec_.center) + spec_.center + spec_.velocity * t;
    case MotionKind::kShear:
      return x0 + Eigen::Vector3d(spec_.gamma * t * x0.y(), 0, 0);
    case MotionKind::kElasticWave: {
      const auto& w = static_cast<const physics::ElasticWave&>(*field_);
      const double X = wave_reference(w, x0.x(), 0.0);
      return {X + w.displacement({X, 0, 0, t}).x(), x0.y(), x0.z()};
    }
    case MotionKind::kAdvect:
      return x0 + spec_.velocity * t;
  }
  return x0;
}

Eigen::Vector3d Motion::inverse(const Eigen::Vector3d& x, double t) const {
  switch (spec_.kind) {
    case MotionKind::kRigid:
      return rotation(t).conjugate() * (x - spec_.center - spec_.velocity * t) + spec_.center;
    case MotionKind::kShear:
      return x - Eigen::Vector3d(spec_.gamma * t * x.y(), 0, 0);
    case MotionKind::kElasticWave: {
      const auto& w = static_cast<const physics::ElasticWave&>(*field_);
      const double X = wave_reference(w, x.x(), t);
      return {X + w.displacement({X, 0, 0, 0.0}).x(), x.y(), x.z()};
    }
    case MotionKind::kAdvect:
      return x - spec_.velocity * t;
  }
  return x;
}

Eigen::Vector3d Motion::velocity(const Eigen::Vector3d& x0, double t) const {
  switch (spec_.kind) {
    case MotionKind::kRigid:
      return spec_.velocity + spec_.omega.cross(rotation(t) * (x0 - spec_.center));
    case MotionKind::kShear:
      return {spec_.gamma * x0.y(), 0, 0};
    case MotionKind::kElasticWave: {
      const auto& w = static_cast<const physics::ElasticWave&>(*field_);
      return w.velocity({wave_reference(w, x0.x(), 0.0), 0, 0, t});
    }
    case MotionKind::kAdvect:
      return spec_.velocity;
  }
  return Eigen::Vector3d::Zero();
}

Eigen::Matrix3d Motion::strain(const Eigen::Vector3d& x0, double t) const {
  Eigen::Matrix3d e = Eigen::Matrix3d::Zero();
  if (spec_.kind == MotionKind::kShear) {
    e(0, 1) = e(1, 0) = 0.5 * spec_.gamma * t;
  } else if (spec_.kind == MotionKind::kElasticWave) {
    const auto& w = static_cast<const physics::ElasticWave&>(*field_);
    e(0, 0) = -w.velocity({wave_reference(w, x0.x(), 0.0), 0, 0, t}).x() / w.wave_speed();
  }
  return e;
}

Eigen::Matrix3d Motion::stress(const Eigen::Vector3d& x0, double t) const {
  if (spec_.kind == MotionKind::kElasticWave) return physics::oracle_stress(spec_.law, strain(x0, t)).stress;
  const Eigen::Vector3d x = position(x0, t);
  return field_->stress({x.x(), x.y(), x.z(), t});
}

scene::GaussianCloud posed_cloud(const SyntheticScene& s, double t) {
  const Motion motion(s.spec.motion);
  scene::GaussianCloud out(0);
  const Eigen::Quaterniond r = motion.rotation(t);
  const Eigen::Vector4d qr(r.w(), r.x(), r.y(), r.z());
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    scene::GaussianParticle p = s.cloud.particle(i);
    p.position = motion.position(p.position, t);
    p.rotation = geometry::multiply(qr, p.rotation);
    out.add(p);
  }
  return out;
}

Image render_cloud(const scene::GaussianCloud& cloud, const render::Camera& camera, DepthMap* depth) {
  ad::Tape tape;
  const ad::Var means = tape.constant(cloud.means().value);
  const render::Projection proj = render::project(camera, means, tape.constant(cloud.quats().value),
                                                  tape.constant(cloud.log_scales().value));
  const ad::Tensor dirs(cloud.means().value.shape(), 0.0);
  const ad::Var colors = render::sh_to_color(tape.constant(cloud.sh().value), cloud.sh_degree(), dirs);
  const ad::Var alpha = ad::sigmoid(tape.constant(cloud.opacity().value));
  const render::RenderOutput out = render::rasterize(camera, proj, colors, alpha, cloud.ids());
  Image img(camera.width, camera.height);
  std::copy(out.color.value().data(), out.color.value().data() + img.rgb.size(), img.rgb.begin());
  if (depth) {
    *depth = DepthMap(camera.width, camera.height);
    for (std::size_t i = 0; i < depth->depth.size(); ++i) {
      const double cov = out.coverage[i];
      depth->depth[i] = cov >= 0.5 ? out.depth.value()[i] / cov : 0.0;
    }
  }
  return img;
}

SyntheticScene generate(const SceneSpec& spec) {
  validate(spec);
  SyntheticScene s;
  s.spec = spec;
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Particles in a ball around the orbit target.
  for (std::size_t i = 0; i < spec.particles; ++i) {
    scene::GaussianParticle p;
    Eigen::Vector3d d;
    do {
      d = Eigen::Vector3d(2 * u01(rng) - 1, 2 * u01(rng) - 1, 2 * u01(rng) - 1);
    } while (d.squaredNorm() > 1.0);
    p.position = spec.orbit.target + spec.blob_radius * d;
    p.rotation = Eigen::Vector4d(normal(rng), normal(rng), normal(rng), normal(rng)).normalized();
    for (int k = 0; k < 3; ++k) p.log_scale[k] = std::log(spec.scale_min) + u01(rng) * std::log(spec.scale_max / spec.scale_min);
    p.sh.resize(3);
    for (int c = 0; c < 3; ++c) p.sh[static_cast<std::size_t>(c)] = (0.1 + 0.85 * u01(rng) - 0.5) / kShC0;
    const double o = spec.opacity_min + u01(rng) * (spec.opacity_max - spec.opacity_min);
    p.opacity_logit = std::log(o / (1 - o));
    s.cloud.add(p);
  }

  const Motion motion(spec.motion);
  const int F = spec.frames;
  for (int f = 0; f < F; ++f) {
    const double t = static_cast<double>(f) / (F - 1);
    s.times.push_back(t);
    const double phi = spec.orbit.arc_degrees * std::numbers::pi / 180.0 * (t - 0.5);
    const Eigen::Vector3d eye =
        spec.orbit.target + Eigen::Vector3d(spec.orbit.radius * std::sin(phi), spec.orbit.height, -spec.orbit.radius * std::cos(phi));
    s.cameras.push_back(render::Camera::look_at(eye, spec.orbit.target, {0, -1, 0}, spec.width, spec.height, spec.focal));
  }
  for (int f = 0; f < F; ++f) {
    DepthMap d;
    s.frames.push_back(render_cloud(posed_cloud(s, s.times[f]), s.cameras[f], &d));
    s.depths.push_back(std::move(d));
  }

  const int W = spec.width, H = spec.height;
  for (int f = 0; f + 1 < F; ++f) {
    const render::Camera& ct = s.cameras[f];
    const render::Camera& cn = s.cameras[f + 1];
    const double t = s.times[f], tn = s.times[f + 1];
    flow::FlowField back(W, H), fwd(W, H), mot(W, H);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const Eigen::Vector2d p(x, y);
        if (const double dn = s.depths[f + 1].at(x, y); dn > 0) {
          const Eigen::Vector3d before = motion.position(motion.inverse(world_point(cn, p, dn), tn), t);
          const Eigen::Vector3d c = ct.to_camera(before);
          if (c.z() > 0) back.set(x, y, ct.project(c) - p);
        }
        if (const double d = s.depths[f].at(x, y); d > 0) {
          const Eigen::Vector3d after = motion.position(motion.inverse(world_point(ct, p, d), t), tn);
          const Eigen::Vector3d cnext = cn.to_camera(after);
          const Eigen::Vector3d cheld = ct.to_camera(after);
          if (cnext.z() > 0) fwd.set(x, y, cn.project(cnext) - p);
          if (cheld.z() > 0) mot.set(x, y, ct.project(cheld) - p);
        }
      }
    }
    s.backward.push_back(std::move(back));
    s.forward.push_back(std::move(fwd));
    s.motion.push_back(std::move(mot));
  }
  for (int f = 0; f + 1 < F; ++f) s.masks.push_back(flow::motion_mask(s.motion[f], kMotionThreshold));
  {
    // Last frame: motion since the previous frame, camera held at the last frame.
    const int f = F - 1;
    const render::Camera& c = s.cameras[f];
    Mask m(W, H);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double d = s.depths[f].at(x, y);
        if (!(d > 0)) continue;
        const Eigen::Vector3d now = world_point(c, {x, y}, d);
        const Eigen::Vector3d prev = motion.position(motion.inverse(now, s.times[f]), s.times[f - 1]);
        const Eigen::Vector3d cp = c.to_camera(prev);
        m.set(x, y, cp.z() > 0 && (c.project(c.to_camera(now)) - c.project(cp)).norm() > kMotionThreshold);
      }
    }
    s.masks.push_back(std::move(m));
  }

  // Bounds cover every particle over the sequence with a margin.
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(1e300), hi = Eigen::Vector3d::Constant(-1e300);
  for (int k = 0; k <= 4 * (F - 1); ++k) {
    const double t = static_cast<double>(k) / (4 * (F - 1));
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
      const Eigen::Vector3d x = motion.position(s.cloud.particle(i).position, t);
      lo = lo.cwiseMin(x);
      hi = hi.cwiseMax(x);
    }
  }
  const double margin = 3.0 * spec.scale_max + 0.1 * spec.blob_radius;
  s.bounds.lo = lo.array() - margin;
  s.bounds.hi = hi.array() + margin;
  s.bounds.t0 = 0.0;
  s.bounds.t1 = 1.0;

  std::uniform_int_distribution<std::size_t> pick(0, s.cloud.size() - 1);
  for (std::size_t i = 0; i < spec.init_points; ++i) {
    const std::size_t k = spec.init_points <= s.cloud.size() ? i * s.cloud.size() / spec.init_points : pick(rng);
    s.init_points.push_back(s.cloud.particle(k).position +
                            spec.init_jitter * Eigen::Vector3d(normal(rng), normal(rng), normal(rng)));
  }
  return s;
}

std::vector<ParticleTruth> analytic_truth(const SyntheticScene& s, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("analytic_truth: t outside [0,1]");
  const Motion motion(s.spec.motion);
  std::vector<ParticleTruth> out;
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    const Eigen::Vector3d x0 = s.cloud.particle(i).position;
    out.push_back({motion.position(x0, t), motion.velocity(x0, t), motion.stress(x0, t), motion.strain(x0, t)});
  }
  return out;
}

namespace {
std::string numbered(const char* prefix, int f, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.%s", prefix, f, ext);
  return buf;
}
}  // namespace

std::string frame_name(int f) { return numbered("frame", f, "ppm"); }
std::string depth_name(int f) { return numbered("depth", f, "dep"); }
std::string mask_name(int f) { return numbered("mask", f, "pgm"); }
std::string backward_name(int f) { return numbered("flow_b", f, "flo"); }
std::string forward_name(int f) { return numbered("flow_f", f, "flo"); }
std::string motion_name(int f) { return numbered("motion", f, "flo"); }

void write_scene(const SyntheticScene& s, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());
  const int F = static_cast<int>(s.frames.size());
  for (int f = 0; f < F; ++f) {
    io::write_ppm(dir / frame_name(f), s.frames[f]);
    io::write_depth(dir / depth_name(f), s.depths[f]);
    io::write_pgm(dir / mask_name(f), s.masks[f]);
  }
  for (int f = 0; f + 1 < F; ++f) {
    io::write_flow(dir / backward_name(f + 1), s.backward[f]);
    io::write_flow(dir / forward_name(f), s.forward[f]);
    io::write_flow(dir / motion_name(f), s.motion[f]);
  }
  nlohmann::json cams = nlohmann::json::array();
  for (const auto& c : s.cameras) cams.push_back(io::camera_to_json(c));
  io::write_json(dir / "cameras.json", cams);

  nlohmann::json j;
  j["spec"] = spec_to_json(s.spec);
  j["times"] = s.times;
  j["bounds"] = {{"lo", list(s.bounds.lo)}, {"hi", list(s.bounds.hi)}, {"t0", s.bounds.t0}, {"t1", s.bounds.t1}};
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : s.init_points) pts.push_back(list(p));
  j["init_points"] = pts;
  nlohmann::json parts = nlohmann::json::array();
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    const scene::GaussianParticle p = s.cloud.particle(i);
    parts.push_back({{"position", list(p.position)},
                     {"rotation", {p.rotation[0], p.rotation[1], p.rotation[2], p.rotation[3]}},
                     {"log_scale", list(p.log_scale)},
                     {"sh", p.sh},
                     {"opacity_logit", p.opacity_logit},
                     {"id", p.id}});
  }
  j["particles"] = parts;
  io::write_json(dir / "scene.json", j);
}

SyntheticScene read_scene(const std::filesystem::path& dir) {
  const nlohmann::json j = io::read_json(dir / "scene.json");
  SyntheticScene s;
  try {
    s.spec = spec_from_json(j.at("spec"));
    s.times = j.at("times").get<std::vector<double>>();
    const auto& b = j.at("bounds");
    s.bounds.lo = vec3(b, "lo", {});
    s.bounds.hi = vec3(b, "hi", {});
    s.bounds.t0 = b.at("t0").get<double>();
    s.bounds.t1 = b.at("t1").get<double>();
    for (const auto& p : j.at("init_points")) {
      const auto v = p.get<std::vector<double>>();
      s.init_points.emplace_back(v.at(0), v.at(1), v.at(2));
    }
    for (const auto& p : j.at("particles")) {
      scene::GaussianParticle g;
      g.position = vec3(p, "position", {});
      const auto r = p.at("rotation").get<std::vector<double>>();
      g.rotation = Eigen::Vector4d(r.at(0), r.at(1), r.at(2), r.at(3));
      g.log_scale = vec3(p, "log_scale", {});
      g.sh = p.at("sh").get<std::vector<double>>();
      g.opacity_logit = p.at("opacity_logit").get<double>();
      g.id = p.at("id").get<std::int64_t>();
      s.cloud.add(g);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/scene.json: " + e.what());
  }
  for (const auto& c : io::read_json(dir / "cameras.json")) s.cameras.push_back(io::camera_from_json(c));
  const int F = static_cast<int>(s.times.size());
  if (F < 2 || static_cast<int>(s.cameras.size()) != F) throw FormatError("scene frame count mismatch");
  for (int f = 0; f < F; ++f) {
    s.frames.push_back(io::read_ppm(dir / frame_name(f)));
    s.depths.push_back(io::read_depth(dir / depth_name(f)));
    s.masks.push_back(io::read_pgm(dir / mask_name(f)));
  }
  for (int f = 0; f + 1 < F; ++f) {
    s.backward.push_back(io::read_flow(dir / backward_name(f + 1)));
    s.forward.push_back(io::read_flow(dir / forward_name(f)));
    s.motion.push_back(io::read_flow(dir / motion_name(f)));
  }
  return s;
}

}  // namespace pidg::scenegen
