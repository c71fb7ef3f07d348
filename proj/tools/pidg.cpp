#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "pidg/common/error.hpp"
#include "pidg/io/formats.hpp"
#include "pidg/scenegen/scenegen.hpp"
#include "pidg/train/trainer.hpp"

namespace fs = std::filesystem;
using namespace pidg;

namespace {

void draw_line(Image& img, Eigen::Vector2d a, Eigen::Vector2d b, const double color[3]) {
  const int steps = static_cast<int>(std::ceil((b - a).norm() * 2)) + 1;
  for (int s = 0; s <= steps; ++s) {
    const Eigen::Vector2d p = a + (b - a) * (static_cast<double>(s) / steps);
    const int x = static_cast<int>(std::lround(p.x())), y = static_cast<int>(std::lround(p.y()));
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
    for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[c];
  }
}

// Particle velocities drawn as arrows over the rendered image.
Image quiver(Image base, const train::Trainer::ScreenMotion& m, double dt) {
  constexpr double kArrow[3] = {1.0, 0.1, 0.1};
  constexpr double kTail[3] = {1.0, 1.0, 0.2};
  for (std::size_t i = 0; i < m.visible.size(); ++i) {
    if (!m.visible[i]) continue;
    const Eigen::Vector2d p(m.centers.at(i, 0), m.centers.at(i, 1));
    const Eigen::Vector2d v(m.velocity.at(i, 0), m.velocity.at(i, 1));
    const Eigen::Vector2d q = p + 4.0 * dt * v;
    draw_line(base, p, q, kArrow);
    const int x = static_cast<int>(std::lround(p.x())), y = static_cast<int>(std::lround(p.y()));
    if (x >= 0 && y >= 0 && x < base.width && y < base.height)
      for (int c = 0; c < 3; ++c) base.at(x, y, c) = kTail[c];
  }
  return base;
}

std::string scene_dir_for(const train::RunConfig& c, const std::string& override_dir) {
  const std::string dir = override_dir.empty() ? c.scene : override_dir;
  if (dir.empty()) throw ConfigError("no scene directory (set \"scene\" in the config or pass --scene)");
  return dir;
}

int cmd_synth(const std::string& config, const std::string& out, const std::optional<std::uint64_t>& seed) {
  scenegen::SceneSpec spec = scenegen::spec_from_json(io::read_json(config));
  if (seed) spec.seed = *seed;
  const auto scene = scenegen::generate(spec);
  scenegen::write_scene(scene, out);
  std::cerr << "wrote " << scene.frames.size() << " frames to " << out << "\n";
  return 0;
}

struct Loaded {
  std::unique_ptr<train::Trainer> trainer;
};

Loaded load_checkpoint(const std::string& path, const std::string& scene_override) {
  io::ByteReader peek = io::ByteReader::load(path);
  char magic[8];
  peek.bytes(magic, 8);
  if (std::string(magic, 8) != "PIDGCKPT") throw FormatError(path + " is not a checkpoint");
  peek.u32();
  const train::RunConfig c = train::config_from_json(nlohmann::json::parse(peek.str()));
  return {train::Trainer::load(path, scenegen::read_scene(scene_dir_for(c, scene_override)))};
}

int cmd_train(const std::string& config_path, const std::string& out, const std::optional<std::uint64_t>& seed,
              const std::optional<int>& iters, const std::optional<std::string>& ablate, const std::string& resume,
              const std::string& scene_override) {
  std::unique_ptr<train::Trainer> trainer;
  if (!resume.empty()) {
    // The checkpoint carries its own config; only the scene may be redirected.
    trainer = load_checkpoint(resume, scene_override).trainer;
  } else {
    if (config_path.empty()) throw ConfigError("train needs --config or --resume");
    nlohmann::json j = io::read_json(config_path);
    if (!out.empty()) j["out"] = out;
    if (seed) j["seed"] = *seed;
    if (iters) j["iterations"] = *iters;
    if (ablate) j["ablation"] = *ablate;
    if (!scene_override.empty()) j["scene"] = scene_override;
    const train::RunConfig c = train::config_from_json(j);
    const std::string dir = scene_dir_for(c, "");
    if (!fs::exists(fs::path(dir) / "scene.json")) throw ConfigError("scene directory " + dir + " has no scene.json");
    trainer = std::make_unique<train::Trainer>(c, scenegen::read_scene(dir));
  }
  train::run(*trainer, &std::cerr);
  return 0;
}

int cmd_render(const std::string& ckpt, const std::string& scene_override, double t, const std::optional<int>& camera,
               const std::string& pose, const std::string& out, const std::vector<std::string>& emit) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("--t " + std::to_string(t) + " outside [0,1]");
  Loaded l = load_checkpoint(ckpt, scene_override);
  train::Trainer& tr = *l.trainer;
  const auto& scene = tr.scene();
  render::Camera cam;
  if (!pose.empty()) {
    cam = io::camera_from_json(io::read_json(pose));
  } else {
    const int idx = camera.value_or(0);
    if (idx < 0 || idx >= static_cast<int>(scene.cameras.size()))
      throw ConfigError("--camera " + std::to_string(idx) + " outside [0, " + std::to_string(scene.cameras.size()) + ")");
    cam = scene.cameras[static_cast<std::size_t>(idx)];
  }
  fs::create_directories(out);
  const fs::path dir(out);
  auto wants = [&](const std::string& k) { return std::find(emit.begin(), emit.end(), k) != emit.end(); };
  DepthMap depth;
  const Image img = tr.render(cam, t, &depth);
  if (wants("color")) io::write_ppm(dir / "color.ppm", img);
  if (wants("depth")) io::write_depth(dir / "depth.dep", depth);
  const double dt = 1.0 / static_cast<double>(scene.frames.size() - 1);
  if (wants("flow")) {
    const double t_next = t + dt <= 1.0 ? t + dt : t;
    if (t_next == t) throw DomainError("--emit flow needs t + 1/(frames-1) <= 1");
    const auto flows = tr.predict_flows(cam, t, t_next);
    io::write_flow(dir / "flow_g.flo", flows.gaussian);
    io::write_flow(dir / "flow_v.flo", flows.velocity);
  }
  if (wants("quiver")) io::write_ppm(dir / "quiver.ppm", quiver(img, tr.screen_motion(cam, t), dt));
  if (pose.empty()) {
    const auto idx = static_cast<std::size_t>(camera.value_or(0));
    if (std::abs(scene.times[idx] - t) < 1e-12) {
      std::cerr << "psnr " << train::psnr(img, scene.frames[idx]) << " dB vs frame " << idx << "\n";
    }
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& scene_override, const std::string& out) {
  Loaded l = load_checkpoint(ckpt, scene_override);
  const train::Evaluation e = l.trainer->evaluate();
  const nlohmann::json j = {{"psnr", e.psnr},
                            {"ssim", e.ssim},
                            {"flow_epe", e.flow_epe},
                            {"flow_pixels", e.flow_pixels},
                            {"mean_residual", e.mean_residual},
                            {"iteration", l.trainer->iteration()},
                            {"num_gaussians", l.trainer->cloud().size()}};
  if (!out.empty()) io::write_json(out, j);
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Physics-informed dynamic Gaussian reconstruction on synthetic scenes"};
  app.require_subcommand(1);

  std::string config, out, scene_dir, resume, checkpoint, pose;
  std::optional<std::uint64_t> seed;
  std::optional<int> iters, camera;
  std::optional<std::string> ablate;
  double t = 0.0;
  std::vector<std::string> emit{"color"};

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene");
  synth->add_option("--config", config, "Scene spec JSON")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--seed", seed, "Override the spec seed");

  auto* trn = app.add_subcommand("train", "Train on a scene");
  trn->add_option("--config", config, "Run config JSON")->check(CLI::ExistingFile);
  trn->add_option("--out", out, "Output directory");
  trn->add_option("--seed", seed, "Random seed (default 42)");
  trn->add_option("--iters", iters, "Iteration budget");
  trn->add_option("--ablate", ablate, "none, no-lpfm or no-physics")
      ->check(CLI::IsMember({"none", "no-lpfm", "no-physics"}));
  trn->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  trn->add_option("--scene", scene_dir, "Scene directory (overrides the config)");

  auto* rnd = app.add_subcommand("render", "Render a checkpoint");
  rnd->add_option("--checkpoint,--config", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  rnd->add_option("--t", t, "Time in [0,1]")->required();
  auto* cam_opt = rnd->add_option("--camera", camera, "Training camera index");
  rnd->add_option("--pose", pose, "Camera JSON")->check(CLI::ExistingFile)->excludes(cam_opt);
  rnd->add_option("--out", out, "Output directory")->required();
  rnd->add_option("--emit", emit, "Any of color, depth, flow, quiver")
      ->check(CLI::IsMember({"color", "depth", "flow", "quiver"}))
      ->delimiter(',');
  rnd->add_option("--scene", scene_dir, "Scene directory (overrides the checkpoint)");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against its scene");
  ev->add_option("--checkpoint,--config", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--scene", scene_dir, "Scene directory (overrides the checkpoint)");
  ev->add_option("--out", out, "Also write the metrics JSON here");

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth->parsed()) return cmd_synth(config, out, seed);
    if (trn->parsed()) return cmd_train(config, out, seed, iters, ablate, resume, scene_dir);
    if (rnd->parsed()) return cmd_render(checkpoint, scene_dir, t, camera, pose, out, emit);
    if (ev->parsed()) return cmd_eval(checkpoint, scene_dir, out);
  } catch (const pidg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
