#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "pidg/common/error.hpp"
#include "pidg/train/trainer.hpp"

using namespace pidg;

namespace {

scenegen::SceneSpec tiny_spec() {
  scenegen::SceneSpec s;
  s.width = 32;
  s.height = 32;
  s.focal = 36;
  s.frames = 4;
  s.particles = 30;
  s.init_points = 30;
  s.motion.kind = scenegen::MotionKind::kRigid;
  s.motion.velocity = {0.4, 0, 0};
  return s;
}

train::RunConfig tiny_config(const std::filesystem::path& out, int iterations) {
  train::RunConfig c;
  c.out = out.string();
  c.iterations = iterations;
  c.log_every = 1;
  c.densify_from = 5;
  c.densify_every = 5;
  c.max_gaussians = 60;
  c.cmr_samples = 16;
  c.cmr_block = 8;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path scratch(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("trainer: config validation lists every problem") {
  train::RunConfig c;
  c.iterations = 0;
  c.top_k = 0;
  c.weights.cmr = -1;
  const auto errors = train::config_errors(c);
  CHECK(errors.size() == 3);
  try {
    train::validate(c);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iterations") != std::string::npos);
    CHECK(msg.find("top_k") != std::string::npos);
    CHECK(msg.find("cmr") != std::string::npos);
  }
  CHECK_THROWS_AS(train::config_from_json({{"iterations", 5}, {"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(train::config_from_json({{"ablation", "no-everything"}}), ConfigError);
  CHECK_THROWS_AS(train::config_from_json({{"weights", {{"lpfm", "high"}}}}), ConfigError);
}

TEST_CASE("trainer: config json round trip and ablations") {
  train::RunConfig c;
  c.seed = 7;
  c.iterations = 123;
  c.weights.lpfm = 0.02;
  c.deformation.decoder_width = 17;
  c.ablation = train::Ablation::kNoLpfm;
  const auto back = train::config_from_json(train::config_to_json(c));
  CHECK(train::config_to_json(back) == train::config_to_json(c));
  CHECK(train::effective_weights(back).lpfm == 0.0);
  CHECK(train::effective_weights(back).cmr == doctest::Approx(0.1));
  c.ablation = train::Ablation::kNoPhysics;
  CHECK(train::effective_weights(c).cmr == 0.0);
  CHECK(train::effective_weights(c).lpfm == 0.0);
  CHECK(train::config_from_json(nlohmann::json::object()).seed == 42);
}

TEST_CASE("trainer: scene size must match the config") {
  auto c = tiny_config(scratch("pidg_tr_size"), 1);
  c.width = 64;
  CHECK_THROWS_AS(train::Trainer(c, scenegen::generate(tiny_spec())), ConfigError);
}

TEST_CASE("trainer: one iteration writes one row and a loadable checkpoint") {
  const auto dir = scratch("pidg_tr_one");
  train::Trainer t(tiny_config(dir, 1), scenegen::generate(tiny_spec()));
  train::run(t);
  std::ifstream csv(dir / "metrics.csv");
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == train::kMetricsHeader);
  CHECK(row.rfind("1,", 0) == 0);
  CHECK_FALSE(std::getline(csv, extra));
  REQUIRE(std::filesystem::exists(dir / "final.bin"));

  auto loaded = train::Trainer::load(dir / "final.bin", scenegen::generate(tiny_spec()));
  loaded->save(dir / "again.bin");
  CHECK(slurp(dir / "final.bin") == slurp(dir / "again.bin"));
  CHECK(loaded->iteration() == 1);
}

TEST_CASE("trainer: checkpoints reject other versions") {
  const auto dir = scratch("pidg_tr_version");
  train::Trainer t(tiny_config(dir, 1), scenegen::generate(tiny_spec()));
  t.save(dir / "a.bin");
  std::string bytes = slurp(dir / "a.bin");
  bytes[8] = 9;  // version field follows the magic
  std::ofstream(dir / "b.bin", std::ios::binary) << bytes;
  try {
    train::Trainer::load(dir / "b.bin", scenegen::generate(tiny_spec()));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("version 9") != std::string::npos);
  }
  bytes[0] = 'X';
  std::ofstream(dir / "c.bin", std::ios::binary) << bytes;
  CHECK_THROWS_AS(train::Trainer::load(dir / "c.bin", scenegen::generate(tiny_spec())), FormatError);
}

TEST_CASE("trainer: seeded runs repeat and resume continues the metric stream") {
  const auto a = scratch("pidg_tr_a"), b = scratch("pidg_tr_b");
  auto ca = tiny_config(a, 24);
  ca.checkpoint_every = 12;
  ca.stage_fraction = 0.5;
  {
    train::Trainer t(ca, scenegen::generate(tiny_spec()));
    train::run(t);
  }
  auto cb = ca;
  cb.out = b.string();
  {
    train::Trainer t(cb, scenegen::generate(tiny_spec()));
    train::run(t);
  }
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "final.bin") != "");

  // Resume the second run from its midpoint checkpoint; rows after 12 are redone.
  auto resumed = train::Trainer::load(b / "ckpt_12.bin", scenegen::generate(tiny_spec()));
  CHECK(resumed->iteration() == 12);
  train::run(*resumed);
  const std::string full = slurp(a / "metrics.csv");
  CHECK(slurp(b / "metrics.csv") == full);
  std::istringstream lines(full);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) ++count;
  CHECK(count == 25);
}

TEST_CASE("trainer: stage two freezes static particles") {
  const auto dir = scratch("pidg_tr_stage");
  auto c = tiny_config(dir, 20);
  c.stage_fraction = 0.5;
  c.densify_from = 1000;
  train::Trainer t(c, scenegen::generate(tiny_spec()));
  while (t.iteration() < 10) t.step();
  REQUIRE(t.dynamic_stage());
  const auto flags = t.cloud().dynamic();
  std::size_t statics = 0;
  for (bool f : flags) statics += !f;
  // Force a mix so both branches are exercised.
  std::vector<bool> mixed = flags;
  if (statics == 0) mixed[0] = false;
  if (statics == flags.size()) mixed[0] = true;
  t.cloud().set_dynamic(mixed);
  t.optimizer().set_row_mask(&t.cloud().means(), mixed);
  t.optimizer().set_row_mask(&t.cloud().quats(), mixed);
  t.optimizer().set_row_mask(&t.cloud().log_scales(), mixed);

  const ad::Tensor means = t.cloud().means().value, quats = t.cloud().quats().value,
                   scales = t.cloud().log_scales().value, sh = t.cloud().sh().value;
  const std::vector<Eigen::Vector3d> before = t.positions(0.3);
  for (int k = 0; k < 5; ++k) t.step();
  const std::vector<Eigen::Vector3d> after = t.positions(0.7);
  bool sh_changed = false;
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    for (std::size_t c3 = 0; c3 < 3; ++c3) sh_changed |= sh.at(i, c3) != t.cloud().sh().value.at(i, c3);
    if (mixed[i]) continue;
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(t.cloud().means().value.at(i, k) == means.at(i, k));
      CHECK(t.cloud().log_scales().value.at(i, k) == scales.at(i, k));
    }
    for (std::size_t k = 0; k < 4; ++k) CHECK(t.cloud().quats().value.at(i, k) == quats.at(i, k));
    // and they do not deform
    CHECK(before[i] == after[i]);
  }
  CHECK(sh_changed);
}

TEST_CASE("trainer: identity deformation fits a static frame") {
  scenegen::SceneSpec s = tiny_spec();
  s.motion.velocity.setZero();
  s.orbit.arc_degrees = 0;
  s.frames = 2;
  auto c = tiny_config(scratch("pidg_tr_static"), 200);
  c.identity_deformation = true;
  c.weights.cmr = 0;
  c.weights.lpfm = 0;
  c.densify_from = 100000;
  c.init_opacity = 0.5;
  train::Trainer t(c, scenegen::generate(s));
  std::vector<double> window;
  std::vector<double> means;
  for (int i = 0; i < 200; ++i) {
    window.push_back(t.step().loss_renders);
    if (window.size() == 40) {
      double m = 0;
      for (double v : window) m += v;
      means.push_back(m / 40);
      window.clear();
    }
  }
  for (std::size_t i = 1; i < means.size(); ++i) CHECK(means[i] < means[i - 1]);
  // Identity deformation renders the same image at any time.
  const auto a = t.render(t.scene().cameras[0], 0.1), b = t.render(t.scene().cameras[0], 0.9);
  CHECK(a.rgb == b.rgb);
  CHECK_THROWS_AS(t.render(t.scene().cameras[0], 1.5), DomainError);
}

TEST_CASE("trainer: injected ground truth reaches the PSNR cap") {
  scenegen::SceneSpec s = tiny_spec();
  s.motion.velocity.setZero();
  const auto scene = scenegen::generate(s);
  auto c = tiny_config(scratch("pidg_tr_gt"), 1);
  c.identity_deformation = true;
  train::Trainer t(c, scene);
  t.cloud() = scene.cloud;
  t.cloud().set_dynamic(std::vector<bool>(scene.cloud.size(), true));
  const train::Evaluation e = t.evaluate();
  CHECK(e.psnr == train::kPsnrCap);
  CHECK(e.ssim == doctest::Approx(1.0).epsilon(1e-12));
  // Zero-initialized material head: no residual anywhere.
  CHECK(e.mean_residual == 0.0);
}

TEST_CASE("trainer: non-finite state aborts the step") {
  train::Trainer t(tiny_config(scratch("pidg_tr_nan"), 5), scenegen::generate(tiny_spec()));
  t.cloud().sh().value.at(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.step(), NonFiniteError);
}
