#include <doctest.h>

#include <random>

#include "pidg/ad/coord_jacobian.hpp"
#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/material/material_field.hpp"
#include "pidg/scene/gaussian_cloud.hpp"
#include "support/fd.hpp"

using namespace pidg;
using material::MaterialConfig;
using material::MaterialField;

namespace {

MaterialConfig small_config() {
  MaterialConfig c;
  c.plane_levels = 3;
  c.plane_base = 4;
  c.plane_max = 16;
  c.embedding_dim = 8;
  c.hidden_width = 16;
  return c;
}

void randomize_output(MaterialField& f, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (ad::Parameter* p : f.network_parameters()) p->value = test::random_tensor(p->value.shape(), rng, -0.5, 0.5);
}

ad::Tensor point_row(const std::array<double, 4>& p) { return ad::Tensor({1, 4}, {p[0], p[1], p[2], p[3]}); }

}  // namespace

TEST_CASE("fourier encoding") {
  const auto t0 = material::fourier_encode(0.0, 2);
  REQUIRE(t0.size() == 4);
  CHECK(t0[0] == 0.0);
  CHECK(t0[1] == 1.0);
  CHECK(t0[2] == 0.0);
  CHECK(t0[3] == 1.0);
  for (double t : {0.1, 0.37, 0.9}) {
    for (double v : material::fourier_encode(t, 6)) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
  }
  // Second frequency is 2 pi.
  CHECK(material::fourier_encode(0.25, 2)[2] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("material feature layout") {
  MaterialField f(MaterialConfig{}, {}, 4, 1);
  CHECK(f.feature_dim() == 82);
  ad::Tape tape;
  ad::Binder bind(tape);
  const ad::Tensor pts({2, 4}, {0.3, 0.4, 0.5, 0.6, 0.3, 0.4, 0.5, 0.6});
  const std::int64_t ids[] = {1, 3};
  const ad::Tensor feat = f.featurize(bind, tape.constant(pts), ids).value();
  REQUIRE(feat.cols() == 82);
  bool embedding_differs = false;
  for (std::size_t c = 0; c < 82; ++c) {
    if (c < 82 - 64) {
      CHECK(feat.at(0, c) == feat.at(1, c));
    } else if (feat.at(0, c) != feat.at(1, c)) {
      embedding_differs = true;
    }
  }
  CHECK(embedding_differs);
  const std::int64_t bad[] = {1, 4};
  CHECK_THROWS_AS(f.featurize(bind, tape.constant(pts), bad), DomainError);
  const std::int64_t negative[] = {-1, 0};
  CHECK_THROWS_AS(f.featurize(bind, tape.constant(pts), negative), DomainError);
}

TEST_CASE("zero-initialized material head predicts rest") {
  MaterialField f(small_config(), {}, 5, 2);
  ad::Tape tape;
  ad::Binder bind(tape);
  std::mt19937_64 rng(3);
  const ad::Tensor pts = test::random_tensor({5, 4}, rng, 0.0, 1.0);
  const std::int64_t ids[] = {0, 1, 2, 3, 4};
  const auto out = f.predict_at(bind, pts, ids);
  for (double v : out.velocity.value().values()) CHECK(v == 0.0);
  for (double v : out.stress.value().values()) CHECK(v == 0.0);
}

TEST_CASE("stress packing is symmetric") {
  const double s[] = {1, 2, 3, 0.5, 0, 0};
  Eigen::Matrix3d expect;
  expect << 1, 0.5, 0, 0.5, 2, 0, 0, 0, 3;
  CHECK(physics::stress_to_matrix(s) == expect);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 100; ++trial) {
    double p[6];
    for (double& v : p) v = u(rng);
    const Eigen::Matrix3d m = physics::stress_to_matrix(p);
    CHECK((m - m.transpose()).cwiseAbs().maxCoeff() == 0.0);
    const auto back = physics::matrix_to_stress(m);
    for (int i = 0; i < 6; ++i) CHECK(back[i] == p[i]);
  }
}

TEST_CASE("material head weight gradients match finite differences") {
  MaterialField f(small_config(), {}, 3, 5);
  randomize_output(f, 6);
  std::mt19937_64 rng(7);
  const ad::Tensor pts = test::random_tensor({3, 4}, rng, 0.05, 0.95);
  const std::int64_t ids[] = {0, 2, 1};
  auto loss = [&](ad::Binder& bind) {
    const auto out = f.predict_at(bind, pts, ids);
    return ad::sum(ad::square(out.velocity));
  };
  std::vector<ad::Parameter*> params = f.network_parameters();
  params.push_back(&f.embedding());
  params.push_back(f.plane_parameters()[3]);
  for (ad::Parameter* p : params) {
    p->zero_grad();
    {
      ad::Tape tape;
      ad::Binder bind(tape);
      tape.backward(loss(bind));
    }
    const ad::Tensor saved = p->value;
    const ad::Tensor fd = test::central_difference(
        [&](const ad::Tensor& w) {
          p->value = w;
          ad::Tape tape;
          ad::Binder bind(tape);
          return loss(bind).value().item();
        },
        saved, 1e-6);
    p->value = saved;
    CHECK_MESSAGE(test::max_relative_error(p->grad, fd, 1e-2) < 1e-5, p->name);
  }
}

TEST_CASE("material velocity coordinate jacobian") {
  MaterialField f(small_config(), {}, 2, 8);
  randomize_output(f, 9);
  const std::int64_t ids[] = {1};
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  for (int trial = 0; trial < 20; ++trial) {
    const std::array<double, 4> p{u(rng), u(rng), u(rng), u(rng)};
    const Eigen::MatrixXd rev = ad::coord_jacobian(
        [&](ad::Tape& tape, const ad::Var& x) {
          ad::Binder bind(tape);
          return f.predict(bind, f.featurize(bind, x, ids)).velocity;
        },
        p);
    // Central differences stay inside one interpolation cell for a small step.
    const double h = 1e-7;
    Eigen::MatrixXd fd(3, 4);
    for (int k = 0; k < 4; ++k) {
      auto shifted = p;
      shifted[k] += h;
      auto back = p;
      back[k] -= h;
      ad::Tape tape;
      ad::Binder bind(tape);
      const ad::Tensor vp = f.predict_at(bind, point_row(shifted), ids).velocity.value();
      const ad::Tensor vm = f.predict_at(bind, point_row(back), ids).velocity.value();
      for (int j = 0; j < 3; ++j) fd(j, k) = (vp[j] - vm[j]) / (2 * h);
    }
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 4; ++k) CHECK(test::relative_error(rev(j, k), fd(j, k), 1e-2) < 1e-5);

    ad::Tape tape;
    ad::Binder bind(tape);
    const physics::FieldJet jet = f.evaluate(bind, point_row(p), ids);
    for (int j = 0; j < 3; ++j) {
      CHECK(jet.velocity.value.value()[j] == doctest::Approx(f.predict_at(bind, point_row(p), ids).velocity.value()[j]).epsilon(1e-14));
      for (std::size_t k = 0; k < 4; ++k) CHECK(std::abs(jet.velocity.tangent(k).value()[j] - rev(j, k)) < 1e-10);
    }
  }
}

TEST_CASE("jets scale with physical bounds") {
  material::SpaceTimeBounds b;
  b.lo = {-1, -2, 0};
  b.hi = {1, 2, 0.5};
  b.t0 = 0;
  b.t1 = 4;
  MaterialField unit(small_config(), {}, 1, 11), scaled(small_config(), b, 1, 11);
  randomize_output(unit, 12);
  randomize_output(scaled, 12);
  const std::int64_t ids[] = {0};
  const Eigen::Vector4d phys(0.2, -0.6, 0.35, 1.3);
  const Eigen::Vector4d norm = b.normalize(phys);
  ad::Tape tape;
  ad::Binder bind(tape);
  const auto a = unit.evaluate(bind, point_row({norm[0], norm[1], norm[2], norm[3]}), ids);
  const auto c = scaled.evaluate(bind, point_row({phys[0], phys[1], phys[2], phys[3]}), ids);
  const Eigen::Vector4d ext = b.extent();
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(c.stress.tangent(k).value()[j] == doctest::Approx(a.stress.tangent(k).value()[j] / ext[k]).epsilon(1e-12));
}

TEST_CASE("material outputs are continuous in time") {
  MaterialField f(small_config(), {}, 1, 13);
  randomize_output(f, 14);
  const std::int64_t ids[] = {0};
  ad::Tape tape;
  ad::Binder bind(tape);
  // Lipschitz in t: shrinking the step tenfold shrinks the largest jump about tenfold.
  auto largest_jump = [&](double step) {
    double prev = f.predict_at(bind, point_row({0.4, 0.4, 0.4, 0.0}), ids).stress.value()[0];
    double worst = 0;
    for (double t = step; t <= 1.0; t += step) {
      const double v = f.predict_at(bind, point_row({0.4, 0.4, 0.4, t}), ids).stress.value()[0];
      worst = std::max(worst, std::abs(v - prev));
      prev = v;
    }
    return worst;
  };
  const double coarse = largest_jump(1e-3), fine = largest_jump(1e-4);
  CHECK(coarse > 0.0);
  CHECK(fine < 0.2 * coarse);
}

TEST_CASE("split children share the parent's embedding") {
  scene::GaussianCloud cloud(0);
  scene::GaussianParticle big;
  big.id = 7;
  big.sh = {0, 0, 0};
  big.log_scale = Eigen::Vector3d::Constant(std::log(0.5));
  cloud.add(big);
  const double grad[] = {1.0};
  scene::DensifyConfig cfg;
  cfg.grad_threshold = 0.5;
  std::mt19937_64 rng(15);
  scene::densify(cloud, grad, cfg, rng);
  REQUIRE(cloud.size() == 2);
  MaterialField f(small_config(), {}, cloud.next_id(), 16);
  randomize_output(f, 17);
  ad::Tape tape;
  ad::Binder bind(tape);
  const ad::Tensor pts({2, 4}, {0.5, 0.5, 0.5, 0.3, 0.5, 0.5, 0.5, 0.3});
  const auto out = f.predict_at(bind, pts, cloud.ids());
  for (std::size_t c = 0; c < 3; ++c) CHECK(out.velocity.value().at(0, c) == out.velocity.value().at(1, c));
  for (std::size_t c = 0; c < 6; ++c) CHECK(out.stress.value().at(0, c) == out.stress.value().at(1, c));
}
