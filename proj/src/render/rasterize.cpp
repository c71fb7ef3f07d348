#include "pidg/render/rasterize.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/common/parallel.hpp"
#include "pidg/geometry/quaternion.hpp"

namespace pidg::render {
namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

struct ProjCache {
  bool visible = false;
  Eigen::Vector3d t;
  Mat23 m;  // J W
  Eigen::Matrix3d sigma;
  Eigen::Matrix3d r;
  Eigen::Vector4d q_raw;
  Eigen::Vector4d q_unit;
  Eigen::Vector3d var;  // exp(2 s)
};

void check_rows(const ad::Var& v, std::size_t n, std::size_t c, const char* what) {
  const ad::Tensor& t = v.value();
  if (t.rank() != 2 || t.rows() != n || t.cols() != c) {
    throw ShapeError(std::string(what) + " has shape " + t.shape_string() + ", expected [" +
                     std::to_string(n) + "," + std::to_string(c) + "]");
  }
}

}  // namespace

Projection project(const Camera& cam, const ad::Var& means, const ad::Var& quats,
                   const ad::Var& log_scales, const ProjectOptions& opt) {
  const std::size_t n = means.rows();
  check_rows(means, n, 3, "means");
  check_rows(quats, n, 4, "quats");
  check_rows(log_scales, n, 3, "log_scales");
  auto cache = std::make_shared<std::vector<ProjCache>>(n);
  ad::Tensor raw({n, 6}, 0.0);
  std::vector<bool> visible(n, false);
  const ad::Tensor& mu = means.value();
  const ad::Tensor& qv = quats.value();
  const ad::Tensor& sv = log_scales.value();
  for (std::size_t i = 0; i < n; ++i) {
    ProjCache& c = (*cache)[i];
    const Eigen::Vector3d p(mu.at(i, 0), mu.at(i, 1), mu.at(i, 2));
    c.q_raw = Eigen::Vector4d(qv.at(i, 0), qv.at(i, 1), qv.at(i, 2), qv.at(i, 3));
    c.q_unit = geometry::normalized(c.q_raw);
    c.t = cam.to_camera(p);
    if (!(c.t.z() > opt.near)) {
      raw.at(i, 2) = raw.at(i, 4) = opt.dilation;
      continue;
    }
    c.visible = visible[i] = true;
    const double z = c.t.z();
    Mat23 j;
    j << cam.fx / z, 0, -cam.fx * c.t.x() / (z * z), 0, cam.fy / z, -cam.fy * c.t.y() / (z * z);
    c.m = j * cam.rotation;
    c.r = geometry::rotation_matrix(c.q_unit);
    for (int k = 0; k < 3; ++k) c.var[k] = std::exp(2.0 * sv.at(i, k));
    c.sigma = c.r * c.var.asDiagonal() * c.r.transpose();
    const Eigen::Matrix2d cov = c.m * c.sigma * c.m.transpose();
    raw.at(i, 0) = cam.fx * c.t.x() / z + cam.cx;
    raw.at(i, 1) = cam.fy * c.t.y() / z + cam.cy;
    raw.at(i, 2) = cov(0, 0) + opt.dilation;
    raw.at(i, 3) = 0.5 * (cov(0, 1) + cov(1, 0));
    raw.at(i, 4) = cov(1, 1) + opt.dilation;
    raw.at(i, 5) = z;
  }
  const Camera camera = cam;
  ad::Var out = means.tape().record(
      "project", std::move(raw), {means, quats, log_scales},
      [cache, camera, means, quats, log_scales](ad::Tape& tape, const ad::Tensor& g) {
        ad::Tensor* gm = tape.grad_slot(means);
        ad::Tensor* gq = tape.grad_slot(quats);
        ad::Tensor* gs = tape.grad_slot(log_scales);
        for (std::size_t i = 0; i < cache->size(); ++i) {
          const ProjCache& c = (*cache)[i];
          if (!c.visible) continue;
          const double z = c.t.z(), x = c.t.x(), y = c.t.y();
          const double fx = camera.fx, fy = camera.fy;
          Eigen::Matrix2d gcov;
          gcov << g.at(i, 2), 0.5 * g.at(i, 3), 0.5 * g.at(i, 3), g.at(i, 4);
          // Sigma' = M Sigma M^T.
          const Eigen::Matrix3d g_sigma = c.m.transpose() * gcov * c.m;
          const Mat23 g_m = 2.0 * gcov * c.m * c.sigma;
          const Mat23 g_j = g_m * camera.rotation.transpose();
          Eigen::Vector3d g_t = Eigen::Vector3d::Zero();
          g_t.x() += g_j(0, 2) * (-fx / (z * z));
          g_t.y() += g_j(1, 2) * (-fy / (z * z));
          g_t.z() += g_j(0, 0) * (-fx / (z * z)) + g_j(0, 2) * (2 * fx * x / (z * z * z)) +
                     g_j(1, 1) * (-fy / (z * z)) + g_j(1, 2) * (2 * fy * y / (z * z * z));
          const double gu = g.at(i, 0), gv = g.at(i, 1);
          g_t.x() += gu * fx / z;
          g_t.y() += gv * fy / z;
          g_t.z() += -gu * fx * x / (z * z) - gv * fy * y / (z * z) + g.at(i, 5);
          if (gm) {
            const Eigen::Vector3d d = camera.rotation.transpose() * g_t;
            for (int k = 0; k < 3; ++k) gm->at(i, k) += d[k];
          }
          if (gs) {
            const Eigen::Matrix3d rgr = c.r.transpose() * g_sigma * c.r;
            for (int k = 0; k < 3; ++k) gs->at(i, k) += 2.0 * c.var[k] * rgr(k, k);
          }
          if (gq) {
            const Eigen::Matrix3d g_r = 2.0 * g_sigma * c.r * c.var.asDiagonal();
            const Eigen::Vector4d d =
                geometry::normalize_vjp(c.q_raw, geometry::rotation_matrix_vjp(c.q_unit, g_r));
            for (int k = 0; k < 4; ++k) gq->at(i, k) += d[k];
          }
        }
      });
  return Projection{ad::slice_cols(out, 0, 2), ad::slice_cols(out, 2, 5), ad::slice_cols(out, 5, 6),
                    std::move(visible)};
}

namespace {

struct Splat {
  double mx, my, a, b, c, z, opacity;
  double ca, cb, cc;  // conic
  std::int64_t id;
};

struct Contrib {
  std::uint32_t local;  // position in the tile list
  double alpha;
  double transmittance;
  bool clamped;
};

struct TileRecord {
  int x0, y0, x1, y1;
  std::vector<std::uint32_t> rows;         // depth-sorted particle rows
  std::vector<std::uint32_t> pixel_start;  // per tile pixel, plus end
  std::vector<Contrib> contribs;
  std::vector<double> final_t;
};

constexpr int kGradWidth = 10;  // mean(2) conic(3) opacity color(3) depth

}  // namespace

RenderOutput rasterize(const Camera& cam, const Projection& proj, const ad::Var& colors,
                       const ad::Var& opacities, std::span<const std::int64_t> ids,
                       const RasterSettings& s) {
  const std::size_t n = proj.means2d.rows();
  check_rows(proj.means2d, n, 2, "means2d");
  check_rows(proj.cov2d, n, 3, "cov2d");
  check_rows(proj.depth, n, 1, "depth");
  check_rows(colors, n, 3, "colors");
  check_rows(opacities, n, 1, "opacities");
  if (ids.size() != n || proj.visible.size() != n) throw ShapeError("rasterize: id count differs");
  if (s.tile_size < 1) throw ConfigError("tile size must be positive");
  const int w = cam.width, h = cam.height;

  const ad::Tensor& m2 = proj.means2d.value();
  const ad::Tensor& c2 = proj.cov2d.value();
  const ad::Tensor& dz = proj.depth.value();
  const ad::Tensor& op = opacities.value();
  const ad::Tensor& col = colors.value();
  auto splats = std::make_shared<std::vector<Splat>>(n);
  const int tiles_x = (w + s.tile_size - 1) / s.tile_size;
  const int tiles_y = (h + s.tile_size - 1) / s.tile_size;
  auto tiles = std::make_shared<std::vector<TileRecord>>(static_cast<std::size_t>(tiles_x) * tiles_y);
  for (int ty = 0; ty < tiles_y; ++ty) {
    for (int tx = 0; tx < tiles_x; ++tx) {
      TileRecord& t = (*tiles)[static_cast<std::size_t>(ty) * tiles_x + tx];
      t.x0 = tx * s.tile_size;
      t.y0 = ty * s.tile_size;
      t.x1 = std::min(w, t.x0 + s.tile_size);
      t.y1 = std::min(h, t.y0 + s.tile_size);
    }
  }
  const double cutoff = std::sqrt(s.mahalanobis_cutoff);
  for (std::size_t i = 0; i < n; ++i) {
    Splat& sp = (*splats)[i];
    sp = Splat{m2.at(i, 0), m2.at(i, 1), c2.at(i, 0), c2.at(i, 1), c2.at(i, 2), dz[i], op[i], 0, 0, 0, ids[i]};
    if (!proj.visible[i]) continue;
    const double det = sp.a * sp.c - sp.b * sp.b;
    if (!(det > 0) || !(sp.opacity >= s.alpha_min)) continue;
    sp.ca = sp.c / det;
    sp.cb = -sp.b / det;
    sp.cc = sp.a / det;
    const double rx = cutoff * std::sqrt(sp.a), ry = cutoff * std::sqrt(sp.c);
    const double lo_x = std::ceil(sp.mx - rx), hi_x = std::floor(sp.mx + rx);
    const double lo_y = std::ceil(sp.my - ry), hi_y = std::floor(sp.my + ry);
    if (hi_x < 0 || hi_y < 0 || lo_x > w - 1 || lo_y > h - 1) continue;
    const int px0 = static_cast<int>(std::max(0.0, lo_x)), px1 = static_cast<int>(std::min<double>(w - 1, hi_x));
    const int py0 = static_cast<int>(std::max(0.0, lo_y)), py1 = static_cast<int>(std::min<double>(h - 1, hi_y));
    for (int ty = py0 / s.tile_size; ty <= py1 / s.tile_size; ++ty)
      for (int tx = px0 / s.tile_size; tx <= px1 / s.tile_size; ++tx)
        (*tiles)[static_cast<std::size_t>(ty) * tiles_x + tx].rows.push_back(static_cast<std::uint32_t>(i));
  }

  ad::Tensor raw({static_cast<std::size_t>(w) * h, 4}, 0.0);
  RenderOutput out;
  out.coverage.assign(static_cast<std::size_t>(w) * h, 0.0);
  out.topk.width = w;
  out.topk.height = h;
  out.topk.k = s.top_k;
  out.topk.index.assign(static_cast<std::size_t>(w) * h * s.top_k, 0);
  out.topk.weight.assign(static_cast<std::size_t>(w) * h * s.top_k, 0.0);
  out.topk.count.assign(static_cast<std::size_t>(w) * h, 0);

  parallel_for(tiles->size(), [&](std::size_t ti) {
    TileRecord& t = (*tiles)[ti];
    std::sort(t.rows.begin(), t.rows.end(), [&](std::uint32_t a, std::uint32_t b) {
      const Splat& sa = (*splats)[a];
      const Splat& sb = (*splats)[b];
      if (sa.z != sb.z) return sa.z < sb.z;
      if (sa.id != sb.id) return sa.id < sb.id;
      return a < b;
    });
    const int tw = t.x1 - t.x0;
    const std::size_t npix = static_cast<std::size_t>(tw) * (t.y1 - t.y0);
    t.pixel_start.assign(npix + 1, 0);
    t.final_t.assign(npix, 1.0);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t lp = 0; lp < npix; ++lp) {
      const int px = t.x0 + static_cast<int>(lp % tw);
      const int py = t.y0 + static_cast<int>(lp / tw);
      t.pixel_start[lp] = static_cast<std::uint32_t>(t.contribs.size());
      double tr = 1.0;
      double rgb[3] = {0, 0, 0};
      double depth = 0;
      for (std::size_t li = 0; li < t.rows.size(); ++li) {
        const std::uint32_t row = t.rows[li];
        const Splat& sp = (*splats)[row];
        const double dx = px - sp.mx, dy = py - sp.my;
        const double maha = sp.ca * dx * dx + 2 * sp.cb * dx * dy + sp.cc * dy * dy;
        if (maha > s.mahalanobis_cutoff) continue;
        const double g = std::exp(-0.5 * maha);
        double alpha = sp.opacity * g;
        if (alpha < s.alpha_min) continue;
        const bool clamped = alpha > s.alpha_max;
        if (clamped) alpha = s.alpha_max;
        const double wgt = alpha * tr;
        for (int ch = 0; ch < 3; ++ch) rgb[ch] += col.at(row, ch) * wgt;
        depth += sp.z * wgt;
        t.contribs.push_back({static_cast<std::uint32_t>(li), alpha, tr, clamped});
        tr *= 1.0 - alpha;
      }
      t.final_t[lp] = tr;
      const std::size_t pix = static_cast<std::size_t>(py) * w + px;
      for (int ch = 0; ch < 3; ++ch) raw.at(pix, ch) = rgb[ch] + tr * s.background[ch];
      raw.at(pix, 3) = depth + tr * s.background_depth;
      out.coverage[pix] = 1.0 - tr;

      const std::size_t begin = t.pixel_start[lp], end = t.contribs.size();
      if (end == begin || s.top_k == 0) continue;
      const double total = 1.0 - tr;
      ranked.clear();
      for (std::size_t k = begin; k < end; ++k) ranked.emplace_back(t.contribs[k].alpha * t.contribs[k].transmittance, k);
      const std::size_t keep = std::min(s.top_k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                        [&](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          const std::uint32_t ra = t.rows[t.contribs[a.second].local];
                          const std::uint32_t rb = t.rows[t.contribs[b.second].local];
                          if ((*splats)[ra].id != (*splats)[rb].id) return (*splats)[ra].id < (*splats)[rb].id;
                          return ra < rb;
                        });
      for (std::size_t j = 0; j < keep; ++j) {
        out.topk.index[pix * s.top_k + j] = t.rows[t.contribs[ranked[j].second].local];
        out.topk.weight[pix * s.top_k + j] = ranked[j].first / total;
      }
      out.topk.count[pix] = static_cast<std::uint8_t>(keep);
    }
    t.pixel_start[npix] = static_cast<std::uint32_t>(t.contribs.size());
  });

  out.mean2d_grad = std::make_shared<ad::Tensor>(ad::Tensor({n, 2}, 0.0));
  const std::array<double, 3> bg{s.background[0], s.background[1], s.background[2]};
  const double bg_depth = s.background_depth;
  auto mean_grad = out.mean2d_grad;
  const ad::Var means2d = proj.means2d, cov2d = proj.cov2d, depth = proj.depth;
  ad::Var image = colors.tape().record(
      "rasterize", std::move(raw), {means2d, cov2d, depth, colors, opacities},
      [=](ad::Tape& tape, const ad::Tensor& g) {
        const ad::Tensor& col = colors.value();
        std::vector<std::vector<double>> local(tiles->size());
        parallel_for(tiles->size(), [&](std::size_t ti) {
          const TileRecord& t = (*tiles)[ti];
          std::vector<double>& acc = local[ti];
          acc.assign(t.rows.size() * kGradWidth, 0.0);
          const int tw = t.x1 - t.x0;
          const std::size_t npix = t.final_t.size();
          for (std::size_t lp = 0; lp < npix; ++lp) {
            const int px = t.x0 + static_cast<int>(lp % tw);
            const int py = t.y0 + static_cast<int>(lp / tw);
            const std::size_t pix = static_cast<std::size_t>(py) * w + px;
            const double gc[3] = {g.at(pix, 0), g.at(pix, 1), g.at(pix, 2)};
            const double gz = g.at(pix, 3);
            double rest[3] = {bg[0], bg[1], bg[2]};
            double rest_z = bg_depth;
            for (std::size_t k = t.pixel_start[lp + 1]; k-- > t.pixel_start[lp];) {
              const Contrib& c = t.contribs[k];
              const std::uint32_t row = t.rows[c.local];
              const Splat& sp = (*splats)[row];
              double* a = acc.data() + static_cast<std::size_t>(c.local) * kGradWidth;
              const double wgt = c.alpha * c.transmittance;
              double g_alpha = 0;
              for (int ch = 0; ch < 3; ++ch) {
                const double ci = col.at(row, ch);
                a[6 + ch] += gc[ch] * wgt;
                g_alpha += gc[ch] * c.transmittance * (ci - rest[ch]);
                rest[ch] = ci * c.alpha + (1.0 - c.alpha) * rest[ch];
              }
              a[9] += gz * wgt;
              g_alpha += gz * c.transmittance * (sp.z - rest_z);
              rest_z = sp.z * c.alpha + (1.0 - c.alpha) * rest_z;
              if (c.clamped) continue;
              const double dx = px - sp.mx, dy = py - sp.my;
              const double gauss = c.alpha / sp.opacity;
              a[5] += g_alpha * gauss;
              // alpha = o exp(-maha / 2)
              const double g_maha = -0.5 * g_alpha * c.alpha;
              a[0] += g_maha * -2.0 * (sp.ca * dx + sp.cb * dy);
              a[1] += g_maha * -2.0 * (sp.cb * dx + sp.cc * dy);
              a[2] += g_maha * dx * dx;
              a[3] += g_maha * 2.0 * dx * dy;
              a[4] += g_maha * dy * dy;
            }
          }
        });
        std::vector<double> total(n * kGradWidth, 0.0);
        for (std::size_t ti = 0; ti < tiles->size(); ++ti) {
          const TileRecord& t = (*tiles)[ti];
          for (std::size_t li = 0; li < t.rows.size(); ++li)
            for (int k = 0; k < kGradWidth; ++k) total[t.rows[li] * kGradWidth + k] += local[ti][li * kGradWidth + k];
        }
        ad::Tensor* g_mean = tape.grad_slot(means2d);
        ad::Tensor* g_cov = tape.grad_slot(cov2d);
        ad::Tensor* g_depth = tape.grad_slot(depth);
        ad::Tensor* g_col = tape.grad_slot(colors);
        ad::Tensor* g_op = tape.grad_slot(opacities);
        for (std::size_t i = 0; i < n; ++i) {
          const double* a = total.data() + i * kGradWidth;
          (*mean_grad).at(i, 0) += a[0];
          (*mean_grad).at(i, 1) += a[1];
          if (g_mean) {
            g_mean->at(i, 0) += a[0];
            g_mean->at(i, 1) += a[1];
          }
          if (g_cov && (a[2] != 0 || a[3] != 0 || a[4] != 0)) {
            const Splat& sp = (*splats)[i];
            Eigen::Matrix2d conic;
            conic << sp.ca, sp.cb, sp.cb, sp.cc;
            Eigen::Matrix2d gconic;
            gconic << a[2], 0.5 * a[3], 0.5 * a[3], a[4];
            const Eigen::Matrix2d gc = -conic * gconic * conic;
            g_cov->at(i, 0) += gc(0, 0);
            g_cov->at(i, 1) += gc(0, 1) + gc(1, 0);
            g_cov->at(i, 2) += gc(1, 1);
          }
          if (g_op) (*g_op)[i] += a[5];
          if (g_col)
            for (int ch = 0; ch < 3; ++ch) g_col->at(i, ch) += a[6 + ch];
          if (g_depth) (*g_depth)[i] += a[9];
        }
      });
  out.color = ad::reshape(ad::slice_cols(image, 0, 3), {static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  out.depth = ad::reshape(ad::slice_cols(image, 3, 4), {static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  return out;
}

ad::Var sh_to_color(const ad::Var& sh, int degree, const ad::Tensor& dirs) {
  constexpr double kC0 = 0.28209479177387814;
  constexpr double kC1 = 0.4886025119029199;
  const std::size_t n = sh.rows();
  const std::size_t basis = degree == 0 ? 1 : 4;
  if (degree < 0 || degree > 1) throw ConfigError("spherical harmonics degree must be 0 or 1");
  check_rows(sh, n, 3 * basis, "sh");
  if (degree == 1 && (dirs.rows() != n || dirs.cols() != 3)) throw ShapeError("sh_to_color: directions");
  auto coeffs = std::make_shared<std::vector<double>>(n * basis);
  for (std::size_t i = 0; i < n; ++i) {
    double* c = coeffs->data() + i * basis;
    c[0] = kC0;
    if (degree == 1) {
      c[1] = -kC1 * dirs.at(i, 1);
      c[2] = kC1 * dirs.at(i, 2);
      c[3] = -kC1 * dirs.at(i, 0);
    }
  }
  ad::Tensor y({n, 3}, 0.5);
  const ad::Tensor& v = sh.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < basis; ++b)
      for (int ch = 0; ch < 3; ++ch) y.at(i, ch) += (*coeffs)[i * basis + b] * v.at(i, b * 3 + ch);
  ad::Var lin = sh.tape().record("sh_eval", std::move(y), {sh}, [sh, coeffs, basis, n](ad::Tape& t, const ad::Tensor& g) {
    ad::Tensor* gs = t.grad_slot(sh);
    if (!gs) return;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < basis; ++b)
        for (int ch = 0; ch < 3; ++ch) gs->at(i, b * 3 + ch) += (*coeffs)[i * basis + b] * g.at(i, ch);
  });
  return ad::clamp(lin, 0.0, 1.0);
}

}  // namespace pidg::render
