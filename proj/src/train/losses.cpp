#include "pidg/train/losses.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::train {
namespace {

std::vector<double> gaussian_window(const SsimOptions& o) {
  if (o.window < 1 || o.window % 2 == 0) throw ConfigError("SSIM window must be odd and positive");
  std::vector<double> w(static_cast<std::size_t>(o.window));
  const int r = o.window / 2;
  double total = 0.0;
  for (int i = -r; i <= r; ++i) total += w[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (o.sigma * o.sigma));
  for (double& v : w) v /= total;
  return w;
}

// Separable zero-padded filtering of one channel plane stored with stride `c`.
// The kernel is symmetric, so the same routine applies the adjoint.
class Blur {
 public:
  Blur(std::size_t h, std::size_t w, std::vector<double> kernel) : h_(h), w_(w), k_(std::move(kernel)), tmp_(h * w) {}

  void apply(const double* in, double* out) {
    const int r = static_cast<int>(k_.size() / 2);
    const int H = static_cast<int>(h_), W = static_cast<int>(w_);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int xx = x + i;
          if (xx >= 0 && xx < W) s += k_[static_cast<std::size_t>(i + r)] * in[y * W + xx];
        }
        tmp_[static_cast<std::size_t>(y * W + x)] = s;
      }
    }
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double s = 0.0;
        for (int i = -r; i <= r; ++i) {
          const int yy = y + i;
          if (yy >= 0 && yy < H) s += k_[static_cast<std::size_t>(i + r)] * tmp_[static_cast<std::size_t>(yy * W + x)];
        }
        out[y * W + x] = s;
      }
    }
  }

 private:
  std::size_t h_, w_;
  std::vector<double> k_;
  std::vector<double> tmp_;
};

struct SsimMaps {
  // Per channel plane: d mean_ssim / d (mu_x, E[x^2], E[xy]), already divided by the count.
  std::vector<double> g_mu, g_xx, g_xy;
};

double ssim_core(const ad::Tensor& x, const ad::Tensor& y, const SsimOptions& o, SsimMaps* maps) {
  if (x.rank() != 3 || !x.same_shape(y)) throw ShapeError("ssim expects two {H, W, C} images of equal shape");
  const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
  const std::size_t plane = h * w;
  Blur blur(h, w, gaussian_window(o));
  std::vector<double> xs(plane), ys(plane), buf(plane);
  std::vector<double> mx(plane), my(plane), exx(plane), eyy(plane), exy(plane);
  const double count = static_cast<double>(plane * c);
  if (maps) {
    maps->g_mu.assign(plane * c, 0.0);
    maps->g_xx.assign(plane * c, 0.0);
    maps->g_xy.assign(plane * c, 0.0);
  }
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      xs[i] = x[i * c + ch];
      ys[i] = y[i * c + ch];
    }
    blur.apply(xs.data(), mx.data());
    blur.apply(ys.data(), my.data());
    for (std::size_t i = 0; i < plane; ++i) buf[i] = xs[i] * xs[i];
    blur.apply(buf.data(), exx.data());
    for (std::size_t i = 0; i < plane; ++i) buf[i] = ys[i] * ys[i];
    blur.apply(buf.data(), eyy.data());
    for (std::size_t i = 0; i < plane; ++i) buf[i] = xs[i] * ys[i];
    blur.apply(buf.data(), exy.data());
    for (std::size_t i = 0; i < plane; ++i) {
      const double sx = exx[i] - mx[i] * mx[i], sy = eyy[i] - my[i] * my[i], sxy = exy[i] - mx[i] * my[i];
      const double a1 = 2 * mx[i] * my[i] + o.c1, a2 = 2 * sxy + o.c2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + o.c1, b2 = sx + sy + o.c2;
      const double s = a1 * a2 / (b1 * b2);
      total += s;
      if (maps) {
        const std::size_t k = ch * plane + i;
        maps->g_mu[k] = ((2 * my[i] * a2 - 2 * my[i] * a1) / (b1 * b2) - s * (2 * mx[i] / b1 - 2 * mx[i] / b2)) / count;
        maps->g_xx[k] = -s / b2 / count;
        maps->g_xy[k] = 2 * a1 / (b1 * b2) / count;
      }
    }
  }
  return total / count;
}

}  // namespace

ad::Var ssim(const ad::Var& image, const ad::Tensor& target, const SsimOptions& options) {
  auto maps = std::make_shared<SsimMaps>();
  const double value = ssim_core(image.value(), target, options, maps.get());
  const ad::Tensor tgt = target;
  return image.tape().record(
      "ssim", ad::Tensor::scalar(value), {image}, [image, tgt, maps, options](ad::Tape& tape, const ad::Tensor& g) {
        ad::Tensor* gx = tape.grad_slot(image);
        if (!gx) return;
        const ad::Tensor& x = image.value();
        const std::size_t h = x.shape()[0], w = x.shape()[1], c = x.shape()[2];
        const std::size_t plane = h * w;
        Blur blur(h, w, gaussian_window(options));
        std::vector<double> bm(plane), bxx(plane), bxy(plane);
        const double seed = g.item();
        for (std::size_t ch = 0; ch < c; ++ch) {
          blur.apply(maps->g_mu.data() + ch * plane, bm.data());
          blur.apply(maps->g_xx.data() + ch * plane, bxx.data());
          blur.apply(maps->g_xy.data() + ch * plane, bxy.data());
          for (std::size_t i = 0; i < plane; ++i) {
            const double xi = x[i * c + ch], yi = tgt[i * c + ch];
            (*gx)[i * c + ch] += seed * (bm[i] + 2 * xi * bxx[i] + yi * bxy[i]);
          }
        }
      });
}

ad::Tensor image_tensor(const Image& image) {
  return ad::Tensor({static_cast<std::size_t>(image.height), static_cast<std::size_t>(image.width), 3}, image.rgb);
}

Image tensor_image(const ad::Tensor& t) {
  if (t.rank() != 3 || t.shape()[2] != 3) throw ShapeError("expected an {H, W, 3} tensor");
  Image img(static_cast<int>(t.shape()[1]), static_cast<int>(t.shape()[0]));
  std::copy(t.data(), t.data() + t.size(), img.rgb.begin());
  return img;
}

double ssim(const Image& a, const Image& b, const SsimOptions& options) {
  return ssim_core(image_tensor(a), image_tensor(b), options, nullptr);
}

ad::Var renders_loss(const ad::Var& image, const ad::Tensor& target, double lambda_dssim) {
  if (!image.value().same_shape(target)) {
    throw ShapeError("renders_loss: render " + image.value().shape_string() + " vs target " + target.shape_string());
  }
  if (lambda_dssim < 0.0 || lambda_dssim > 1.0) throw ConfigError("D-SSIM weight must be in [0,1]");
  ad::Tape& tape = image.tape();
  const ad::Var l1 = ad::mean(ad::abs(ad::sub(image, tape.constant(target))));
  if (lambda_dssim == 0.0) return l1;
  const ad::Var dssim = ad::scale(ad::add_scalar(ad::neg(ssim(image, target)), 1.0), 0.5);
  return ad::add(ad::scale(l1, 1.0 - lambda_dssim), ad::scale(dssim, lambda_dssim));
}

double psnr(const ad::Tensor& a, const ad::Tensor& b) {
  if (!a.same_shape(b) || a.empty()) throw ShapeError("psnr: shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double psnr(const Image& a, const Image& b) { return psnr(image_tensor(a), image_tensor(b)); }

double total_loss(double renders, double cmr, double lpfm, const LossWeights& w) {
  if (!std::isfinite(renders)) throw NonFiniteError("loss_renders is not finite");
  if (!std::isfinite(cmr)) throw NonFiniteError("loss_cmr is not finite");
  if (!std::isfinite(lpfm)) throw NonFiniteError("loss_lpfm is not finite");
  return renders + w.cmr * cmr + w.lpfm * lpfm;
}

}  // namespace pidg::train
